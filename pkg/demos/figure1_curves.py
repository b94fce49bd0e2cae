"""Per-route loss curves: pretrain, then tune with and without distillation.

Prints the eval cross-entropy of each route over training for lambda=1e-4
and lambda=0, plus the mean per-route KL to the final layer. Takes about
ten minutes on one core; pass a smaller step count as argv[1] to shorten.
"""

import sys

from modtune import DatasetSpec, ModConfig, ModelConfig, TrainConfig, build_dataset, init_model, setup_preset, train
from modtune.checkpoint import strip_to_base

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
data = build_dataset(DatasetSpec(kind="synth_addition", digits=2, n_samples=10000, seed=0))

base = init_model(ModelConfig(max_seq_len=32))
train(base, None, data, TrainConfig(preset="full_baseline", lr=1e-3, max_steps=2 * steps, eval_every=steps))

for lam in (1e-4, 0.0):
    model = strip_to_base(base)
    head = setup_preset(model, "mod_only", ModConfig(k=3, lam=lam), seed=0)
    res = train(model, head, data, TrainConfig(preset="mod_only", max_steps=steps, eval_every=steps // 10,
                                                eval_rows=256))
    print(f"\nlambda={lam}   step  route CE (layers {head.route_layer_map})   mean KL to final")
    for r in res.records:
        if r.split == "eval":
            ce = "  ".join(f"{v:.4f}" for v in r.loss_route)
            print(f"{r.step:>14}  {ce}   {r.loss_distill / (head.k - 1):.4f}")
