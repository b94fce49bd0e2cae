"""A tour of the MoD head on an untrained toy model.

Builds a model, attaches a k=3 head, and shows dense vs Top-K route weights,
the loss bundle, and how much compute early exit saves when the router
prefers shallow routes.
"""

import numpy as np

from modtune import GenConfig, ModConfig, ModelConfig, generate, generate_early_exit, init_head, init_model
from modtune import autodiff as ad
from modtune.inference import acceleration_report
from modtune.mod_head import route_dense, route_topk
from modtune.model import forward
from modtune.objectives import mod_losses

cfg = ModelConfig(max_seq_len=32)
model = init_model(cfg)
head = init_head(model, ModConfig(k=3, top_k=1))
rng = np.random.default_rng(0)
head.w_g.data = rng.normal(0, 2.0, size=head.w_g.shape).astype(np.float32)

print(f"model: n={cfg.n_layers} d={cfg.d_model}, routes read layers {head.route_layer_map}")

tokens = np.array([list(b"12+34=")])
trace = forward(model, tokens)
x = trace[cfg.n_layers - head.k]
with ad.no_grad():
    dense = route_dense(head, x).data[0, -1]
    top1 = route_topk(head, x, 1).data[0, -1]
print("dense weights at last position:", np.round(dense, 4))
print("top-1 weights at last position:", np.round(top1, 4))

with ad.no_grad():
    bundle, _ = mod_losses(model, head, tokens[:, :-1], tokens[:, 1:], np.ones((1, 5), bool))
print(f"task {bundle.task.item():.4f}  distill {bundle.distill.item():.4f}  total {bundle.total.item():.4f}")

gen = GenConfig(max_new_tokens=8, stop_at_eos=False)
full, _ = generate(model, head, list(b"7+5="), gen)
fast, ledger = generate_early_exit(model, head, list(b"7+5="), gen)
print("same tokens with early exit:", full == fast)
print("layers per token:", ledger.layers_computed)
print("report:", acceleration_report(ledger))
