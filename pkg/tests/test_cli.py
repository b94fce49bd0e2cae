import csv
import json

import numpy as np
import pytest

from modtune import autodiff as ad
from modtune.checkpoint import load_checkpoint
from modtune.cli import analyze_metrics, main, sweep_cells
from modtune.gradcheck import mod_gradcheck, relative_error

TINY_CFG = """
model.d_model = 16
model.n_layers = 4
model.n_heads = 2
model.d_ff = 32
model.max_seq_len = 16
data.kind = synth_addition
data.digits = 1
data.n_samples = 100
train.max_steps = 6
train.eval_every = 3
train.batch_size = 8
train.preset = lora_not_k_plus_mod
mod.k = 2
sweep.max_k = 3
sweep.exit_prompts = 2
gen.prompt = 3+4=
gen.max_new_tokens = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert main(["pretrain", "--config", str(root / "tiny.cfg"), "--out", str(root / "pre")]) == 0
    return root


def run(ws, *args):
    return main([args[0], "--config", str(ws / "tiny.cfg"), *args[1:]])


def test_pretrain_outputs(workspace):
    summary = json.loads((workspace / "pre" / "summary.json").read_text())
    assert summary["final_eval"]["loss_task"] < summary["initial_eval"]["loss_task"]
    assert summary["config"]["model"]["d_model"] == 16
    assert (workspace / "pre" / "base.ckpt.json").exists()


def test_pretrain_is_deterministic(workspace, tmp_path):
    assert run(workspace, "pretrain", "--out", str(tmp_path / "again")) == 0
    assert (tmp_path / "again" / "base.ckpt").read_bytes() == (workspace / "pre" / "base.ckpt").read_bytes()


def test_refuses_overwrite_without_force(workspace, capsys):
    assert run(workspace, "pretrain", "--out", str(workspace / "pre")) == 1
    assert "--force" in capsys.readouterr().err


def test_force_replaces(workspace, tmp_path):
    out = tmp_path / "g"
    out.mkdir()
    (out / "stale.txt").write_text("x")
    assert main(["gradcheck", "--out", str(out), "--force"]) == 0
    assert not (out / "stale.txt").exists() and (out / "gradcheck.json").exists()


def test_tune_multi_seed_summary(workspace, tmp_path):
    ckpt = str(workspace / "pre" / "base.ckpt")
    out = tmp_path / "tune"
    assert run(workspace, "tune", "--checkpoint", ckpt, "--seed", "0", "--seed", "1", "--seed", "2",
               "--out", str(out)) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [0, 1, 2] and len(summary["runs"]) == 3
    assert set(summary["aggregate"]["loss_task"]) == {"mean", "stddev"}
    run0 = summary["runs"][0]
    assert run0["mod_params"] == 16 * 2 + 2 * 16 * 2
    assert run0["added_params_percent"] == pytest.approx(100 * run0["mod_params"] / run0["lora_not_k_trainable"])
    assert run0["param_counts"]["base"]["trainable"] == 0
    for s in (0, 1, 2):
        assert (out / f"seed_{s}" / "metrics.csv").exists()


def test_tune_mod_only_and_lora_all(workspace, tmp_path):
    ckpt = str(workspace / "pre" / "base.ckpt")
    assert run(workspace, "tune", "--checkpoint", ckpt, "--preset", "mod_only", "--out", str(tmp_path / "m")) == 0
    m = json.loads((tmp_path / "m" / "summary.json").read_text())["runs"][0]
    assert m["added_params"] == 96
    assert m["added_params_percent"] == pytest.approx(96 / m["lora_not_k_trainable"] * 100)
    assert run(workspace, "tune", "--checkpoint", ckpt, "--preset", "lora_all", "--out", str(tmp_path / "l")) == 0
    assert json.loads((tmp_path / "l" / "summary.json").read_text())["runs"][0]["mod_params"] == 0


def test_tune_rejects_bad_preset(workspace, tmp_path):
    ckpt = str(workspace / "pre" / "base.ckpt")
    assert run(workspace, "tune", "--checkpoint", ckpt, "--preset", "nope", "--out", str(tmp_path / "x")) == 1
    assert not (tmp_path / "x").exists()


def test_eval_report_and_side_effect_free(workspace, tmp_path):
    ckpt = str(workspace / "pre" / "base.ckpt")
    assert run(workspace, "tune", "--checkpoint", ckpt, "--out", str(tmp_path / "t")) == 0
    tuned = tmp_path / "t" / "seed_0" / "tuned.ckpt"
    before = tuned.read_bytes()
    assert run(workspace, "eval", "--checkpoint", str(tuned), "--out", str(tmp_path / "e")) == 0
    assert tuned.read_bytes() == before
    report = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert 0.0 <= report["exact_match"] <= 1.0
    assert len(report["route_ce"]) == 2
    # the base checkpoint has no head: route k-1 is the standard final-layer eval
    assert run(workspace, "eval", "--checkpoint", ckpt, "--out", str(tmp_path / "e2")) == 0
    base = json.loads((tmp_path / "e2" / "eval.json").read_text())
    assert base["route_ce"][-1] == pytest.approx(base["final_layer_ce"], rel=1e-6)


def test_generate_with_early_exit(workspace, tmp_path):
    ckpt = str(workspace / "pre" / "base.ckpt")
    assert run(workspace, "tune", "--checkpoint", ckpt, "--top-k", "1", "--out", str(tmp_path / "t")) == 0
    tuned = str(tmp_path / "t" / "seed_0" / "tuned.ckpt")
    (tmp_path / "gen.cfg").write_text(TINY_CFG + "gen.early_exit = true\n")
    assert main(["generate", "--config", str(tmp_path / "gen.cfg"), "--checkpoint", tuned,
                 "--out", str(tmp_path / "g")]) == 0
    rep = json.loads((tmp_path / "g" / "generation.json").read_text())
    assert rep["report"]["layer_forward_ratio"] >= 1.0
    assert len(rep["ledger"]["per_token"]) == len(rep["tokens"])


def test_generate_early_exit_without_topk_is_validation_error(workspace, tmp_path):
    (tmp_path / "gen.cfg").write_text(TINY_CFG + "gen.early_exit = true\n")
    assert main(["generate", "--config", str(tmp_path / "gen.cfg"), "--checkpoint",
                 str(workspace / "pre" / "base.ckpt"), "--out", str(tmp_path / "g")]) == 1


def test_sweep_grid(workspace, tmp_path):
    assert run(workspace, "sweep", "--checkpoint", str(workspace / "pre" / "base.ckpt"), "--out", str(tmp_path / "s")) == 0
    with open(tmp_path / "s" / "grid.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 + 2 + 3
    for r in rows:
        dense = r["k"] == r["top_k"]
        assert r["routing"] == ("dense" if dense else "topk")
        assert (r["layer_forward_ratio"] == "") == dense
        if not dense:
            assert float(r["layer_forward_ratio"]) >= 1.0


def test_sweep_rejects_k_above_n(workspace, tmp_path):
    assert sweep_cells(8, 6)[-1] == (6, 6) and len(sweep_cells(8, 6)) == 21
    (tmp_path / "s.cfg").write_text(TINY_CFG.replace("sweep.max_k = 3", "sweep.max_k = 5"))
    assert main(["sweep", "--config", str(tmp_path / "s.cfg"), "--checkpoint",
                 str(workspace / "pre" / "base.ckpt"), "--out", str(tmp_path / "s")]) == 1


def test_analyze(workspace, tmp_path):
    ckpt = str(workspace / "pre" / "base.ckpt")
    assert run(workspace, "tune", "--checkpoint", ckpt, "--out", str(tmp_path / "t")) == 0
    metrics = tmp_path / "t" / "seed_0" / "metrics.csv"
    assert main(["analyze", "--metrics", str(metrics), "--out", str(tmp_path / "a")]) == 0
    with open(tmp_path / "a" / "routing_smoothed.csv") as fh:
        rows = list(csv.DictReader(fh))
    cols, table = analyze_metrics(metrics)
    assert len(rows) == len(table) == 2
    raw = [r for r in csv.DictReader(open(metrics).readlines()[1:]) if r["split"] == "train"]
    vals = [float(r["mean_route_0"]) for r in raw]
    assert float(rows[0]["mean_route_0_smoothed"]) == pytest.approx(sum(vals[:2]) / 2)


def test_analyze_schema_errors(tmp_path):
    (tmp_path / "m.csv").write_text("# modtune-metrics v9\nstep,split\n")
    assert main(["analyze", "--metrics", str(tmp_path / "m.csv"), "--out", str(tmp_path / "a")]) == 1
    (tmp_path / "n.csv").write_text("# modtune-metrics v1\nstep,split,loss_task\n1,train,2.0\n")
    assert main(["analyze", "--metrics", str(tmp_path / "n.csv"), "--out", str(tmp_path / "b")]) == 1


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("model.d_model = 8\nmodel.colour = red\n")
    assert main(["pretrain", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert "bad.cfg:2" in capsys.readouterr().err


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    rep = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
    assert rep["passed"] and rep["max_rel_err"] < 1e-4
    groups = {p["group"] for p in rep["params"]}
    assert groups == {"base", "lora", "mod_routing", "mod_norms"}


def test_gradcheck_lambda_zero_path():
    assert mod_gradcheck(lam=0.0).passed


def test_gradcheck_catches_corrupted_backward(monkeypatch, tmp_path):
    real = ad.gelu

    def bad_gelu(x):
        y = real(x)
        out = ad._result(y.data, (x,), lambda g: (g * 1.1,))
        return out

    monkeypatch.setattr(ad, "gelu", bad_gelu)
    report = mod_gradcheck()
    assert not report.passed
    assert any(f.startswith("blocks.") for f in report.failures())
    assert main(["gradcheck", "--out", str(tmp_path / "g")]) == 2


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 2e-9) == pytest.approx(1e-3)
    np.testing.assert_allclose(relative_error([1.0], [1.0001]), [1e-4 / 1.0001])


def test_threads_env(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("MODTUNE_THREADS", "1")
    assert main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    monkeypatch.setenv("MODTUNE_THREADS", "lots")
    assert main(["gradcheck", "--out", str(tmp_path / "h")]) == 1


def test_tuned_checkpoint_loads(workspace, tmp_path):
    ckpt = str(workspace / "pre" / "base.ckpt")
    assert run(workspace, "tune", "--checkpoint", ckpt, "--k", "3", "--out", str(tmp_path / "t")) == 0
    model, head, meta = load_checkpoint(tmp_path / "t" / "seed_0" / "tuned.ckpt")
    assert head.k == 3 and model.adapters
