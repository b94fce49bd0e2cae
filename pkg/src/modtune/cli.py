"""Command-line entry point: ``modtune <command> --config PATH --out DIR``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import statistics
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analytics import smooth
from .checkpoint import load_checkpoint, save_checkpoint, strip_to_base
from .config import RunConfig, load_config, with_overrides
from .data import BOS, build_dataset, decode, encode
from .errors import ConfigError, ModtuneError, NumericalError, ValidationError
from .gradcheck import TINY, mod_gradcheck
from .inference import ComputeLedger, GenConfig, acceleration_report, generate, generate_early_exit
from .lora import LoraConfig
from .mod_head import ModConfig
from .model import init_model
from .trainer import (MOD_PRESETS, MetricsWriter, evaluate, group_counts,
                      read_metrics, setup_preset, train)

log = logging.getLogger("modtune")

COMMANDS = ("pretrain", "tune", "eval", "generate", "sweep", "gradcheck", "analyze")


# output directories


@contextlib.contextmanager
def run_dir(out: Path, force: bool):
    """Build the output in a temporary sibling and move it into place at the end."""
    out = Path(out)
    if out.exists() and not force:
        raise ValidationError(f"output directory {out} exists; pass --force to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable), encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _dtype(cfg: RunConfig):
    if cfg.run.dtype not in ("float32", "float64"):
        raise ConfigError("run.dtype must be float32 or float64")
    return np.dtype(cfg.run.dtype)


def _require_checkpoint(cfg: RunConfig) -> str:
    if not cfg.run.checkpoint:
        raise ConfigError("run.checkpoint (or --checkpoint) is required for this command")
    return cfg.run.checkpoint


def _record_summary(rec) -> dict | None:
    if rec is None:
        return None
    return {"step": rec.step, "loss_task": rec.loss_task, "loss_distill": rec.loss_distill,
            "loss_total": rec.loss_total, "loss_route": rec.loss_route}


def _final_train(result):
    return next((r for r in reversed(result.records) if r.split == "train"), None)


# commands


def cmd_pretrain(cfg: RunConfig, out: Path, seeds, force: bool) -> dict:
    data = build_dataset(cfg.data)
    seed = seeds[0] if seeds else cfg.train.seed
    mcfg = replace(cfg.model, seed=seed if seeds else cfg.model.seed)
    model = init_model(mcfg, dtype=_dtype(cfg))
    tcfg = replace(cfg.train, preset="full_baseline", seed=seed)
    with run_dir(out, force) as tmp:
        with MetricsWriter(tmp / "metrics.csv", tcfg.probe_k) as sink:
            result = train(model, None, data, tcfg, sink)
        save_checkpoint(tmp / "base.ckpt", model)
        summary = {"command": "pretrain", "config": cfg.to_dict(), "seed": seed,
                   "steps": result.steps, "tokens_seen": result.tokens_seen,
                   "wall_clock": result.wall_clock, "param_counts": result.param_counts,
                   "initial_eval": _record_summary(next((r for r in result.records if r.split == "eval"), None)),
                   "final_eval": _record_summary(result.final_eval)}
        write_json(tmp / "summary.json", summary)
    return summary


def lora_not_k_count(model_cfg, mod_cfg: ModConfig, lora_cfg: LoraConfig) -> int:
    """Trainable parameters of the LoRA-excluding-last-k baseline, by enumeration."""
    ref = init_model(model_cfg)
    setup_preset(ref, "lora_not_k", mod_cfg, lora_cfg)
    return group_counts(ref)["trainable_total"]


def added_params(counts: dict, reference: int) -> dict:
    """Trainables beyond the LoRA-excluding-last-k baseline, also as a percentage of it."""
    mod = counts["mod_routing"]["trainable"] + counts["mod_norms"]["trainable"]
    extra_lora = max(0, counts["lora"]["trainable"] - reference)
    added = mod + extra_lora + counts["base"]["trainable"]
    return {"mod_params": mod, "added_params": added, "lora_not_k_trainable": reference,
            "added_params_percent": 100.0 * added / reference if reference else None}


def tune_once(base_path: str, cfg: RunConfig, seed: int, out: Path | None, sink_path=None):
    base, _, _ = load_checkpoint(base_path)
    model = strip_to_base(base)
    tcfg = replace(cfg.train, seed=seed)
    head = setup_preset(model, tcfg.preset, replace(cfg.mod), cfg.lora, seed=seed)
    data = build_dataset(cfg.data)
    n_routes = head.k if head is not None else tcfg.probe_k
    if sink_path is not None:
        with MetricsWriter(sink_path, n_routes) as sink:
            result = train(model, head, data, tcfg, sink)
    else:
        result = train(model, head, data, tcfg)
    if out is not None:
        save_checkpoint(out, model, head)
    return model, head, data, result


def cmd_tune(cfg: RunConfig, out: Path, seeds, force: bool) -> dict:
    base_path = _require_checkpoint(cfg)
    seeds = list(seeds) or [cfg.train.seed]
    if cfg.train.preset == "full_baseline":
        log.info("tuning with full_baseline trains every base parameter")
    reference = lora_not_k_count(load_checkpoint(base_path)[0].cfg, cfg.mod, cfg.lora)
    runs = []
    with run_dir(out, force) as tmp:
        for s in seeds:
            sub = tmp / f"seed_{s}"
            sub.mkdir()
            model, head, _, result = tune_once(base_path, cfg, s, sub / "tuned.ckpt", sub / "metrics.csv")
            counts = result.param_counts
            run = {"seed": s, "steps": result.steps, "wall_clock": result.wall_clock,
                   "param_counts": counts, **added_params(counts, reference),
                   "final_train": _record_summary(_final_train(result)),
                   "final_eval": _record_summary(result.final_eval)}
            write_json(sub / "summary.json", {"command": "tune", "config": cfg.to_dict(), **run})
            runs.append(run)
        agg = {}
        for key in ("loss_task", "loss_total"):
            vals = [r["final_eval"][key] for r in runs if r["final_eval"]]
            if vals:
                agg[key] = {"mean": statistics.fmean(vals),
                            "stddev": statistics.pstdev(vals) if len(vals) > 1 else 0.0}
        summary = {"command": "tune", "config": cfg.to_dict(), "seeds": seeds,
                   "preset": cfg.train.preset, "runs": runs, "aggregate": agg}
        write_json(tmp / "summary.json", summary)
    return summary


def exact_match(model, head, prompts, max_new_tokens: int = 8) -> float | None:
    if not prompts:
        return None
    gcfg = GenConfig(max_new_tokens=max_new_tokens)
    hits = 0
    for prompt, answer in prompts:
        toks, _ = generate(model, head, prompt, replace(gcfg, max_new_tokens=len(answer)))
        hits += toks == list(answer)
    return hits / len(prompts)


def cmd_eval(cfg: RunConfig, out: Path, seeds, force: bool) -> dict:
    model, head, meta = load_checkpoint(_require_checkpoint(cfg))
    data = build_dataset(cfg.data)
    probe = head.k if head is not None else max(cfg.mod.k, 1)
    rec = evaluate(model, head, data.val, cfg.train.batch_size, probe_k=probe)
    final_ce = evaluate(model, None, data.val, cfg.train.batch_size).loss_task
    report = {"command": "eval", "config": cfg.to_dict(), "eval_ce": rec.loss_task,
              "final_layer_ce": final_ce, "distill": rec.loss_distill,
              "route_ce": rec.loss_route, "route_mean_weight": rec.mean_route,
              "route_sparsity": rec.sparsity_route,
              "exact_match": exact_match(model, head, data.val_prompts[:cfg.run.eval_max_prompts])}
    with run_dir(out, force) as tmp:
        write_json(tmp / "eval.json", report)
        with open(tmp / "route_ce.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["route", "layer", "ce"])
            n = model.cfg.n_layers
            for i, ce in enumerate(rec.loss_route):
                w.writerow([i, n - len(rec.loss_route) + 1 + i, repr(ce)])
    return report


def cmd_generate(cfg: RunConfig, out: Path, seeds, force: bool) -> dict:
    model, head, _ = load_checkpoint(_require_checkpoint(cfg))
    if head is not None and cfg.mod.top_k is not None and head.cfg.top_k != cfg.mod.top_k:
        head.cfg = replace(head.cfg, top_k=cfg.mod.top_k)
    prompt = [BOS] + encode(cfg.run.gen_prompt)
    gcfg = replace(cfg.gen, seed=seeds[0] if seeds else cfg.gen.seed)
    fn = generate_early_exit if gcfg.early_exit else generate
    tokens, ledger = fn(model, head, prompt, gcfg)
    report = {"command": "generate", "config": cfg.to_dict(), "prompt": cfg.run.gen_prompt,
              "tokens": tokens, "text": decode(tokens), "ledger": ledger.to_json(),
              "report": acceleration_report(ledger)}
    with run_dir(out, force) as tmp:
        write_json(tmp / "generation.json", report)
    return report


def sweep_cells(n_layers: int, max_k: int) -> list[tuple[int, int]]:
    """Triangular grid ``(k, top_k)`` with ``1 <= top_k <= k <= max_k``."""
    if max_k > n_layers:
        raise ConfigError(f"sweep.max_k={max_k} exceeds the model's {n_layers} layers")
    return [(k, t) for k in range(1, max_k + 1) for t in range(1, k + 1)]


def run_cell(base_path: str, cfg: RunConfig, k: int, top_k: int) -> dict:
    cell_cfg = replace(cfg, mod=replace(cfg.mod, k=k, top_k=None if top_k == k else top_k),
                       train=replace(cfg.train, preset=cfg.run.sweep_preset))
    model, head, data, result = tune_once(base_path, cell_cfg, cell_cfg.train.seed, None)
    row = {"k": k, "top_k": top_k, "routing": "dense" if top_k == k else "topk",
           "final_train_loss": _final_train(result).loss_total if _final_train(result) else None,
           "final_eval_loss": result.final_eval.loss_task if result.final_eval else None,
           "eval_accuracy": None, "layer_forward_ratio": None}
    prompts = data.val_prompts[:cfg.run.sweep_exit_prompts]
    if prompts:
        row["eval_accuracy"] = exact_match(model, head, prompts)
        if top_k < k:
            ledger = ComputeLedger(model.cfg.n_layers)
            for prompt, answer in prompts:
                _, led = generate_early_exit(model, head, prompt, GenConfig(max_new_tokens=len(answer)))
                ledger = ledger.merge(led)
            row["layer_forward_ratio"] = ledger.acceleration_ratio
    return row


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MODTUNE_THREADS", "1")))
    except ValueError as exc:
        raise ConfigError("MODTUNE_THREADS must be an integer") from exc


SWEEP_COLUMNS = ["k", "top_k", "routing", "final_train_loss", "final_eval_loss",
                 "eval_accuracy", "layer_forward_ratio"]


def cmd_sweep(cfg: RunConfig, out: Path, seeds, force: bool) -> dict:
    base_path = _require_checkpoint(cfg)
    if cfg.run.sweep_preset not in MOD_PRESETS:
        raise ConfigError(f"sweep.preset must be one of {MOD_PRESETS}")
    base_cfg = load_checkpoint(base_path)[0].cfg
    cells = sweep_cells(base_cfg.n_layers, cfg.run.sweep_max_k)
    if seeds:
        cfg = replace(cfg, train=replace(cfg.train, seed=seeds[0]))
    workers = _workers()
    with run_dir(out, force) as tmp:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(run_cell, [base_path] * len(cells), [cfg] * len(cells),
                                     [c[0] for c in cells], [c[1] for c in cells]))
        else:
            rows = [run_cell(base_path, cfg, k, t) for k, t in cells]
        with open(tmp / "grid.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, SWEEP_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({c: ("" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]))
                            for c in SWEEP_COLUMNS})
        summary = {"command": "sweep", "config": cfg.to_dict(), "cells": rows}
        write_json(tmp / "summary.json", summary)
    return summary


def cmd_gradcheck(cfg: RunConfig, out: Path, seeds, force: bool) -> dict:
    report = mod_gradcheck(TINY, k=2, lam=cfg.run.gradcheck_lambda, h=cfg.run.gradcheck_h,
                           tol=cfg.run.gradcheck_tol, seed=seeds[0] if seeds else 0)
    payload = {"command": "gradcheck", **report.to_json()}
    with run_dir(out, force) as tmp:
        write_json(tmp / "gradcheck.json", payload)
    if not report.passed:
        raise NumericalError("gradient check failed:\n  " + "\n  ".join(report.failures()[:20]))
    return payload


def analyze_metrics(path, window: int = 3, split: str = "train") -> tuple[list[str], list[list]]:
    """Smoothed per-route sparsity/mean/variance series from a metrics CSV."""
    columns, rows = read_metrics(path)
    routes = sorted(int(c.rsplit("_", 1)[1]) for c in columns if c.startswith("sparsity_route_"))
    needed = ["step", "split"] + [f"{s}_route_{i}" for s in ("sparsity", "mean", "var") for i in routes]
    missing = [c for c in needed if c not in columns]
    if missing or not routes:
        raise ValidationError(f"{path}: missing routing columns {missing or ['sparsity_route_*']}")
    rows = [r for r in rows if r["split"] == split]
    out_cols = ["step"]
    series = []
    for stem in ("sparsity", "mean", "var"):
        for i in routes:
            col = f"{stem}_route_{i}"
            vals = [float(r[col]) if r[col] != "" else float("nan") for r in rows]
            series.append(smooth(vals, window))
            out_cols.append(f"{col}_smoothed")
    table = [[int(r["step"])] + [float(s[j]) for s in series] for j, r in enumerate(rows)]
    return out_cols, table


def cmd_analyze(cfg: RunConfig, out: Path, seeds, force: bool) -> dict:
    if not cfg.run.analyze_metrics:
        raise ConfigError("analyze.metrics (or --metrics) is required")
    cols, table = analyze_metrics(cfg.run.analyze_metrics, cfg.run.analyze_window, cfg.run.analyze_split)
    with run_dir(out, force) as tmp:
        with open(tmp / "routing_smoothed.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in table:
                w.writerow([row[0]] + [repr(v) for v in row[1:]])
    return {"command": "analyze", "rows": len(table), "columns": cols}


HANDLERS = {"pretrain": cmd_pretrain, "tune": cmd_tune, "eval": cmd_eval,
            "generate": cmd_generate, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
            "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modtune", description="Mixture-of-Depths tuning at desk scale.")
    parser.add_argument("--version", action="version", version=f"modtune {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--seed", type=int, action="append", default=[], help="repeatable")
    parser.add_argument("--preset")
    parser.add_argument("--k", type=int)
    parser.add_argument("--top-k", type=int, dest="top_k")
    parser.add_argument("--lambda", type=float, dest="lam")
    parser.add_argument("--checkpoint", help="overrides run.checkpoint")
    parser.add_argument("--metrics", help="overrides analyze.metrics")
    parser.add_argument("--force", action="store_true", help="replace an existing output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _limit_threads():
    if not os.environ.get("MODTUNE_THREADS"):
        return contextlib.nullcontext()
    return threadpool_limits(limits=_workers())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.command == "gradcheck" and not args.config:
            cfg.mod = ModConfig(k=2)
        cfg = with_overrides(cfg, args.preset, args.k, args.top_k, args.lam)
        if args.checkpoint:
            cfg.run.checkpoint = args.checkpoint
        if args.metrics:
            cfg.run.analyze_metrics = args.metrics
        start = time.perf_counter()
        with _limit_threads():
            result = HANDLERS[args.command](cfg, args.out, args.seed, args.force)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        if args.command in ("gradcheck", "analyze"):
            print(json.dumps({k: result[k] for k in result if k in ("passed", "max_rel_err", "rows")}))
        return 0
    except NumericalError as exc:
        print(f"modtune: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ModtuneError, IndexError) as exc:
        print(f"modtune: error: {exc}", file=sys.stderr)
        return 1
