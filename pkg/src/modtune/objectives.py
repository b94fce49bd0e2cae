"""Task, distillation and combined losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mod_head import EnsembleOutput, ModHead, ensemble
from .model import TransformerModel, final_logits, forward, lm_head, pretrained_norm


@dataclass
class LossBundle:
    task: Tensor
    distill: Tensor
    total: Tensor
    per_route_task: list[float]

    def as_floats(self) -> dict:
        return {"task": self.task.item(), "distill": self.distill.item(),
                "total": self.total.item()}


def task_loss(ensemble_logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Mean cross-entropy over positions where ``pad_mask`` is True."""
    return ad.cross_entropy(ensemble_logits, targets, pad_mask)


def distill_loss(route_probs, detach_teacher: bool = True, mask=None) -> Tensor:
    """Sum over student routes of KL(P_i || P_final); zero when k == 1."""
    if len(route_probs) < 2:
        return ad.Tensor(0.0, dtype=route_probs[0].dtype if route_probs else None)
    teacher = route_probs[-1]
    if detach_teacher:
        teacher = ad.detach(teacher)
    total = None
    for p in route_probs[:-1]:
        term = ad.kl_div(p, teacher, mask)
        total = term if total is None else total + term
    return total


def combined_loss(task: Tensor, distill: Tensor, lam: float) -> Tensor:
    if lam == 0:
        return task
    return task + ad.scale(distill, lam)


def route_task_losses(route_logits, targets, mask) -> list[float]:
    """Cross-entropy of each route on its own, outside any tape."""
    return [ad.cross_entropy(ad.detach(l), targets, mask).item() for l in route_logits]


def mod_losses(model: TransformerModel, head: ModHead, tokens, targets, mask,
               trace=None) -> tuple[LossBundle, EnsembleOutput]:
    """Forward pass plus every loss term for one batch."""
    if trace is None:
        trace = forward(model, tokens)
    lam = head.cfg.lam
    out = ensemble(model, head, trace, with_probs=True)
    task = task_loss(out.ensemble_logits, targets, mask)
    if lam == 0 or head.k == 1:
        # keep the graph free of the distillation branch
        with ad.no_grad():
            distill = distill_loss([ad.detach(p) for p in out.route_probs], True, mask)
        total = task if lam == 0 else combined_loss(task, distill, lam)
    else:
        distill = distill_loss(out.route_probs, head.cfg.detach_teacher, mask)
        total = combined_loss(task, distill, lam)
    per_route = route_task_losses(out.route_logits, targets, mask)
    return LossBundle(task, distill, total, per_route), out


def baseline_losses(model: TransformerModel, tokens, targets, mask, probe_k: int = 0,
                    trace=None) -> LossBundle:
    """Final-layer loss; ``probe_k`` adds logit-lens CE of the last layers for diagnostics."""
    if trace is None:
        trace = forward(model, tokens)
    logits = final_logits(model, trace)
    task = task_loss(logits, targets, mask)
    per_route: list[float] = []
    if probe_k:
        n = model.cfg.n_layers
        with ad.no_grad():
            for j in range(n - probe_k + 1, n + 1):
                l = lm_head(model, pretrained_norm(model, ad.detach(trace[j])))
                per_route.append(ad.cross_entropy(l, targets, mask).item())
    zero = ad.Tensor(np.zeros((), dtype=task.dtype))
    return LossBundle(task, zero, task, per_route)

