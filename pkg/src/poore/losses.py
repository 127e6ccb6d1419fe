"""Loss terms for post-hoc fine-tuning: CE, masked-keyword prediction, and POR."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError

IGNORE_INDEX = -100
# keeps the gradient of the pair distance finite when the pair coincides
DISTANCE_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    skl: float = 0.1
    por: float = 0.1

    def __post_init__(self):
        for name in ("skl", "por"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class LossSpec:
    weights: LossWeights = LossWeights(0.0, 0.0)
    train_mode: bool = True
    stop_grad_pseudo: bool = False
    distance_cap: float | None = None


@dataclass
class TrainBatch:
    ids: torch.Tensor                      # (B, T)
    labels: torch.Tensor                   # (B,)
    pseudo_ids: torch.Tensor | None = None  # context-masked x̃, same shape as ids
    km_ids: torch.Tensor | None = None      # keyword-masked inputs
    km_targets: torch.Tensor | None = None  # original ids at masked keywords, IGNORE_INDEX elsewhere


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[-1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def skl_from_logits(token_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean CE over target positions; 0 when the batch has none."""
    selected = targets != IGNORE_INDEX
    if not bool(selected.any()):
        return token_logits.sum() * 0.0
    return F.cross_entropy(token_logits[selected], targets[selected])


def skl_loss(model, km_ids: torch.Tensor, km_targets: torch.Tensor,
             train_mode: bool = False) -> torch.Tensor:
    out = model(km_ids, train_mode=train_mode)
    return skl_from_logits(model.token_logits(out.hidden_states[-1]), km_targets)


def pair_distances(fx: torch.Tensor, fx_tilde: torch.Tensor,
                   cap: float | None = None) -> torch.Tensor:
    if fx.shape != fx_tilde.shape:
        raise ValueError(f"paired embeddings differ in shape: {tuple(fx.shape)} vs {tuple(fx_tilde.shape)}")
    dist = torch.sqrt(((fx - fx_tilde) ** 2).sum(dim=-1) + DISTANCE_EPS)
    if cap is not None:
        dist = dist.clamp(max=cap)
    return dist


def por_from_embeddings(fx: torch.Tensor, fx_tilde: torch.Tensor,
                        cap: float | None = None) -> torch.Tensor:
    """Negative mean Euclidean distance between paired embeddings."""
    return -pair_distances(fx, fx_tilde, cap).mean()


def por_loss(model, x: torch.Tensor, x_tilde: torch.Tensor, train_mode: bool = False,
             stop_grad: bool = False, cap: float | None = None) -> torch.Tensor:
    if x.shape[0] != x_tilde.shape[0]:
        raise ValueError(f"batch size mismatch: {x.shape[0]} vs {x_tilde.shape[0]}")
    fx = model(x, train_mode=train_mode).cls_embedding
    fxt = model(x_tilde, train_mode=train_mode).cls_embedding
    if stop_grad:
        fxt = fxt.detach()
    return por_from_embeddings(fx, fxt, cap)


def total_loss(weights: LossWeights, components: dict[str, torch.Tensor]) -> torch.Tensor:
    for name in ("ce", "skl", "por"):
        v = components[name]
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise NumericError(f"loss component {name} is non-finite", term=name)
    return components["ce"] + weights.skl * components["skl"] + weights.por * components["por"]


def compute_components(model, batch: TrainBatch, spec: LossSpec) -> dict[str, torch.Tensor]:
    """CE, SKL, POR for one step, evaluated in that order.

    Terms with zero weight are not evaluated and report 0.
    """
    out = model(batch.ids, train_mode=spec.train_mode)
    ce = ce_loss(out.logits, batch.labels)
    zero = ce.new_zeros(())

    skl = zero
    if spec.weights.skl > 0:
        if batch.km_ids is None or batch.km_targets is None:
            raise ConfigError("SKL weight is positive but the batch has no keyword-masked inputs")
        skl = skl_loss(model, batch.km_ids, batch.km_targets, spec.train_mode)

    por = zero
    if spec.weights.por > 0:
        if batch.pseudo_ids is None:
            raise ConfigError("POR weight is positive but the batch has no pseudo-OOD inputs")
        fxt = model(batch.pseudo_ids, train_mode=spec.train_mode).cls_embedding
        if spec.stop_grad_pseudo:
            fxt = fxt.detach()
        por = por_from_embeddings(out.cls_embedding, fxt, spec.distance_cap)
    return {"ce": ce, "skl": skl, "por": por}


class LossLog:
    """Per-step CSV: step, ce, skl, por, total."""

    FIELDS = ("step", "ce", "skl", "por", "total")

    def __init__(self, path: str | Path):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.FIELDS)

    def write(self, step: int, values: dict[str, float]) -> None:
        self._writer.writerow([step] + [repr(float(values[k])) for k in self.FIELDS[1:]])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
