"""Confidence estimators.  Every score follows the convention higher = more IND-like."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import mahalanobis
from .data import pad_batch
from .encoder import EncoderOutput, TextClassifier
from .errors import ConfigError

ROSTER = ("maxprob", "entropy", "dropout", "odin", "embed_distance", "gradient_embed", "mahalanobis")
NEEDS_FIT = {"embed_distance": "centroids", "gradient_embed": "maha_grad", "mahalanobis": "maha"}


@dataclass
class EstimatorSettings:
    odin_temperature: float = 1000.0
    odin_epsilon: float = 0.0
    dropout_passes: int = 10
    dropout_seed: int = 0
    feature_layer: int = -1
    batch_size: int = 128


@dataclass
class FittedState:
    maha: mahalanobis.MahalanobisParams | None = None
    centroids: np.ndarray | None = None
    maha_grad: mahalanobis.MahalanobisParams | None = None


def maxprob(out: EncoderOutput) -> torch.Tensor:
    return out.logits.softmax(dim=-1).max(dim=-1).values


def entropy_score(out: EncoderOutput) -> torch.Tensor:
    """Negative predictive entropy, sum_c p_c log p_c."""
    logp = out.logits.log_softmax(dim=-1)
    return (logp.exp() * logp).sum(dim=-1)


@torch.no_grad()
def dropout_score(model: TextClassifier, ids: torch.Tensor, passes: int = 10,
                  seed: int = 0) -> torch.Tensor:
    """Max class probability of the MC-dropout predictive mean."""
    if passes < 1:
        raise ConfigError("dropout needs at least one pass")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        probs = sum(model(ids, train_mode=True).logits.softmax(dim=-1) for _ in range(passes))
    return (probs / passes).max(dim=-1).values


def odin_score(model: TextClassifier, ids: torch.Tensor, temperature: float = 1000.0,
               epsilon: float = 0.0) -> torch.Tensor:
    """Temperature-scaled max softmax, optionally after a signed-gradient step on token embeddings."""
    if epsilon == 0.0:
        with torch.no_grad():
            logits = model(ids).logits
        return (logits / temperature).softmax(dim=-1).max(dim=-1).values
    emb = model.embed(ids).detach().requires_grad_(True)
    logits = model(ids, token_embeds=emb).logits
    log_top = (logits / temperature).log_softmax(dim=-1).max(dim=-1).values
    (grad,) = torch.autograd.grad(log_top.sum(), emb)
    perturbed = emb.detach() + epsilon * grad.sign()
    with torch.no_grad():
        logits = model(ids, token_embeds=perturbed).logits
    return (logits / temperature).softmax(dim=-1).max(dim=-1).values


def embed_distance_score(centroids: np.ndarray, features) -> np.ndarray:
    """Negative Euclidean distance to the nearest class centroid."""
    x = np.asarray(features, dtype=np.float64)
    diff = x[:, None, :] - np.asarray(centroids, dtype=np.float64)[None]
    return -np.sqrt((diff ** 2).sum(axis=-1)).min(axis=1)


def gradient_features(model: TextClassifier, ids: torch.Tensor) -> np.ndarray:
    """Gradient of CE at the predicted label with respect to the CLS embedding."""
    with torch.no_grad():
        cls = model(ids).cls_embedding
    cls = cls.detach().requires_grad_(True)
    logits = model.head(cls)
    loss = F.cross_entropy(logits, logits.argmax(dim=-1).detach(), reduction="sum")
    (grad,) = torch.autograd.grad(loss, cls)
    return grad.double().numpy()


def gradient_embed_score(maha_grad: mahalanobis.MahalanobisParams, grads) -> np.ndarray:
    return mahalanobis.score(maha_grad, grads)


def mahalanobis_score_estimator(params: mahalanobis.MahalanobisParams, features) -> np.ndarray:
    return mahalanobis.score(params, features)


def features_of(out: EncoderOutput, layer: int = -1) -> torch.Tensor:
    """CLS hidden state of ``layer``; -1 is the final layer, i.e. f(x)."""
    if layer == -1:
        return out.cls_embedding
    return out.hidden_states[layer][:, 0]


def _batches(seqs: Sequence[Sequence[int]], size: int):
    for start in range(0, len(seqs), size):
        yield torch.from_numpy(pad_batch(seqs[start:start + size]))


@torch.no_grad()
def extract(model: TextClassifier, seqs: Sequence[Sequence[int]], layer: int = -1,
            batch_size: int = 128) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode (features, cls_embeddings, logits) as float64 arrays."""
    feats, cls, logits = [], [], []
    for ids in _batches(seqs, batch_size):
        out = model(ids)
        feats.append(features_of(out, layer).double().numpy())
        cls.append(out.cls_embedding.double().numpy())
        logits.append(out.logits.double().numpy())
    return np.concatenate(feats), np.concatenate(cls), np.concatenate(logits)


def fit_estimators(model: TextClassifier, seqs: Sequence[Sequence[int]], labels: Sequence[int],
                   settings: EstimatorSettings = EstimatorSettings()) -> FittedState:
    """Fit everything the roster needs on IND training data."""
    labels = np.asarray(labels)
    feats, cls, _ = extract(model, seqs, settings.feature_layer, settings.batch_size)
    centroids = np.stack([cls[labels == c].mean(axis=0) for c in range(int(labels.max()) + 1)])
    grads = np.concatenate([gradient_features(model, ids) for ids in _batches(seqs, settings.batch_size)])
    return FittedState(mahalanobis.fit(feats, labels), centroids, mahalanobis.fit(grads, labels))


def score_all(model: TextClassifier, seqs: Sequence[Sequence[int]], roster: Sequence[str],
              fitted: FittedState | None = None,
              settings: EstimatorSettings = EstimatorSettings()) -> dict[str, np.ndarray]:
    """Score every sequence with every estimator in ``roster``."""
    unknown = set(roster) - set(ROSTER)
    if unknown:
        raise ConfigError(f"unknown estimators: {sorted(unknown)}")
    fitted = fitted or FittedState()
    for name in roster:
        if name in NEEDS_FIT and getattr(fitted, NEEDS_FIT[name]) is None:
            raise ConfigError(f"estimator {name} needs fitted state {NEEDS_FIT[name]!r}")

    parts: dict[str, list[np.ndarray]] = {name: [] for name in roster}
    for b, ids in enumerate(_batches(seqs, settings.batch_size)):
        with torch.no_grad():
            out = model(ids)
        for name in roster:
            if name == "maxprob":
                s = maxprob(out).double().numpy()
            elif name == "entropy":
                s = entropy_score(out).double().numpy()
            elif name == "dropout":
                s = dropout_score(model, ids, settings.dropout_passes,
                                  settings.dropout_seed + b).double().numpy()
            elif name == "odin":
                s = odin_score(model, ids, settings.odin_temperature,
                               settings.odin_epsilon).detach().double().numpy()
            elif name == "embed_distance":
                s = embed_distance_score(fitted.centroids, out.cls_embedding.double().numpy())
            elif name == "gradient_embed":
                s = gradient_embed_score(fitted.maha_grad, gradient_features(model, ids))
            else:
                feats = features_of(out, settings.feature_layer).double().numpy()
                s = mahalanobis_score_estimator(fitted.maha, feats)
            parts[name].append(s)
    return {name: np.concatenate(v) for name, v in parts.items()}
