"""Keyword selection by attention importance and pseudo-OOD generation by context masking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import CLS_ID, MASK_ID, PAD_ID
from .errors import ConfigError
from .losses import IGNORE_INDEX

CRITERIA = ("maha", "baseline")
RESERVED = frozenset((PAD_ID, MASK_ID, CLS_ID))


@dataclass(frozen=True)
class KeywordSet:
    keywords: frozenset[int]
    importance: Mapping[int, float]
    criterion: str

    def __len__(self):
        return len(self.keywords)

    def __contains__(self, token: int) -> bool:
        return token in self.keywords


@dataclass(frozen=True)
class MaskingConfig:
    p_mask: float = 0.9
    mask_token: int = MASK_ID
    protect_keywords: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError(f"p_mask must lie in [0, 1], got {self.p_mask}")


def token_importance(sequences: Sequence[Sequence[int]], attentions: Sequence[Sequence[float]],
                     weights: Sequence[float] | None, criterion: str = "maha") -> dict[int, float]:
    """Importance of every token seen in ``sequences``.

    Each occurrence contributes its attention value times the weight of the
    sequence it sits in (the normalized Mahalanobis score); the sum is divided
    by the token's total occurrence count.  ``baseline`` uses weight 1.
    Reserved ids and PAD positions are skipped.
    """
    if criterion not in CRITERIA:
        raise ConfigError(f"criterion must be one of {CRITERIA}")
    if len(sequences) != len(attentions):
        raise ValueError(f"{len(sequences)} sequences but {len(attentions)} attention rows")
    if criterion == "maha":
        if weights is None or len(weights) != len(sequences):
            raise ValueError("maha criterion needs one weight per sequence")
    totals: dict[int, float] = {}
    counts: dict[int, int] = {}
    for i, (seq, att) in enumerate(zip(sequences, attentions)):
        seq = np.asarray(seq)
        att = np.asarray(att, dtype=np.float64)
        if att.shape[0] < seq.shape[0]:
            raise ValueError(f"sequence {i}: {seq.shape[0]} tokens but {att.shape[0]} attention values")
        keep = ~np.isin(seq, list(RESERVED))
        toks = seq[keep]
        vals = att[:seq.shape[0]][keep]
        w = 1.0 if criterion == "baseline" else float(weights[i])
        uniq, inv = np.unique(toks, return_inverse=True)
        sums = np.bincount(inv, weights=vals, minlength=uniq.size) * w
        occ = np.bincount(inv, minlength=uniq.size)
        for t, s, n in zip(uniq.tolist(), sums.tolist(), occ.tolist()):
            totals[t] = totals.get(t, 0.0) + s
            counts[t] = counts.get(t, 0) + n
    return {t: totals[t] / counts[t] for t in sorted(totals)}


def select_keywords(importance: Mapping[int, float], m: int, criterion: str = "maha") -> KeywordSet:
    """Top-``m`` tokens by importance, ties broken toward the lower token id."""
    candidates = {t: v for t, v in importance.items() if t not in RESERVED}
    if m < 1 or m > len(candidates):
        raise ConfigError(f"cannot select {m} keywords from {len(candidates)} scored tokens")
    ranked = sorted(candidates, key=lambda t: (-candidates[t], t))
    return KeywordSet(frozenset(ranked[:m]), dict(importance), criterion)


def default_top_m(sequences: Sequence[Sequence[int]], fraction: float = 0.1) -> int:
    observed = {t for s in sequences for t in s} - RESERVED
    return max(1, math.floor(fraction * len(observed)))


def context_mask(x: Sequence[int], keywords: KeywordSet, cfg: MaskingConfig,
                 rng: np.random.Generator) -> list[int]:
    """Replace each eligible context token by MASK with probability ``p_mask``.

    One uniform draw per eligible position, in order; reserved ids are never
    masked, nor are keywords when ``protect_keywords`` is set.
    """
    out = list(x)
    for i, tok in enumerate(out):
        if tok in RESERVED or (cfg.protect_keywords and tok in keywords.keywords):
            continue
        if rng.random() < cfg.p_mask:
            out[i] = cfg.mask_token
    return out


def keyword_mask(x: Sequence[int], keywords: KeywordSet,
                 mask_token: int = MASK_ID) -> tuple[list[int], list[tuple[int, int]]]:
    """Mask every keyword occurrence; return the masked copy and (position, original id) targets."""
    out = list(x)
    targets = []
    for i, tok in enumerate(out):
        if tok in keywords.keywords:
            targets.append((i, tok))
            out[i] = mask_token
    return out, targets


def targets_to_array(targets: Sequence[Sequence[tuple[int, int]]], width: int) -> np.ndarray:
    """Dense (B, width) target ids with IGNORE_INDEX off-target."""
    arr = np.full((len(targets), width), IGNORE_INDEX, dtype=np.int64)
    for b, pairs in enumerate(targets):
        for pos, tok in pairs:
            arr[b, pos] = tok
    return arr


def masking_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-example stream, so masks do not depend on batching or scheduling."""
    return np.random.default_rng([seed, epoch, index])


def write_keywords(ks: KeywordSet, path: str | Path) -> None:
    """TSV of the selected keywords, most important first."""
    ranked = sorted(ks.keywords, key=lambda t: (-ks.importance[t], t))
    lines = ["token_id\timportance\tcriterion"]
    lines += [f"{t}\t{ks.importance[t]!r}\t{ks.criterion}" for t in ranked]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_keywords(path: str | Path) -> KeywordSet:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    importance, criterion = {}, None
    for row in rows:
        tok, imp, criterion = row.split("\t")
        importance[int(tok)] = float(imp)
    if criterion is None:
        raise ConfigError(f"{path}: empty keyword file")
    return KeywordSet(frozenset(importance), importance, criterion)
