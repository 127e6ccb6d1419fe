"""Token-id corpora: a seeded synthetic intent benchmark and a JSONL loader.

Every sequence starts with the CLS id.  Reserved ids sit at the front of the
id range: PAD=0, MASK=1, CLS=2.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError

PAD_ID = 0
MASK_ID = 1
CLS_ID = 2
NUM_RESERVED = 3

SPLITS = ("train", "val", "test")
OOD_MODES = ("heldout_class", "disjoint_vocab")


class DataError(ConfigError):
    """Invalid corpus record or generator configuration."""


class OODAccessError(RuntimeError):
    """OOD examples were requested while the corpus was locked for training."""


@dataclass(frozen=True)
class Vocabulary:
    size: int
    pad: int = PAD_ID
    mask: int = MASK_ID
    cls: int = CLS_ID

    def __post_init__(self):
        ids = (self.pad, self.mask, self.cls)
        if len(set(ids)) != 3:
            raise DataError(f"reserved ids must be distinct, got {ids}")
        if self.size <= max(ids):
            raise DataError(f"vocab size {self.size} does not cover reserved ids {ids}")

    @property
    def reserved(self) -> frozenset[int]:
        return frozenset((self.pad, self.mask, self.cls))


@dataclass(frozen=True)
class LabeledExample:
    tokens: tuple[int, ...]
    label: int | None
    is_ood: bool
    split: str

    def validate(self, vocab: Vocabulary | None = None, num_classes: int | None = None,
                 max_len: int | None = None) -> None:
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.is_ood:
            if self.split != "test":
                raise DataError(f"OOD example must be in the test split, got {self.split!r}")
            if self.label is not None:
                raise DataError("OOD example must not carry a label")
        else:
            if self.label is None:
                raise DataError("IND example needs a label")
            if self.label < 0 or (num_classes is not None and self.label >= num_classes):
                raise DataError(f"label {self.label} out of range")
        if not self.tokens:
            raise DataError("empty token sequence")
        if max_len is not None and len(self.tokens) > max_len:
            raise DataError(f"sequence length {len(self.tokens)} exceeds max_len {max_len}")
        if vocab is not None:
            if self.tokens[0] != vocab.cls:
                raise DataError("sequence must start with CLS")
            if any(t < 0 or t >= vocab.size for t in self.tokens):
                raise DataError("token id outside vocabulary")
            body = self.tokens[1:]
            if vocab.cls in body:
                raise DataError("CLS may only appear at position 0")
            if vocab.pad in body:
                first = body.index(vocab.pad)
                if any(t != vocab.pad for t in body[first:]):
                    raise DataError("PAD may only appear as a trailing run")


@dataclass
class SynthConfig:
    """Layout: reserved | IND keyword pools | held-out pools | context pool | OOD-only region."""

    num_classes: int = 8
    vocab_size: int = 400
    keywords_per_class: int = 12
    num_heldout_classes: int = 4
    context_pool_size: int = 150
    min_len: int = 6
    max_len: int = 16
    keywords_per_sentence: tuple[int, int] = (1, 3)
    # probability that a keyword slot borrows from another IND class
    keyword_confusion: float = 0.15
    # probability that an OOD sentence carries one IND keyword
    ood_ind_keyword_rate: float = 0.5
    # fraction of OOD context tokens drawn from the OOD-only region instead of the shared pool
    ood_context_shift: float = 0.5
    n_train: int = 1200
    n_val: int = 300
    n_test: int = 400
    n_test_ood: int = 400
    ood_mode: str = "heldout_class"
    # None: derived from the experiment's master seed (0 when generated directly)
    seed: int | None = None

    @property
    def ood_region_size(self) -> int:
        return self.vocab_size - self._context_end

    @property
    def _keyword_end(self) -> int:
        return NUM_RESERVED + self.keywords_per_class * (self.num_classes + self.num_heldout_classes)

    @property
    def _context_end(self) -> int:
        return self._keyword_end + self.context_pool_size

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DataError("need at least two IND classes")
        if self.keywords_per_class < 1 or self.context_pool_size < 1:
            raise DataError("keyword and context pools must be non-empty")
        if self.ood_mode not in OOD_MODES:
            raise DataError(f"ood_mode must be one of {OOD_MODES}")
        if self._context_end > self.vocab_size:
            raise DataError(
                f"pools need {self._context_end} ids (reserved + keyword pools + context pool) "
                f"but vocab_size is {self.vocab_size}")
        if self.ood_mode == "heldout_class" and self.num_heldout_classes < 1:
            raise DataError("heldout_class mode needs num_heldout_classes >= 1")
        if self.ood_mode == "disjoint_vocab" and self.ood_region_size < 1:
            raise DataError("disjoint_vocab mode needs vocabulary beyond the context pool")
        lo, hi = self.keywords_per_sentence
        if not 1 <= lo <= hi or hi > self.min_len:
            raise DataError("keywords_per_sentence must satisfy 1 <= lo <= hi <= min_len")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("sentence length range is empty")
        if self.ood_context_shift > 0 and self.ood_region_size < 1:
            raise DataError("ood_context_shift > 0 needs vocabulary beyond the context pool")
        for p in (self.keyword_confusion, self.ood_ind_keyword_rate, self.ood_context_shift):
            if not 0.0 <= p <= 1.0:
                raise DataError("probabilities must lie in [0, 1]")

    def keyword_pool(self, cls_index: int) -> np.ndarray:
        """Pool for IND class ``cls_index``; indices >= num_classes address held-out pools."""
        start = NUM_RESERVED + cls_index * self.keywords_per_class
        return np.arange(start, start + self.keywords_per_class)

    def context_pool(self) -> np.ndarray:
        return np.arange(self._keyword_end, self._context_end)

    def ood_region(self) -> np.ndarray:
        return np.arange(self._context_end, self.vocab_size)


@dataclass
class Corpus:
    """Examples plus vocabulary, with a lock that hides OOD data from training code."""

    examples: list[LabeledExample]
    vocab: Vocabulary
    num_classes: int
    _ood_locked: bool = field(default=False, repr=False)

    def __len__(self):
        return len(self.examples)

    def split(self, name: str) -> list[LabeledExample]:
        """IND examples of one split."""
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [e for e in self.examples if e.split == name and not e.is_ood]

    def test_examples(self) -> list[LabeledExample]:
        """The full test split, IND and OOD."""
        if self._ood_locked:
            raise OODAccessError("OOD test data requested while the corpus is locked for training")
        return [e for e in self.examples if e.split == "test"]

    @contextmanager
    def ood_locked(self) -> Iterator["Corpus"]:
        prev = self._ood_locked
        self._ood_locked = True
        try:
            yield self
        finally:
            self._ood_locked = prev


def _sample_sentence(rng: np.random.Generator, cfg: SynthConfig, keyword_pool: np.ndarray,
                     context: np.ndarray, confusion_pools: Sequence[np.ndarray],
                     confusion: float) -> list[int]:
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    lo, hi = cfg.keywords_per_sentence
    n_kw = int(rng.integers(lo, hi + 1))
    body = rng.choice(context, size=length).tolist()
    positions = rng.choice(length, size=n_kw, replace=False)
    for pos in positions:
        pool = keyword_pool
        if confusion_pools and rng.random() < confusion:
            pool = confusion_pools[int(rng.integers(len(confusion_pools)))]
        body[int(pos)] = int(rng.choice(pool))
    return [CLS_ID] + [int(t) for t in body]


def generate_synthetic(cfg: SynthConfig) -> Corpus:
    """Seeded synthetic intent corpus.

    IND sentences mix one or more keywords from their class pool with tokens
    from a shared context pool.  OOD test sentences use held-out class pools
    (``heldout_class``) or an id region never touched by IND data
    (``disjoint_vocab``).
    """
    cfg.validate()
    rng = np.random.default_rng(0 if cfg.seed is None else cfg.seed)
    context = cfg.context_pool()
    ind_pools = [cfg.keyword_pool(c) for c in range(cfg.num_classes)]
    examples: list[LabeledExample] = []

    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        for _ in range(n):
            label = int(rng.integers(cfg.num_classes))
            others = [p for c, p in enumerate(ind_pools) if c != label]
            toks = _sample_sentence(rng, cfg, ind_pools[label], context, others, cfg.keyword_confusion)
            examples.append(LabeledExample(tuple(toks), label, False, split))

    for _ in range(cfg.n_test_ood):
        if cfg.ood_mode == "heldout_class":
            h = cfg.num_classes + int(rng.integers(cfg.num_heldout_classes))
            toks = _sample_sentence(rng, cfg, cfg.keyword_pool(h), context, [], 0.0)
            ctx_positions = [i for i, t in enumerate(toks) if context[0] <= t <= context[-1]]
            region = cfg.ood_region()
            for i in ctx_positions:
                if rng.random() < cfg.ood_context_shift:
                    toks[i] = int(rng.choice(region))
            if ctx_positions and rng.random() < cfg.ood_ind_keyword_rate:
                pos = ctx_positions[int(rng.integers(len(ctx_positions)))]
                pool = ind_pools[int(rng.integers(cfg.num_classes))]
                toks[pos] = int(rng.choice(pool))
        else:
            region = cfg.ood_region()
            toks = _sample_sentence(rng, cfg, region, region, [], 0.0)
        examples.append(LabeledExample(tuple(toks), None, True, "test"))

    return Corpus(examples, Vocabulary(cfg.vocab_size), cfg.num_classes)


def _example_from_record(rec: dict, lineno: int) -> LabeledExample:
    try:
        ids = rec["token_ids"]
        label = rec["label"]
        is_ood = rec["is_ood"]
        split = rec["split"]
    except KeyError as err:
        raise DataError(f"line {lineno}: missing field {err.args[0]!r}") from None
    if not isinstance(ids, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in ids):
        raise DataError(f"line {lineno}: token_ids must be a list of integers")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool)):
        raise DataError(f"line {lineno}: label must be an integer or null")
    if not isinstance(is_ood, bool):
        raise DataError(f"line {lineno}: is_ood must be a boolean")
    if not isinstance(split, str):
        raise DataError(f"line {lineno}: split must be a string")
    if not ids or ids[0] != CLS_ID:
        ids = [CLS_ID] + ids
    return LabeledExample(tuple(ids), label, is_ood, split)


def load_jsonl(path: str | Path, vocab_size: int | None = None, num_classes: int | None = None,
               max_len: int | None = None) -> Corpus:
    """Read a pre-tokenized corpus, one JSON record per line.

    CLS is prepended when a sequence does not already start with it.  When
    ``vocab_size``/``num_classes`` are omitted they are inferred from the data.
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"line {lineno}: {err.msg}") from None
            if not isinstance(rec, dict):
                raise DataError(f"line {lineno}: record must be a JSON object")
            ex = _example_from_record(rec, lineno)
            try:
                ex.validate(max_len=max_len)
            except DataError as err:
                raise DataError(f"line {lineno}: {err}") from None
            examples.append(ex)
    if not examples:
        raise DataError(f"{path}: no records")

    if vocab_size is None:
        vocab_size = max(NUM_RESERVED, 1 + max(max(e.tokens) for e in examples))
    if num_classes is None:
        labels = [e.label for e in examples if e.label is not None]
        num_classes = 1 + max(labels) if labels else 0
    vocab = Vocabulary(vocab_size)
    for lineno, ex in enumerate(examples, start=1):
        try:
            ex.validate(vocab, num_classes, max_len)
        except DataError as err:
            raise DataError(f"record {lineno}: {err}") from None
    return Corpus(examples, vocab, num_classes)


def write_jsonl(examples: Iterable[LabeledExample] | Corpus, path: str | Path) -> None:
    if isinstance(examples, Corpus):
        examples = examples.examples
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"token_ids": list(ex.tokens), "label": ex.label, "is_ood": ex.is_ood,
                   "split": ex.split}
            fh.write(json.dumps(rec) + "\n")


def synth_config_from_dict(d: dict) -> SynthConfig:
    known = set(SynthConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise DataError(f"unknown synthetic config keys: {sorted(unknown)}")
    d = dict(d)
    if "keywords_per_sentence" in d:
        d["keywords_per_sentence"] = tuple(d["keywords_per_sentence"])
    return SynthConfig(**d)


def synth_config_to_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["keywords_per_sentence"] = list(cfg.keywords_per_sentence)
    return d


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> np.ndarray:
    """Right-pad to the longest sequence in the batch."""
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out
