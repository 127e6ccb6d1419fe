import numpy as np
import pytest
import torch

from poore import keywords as kw
from poore.data import CLS_ID, pad_batch
from poore.encoder import EncoderConfig, TextClassifier
from poore.losses import TrainBatch


def make_model(dtype=torch.float32, **overrides):
    cfg = dict(vocab_size=40, num_classes=3, depth=2, heads=2, model_dim=16, mlp_dim=32,
               max_len=12, dropout=0.1, seed=0)
    cfg.update(overrides)
    return TextClassifier(EncoderConfig(**cfg)).to(dtype)


def random_ids(seed, n=6, vocab=40, min_len=2, max_len=10):
    rng = np.random.default_rng(seed)
    seqs = [[CLS_ID] + rng.integers(3, vocab, size=int(rng.integers(min_len - 1, max_len))).tolist()
            for _ in range(n)]
    return seqs, torch.from_numpy(pad_batch(seqs))


def frozen_poore_batch(seed=0, n=6):
    seqs, ids = random_ids(seed, n=n, min_len=4)
    ks = kw.KeywordSet(frozenset(range(3, 12)), {}, "maha")
    rng = np.random.default_rng(seed)
    tilde = [kw.context_mask(s, ks, kw.MaskingConfig(0.7), rng) for s in seqs]
    km = [kw.keyword_mask(s, ks) for s in seqs]
    return TrainBatch(ids, torch.from_numpy(rng.integers(0, 3, size=n)),
                      torch.from_numpy(pad_batch(tilde)),
                      torch.from_numpy(pad_batch([m for m, _ in km])),
                      torch.from_numpy(kw.targets_to_array([t for _, t in km], ids.shape[1])))


@pytest.fixture
def model():
    return make_model()


@pytest.fixture
def mini_model():
    """Frozen float64 model (d=8, depth=1) for finite-difference checks."""
    return make_model(torch.float64, model_dim=8, mlp_dim=16, depth=1, dropout=0.0, seed=3)
