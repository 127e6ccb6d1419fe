import numpy as np
import pytest

from poore import keywords as kw
from poore.data import CLS_ID, MASK_ID, PAD_ID
from poore.errors import ConfigError

from oracles import importance_triple_loop


def _ks(tokens, criterion="maha"):
    return kw.KeywordSet(frozenset(tokens), {t: 1.0 for t in tokens}, criterion)


def _random_corpus(seed, n=500, vocab=60):
    rng = np.random.default_rng(seed)
    seqs, atts = [], []
    for _ in range(n):
        length = int(rng.integers(2, 15))
        seqs.append([CLS_ID] + rng.integers(3, vocab, size=length - 1).tolist())
        atts.append(rng.dirichlet(np.ones(length)).tolist())
    return seqs, atts, rng.random(n).tolist()


def test_single_occurrence():
    imp = kw.token_importance([[CLS_ID, 7]], [[0.6, 0.4]], [0.5])
    assert imp == {7: pytest.approx(0.2)}


def test_repeated_token_averages_over_occurrences():
    imp = kw.token_importance([[CLS_ID, 7, 9, 7]], [[0.2, 0.1, 0.4, 0.3]], [1.0])
    assert imp[7] == pytest.approx(0.2)
    assert imp[9] == pytest.approx(0.4)


def test_zero_weight_annihilates():
    imp = kw.token_importance([[CLS_ID, 5, 6], [CLS_ID, 5]], [[0.2, 0.5, 0.3], [0.1, 0.9]], [0.0, 0.0])
    assert imp[5] == 0.0 and imp[6] == 0.0


def test_reserved_ids_never_scored():
    imp = kw.token_importance([[CLS_ID, MASK_ID, 4, PAD_ID]], [[0.25] * 4], [1.0])
    assert set(imp) == {4}


@pytest.mark.parametrize("criterion", ["maha", "baseline"])
def test_matches_triple_loop_oracle(criterion):
    seqs, atts, w = _random_corpus(0)
    weights = w if criterion == "maha" else [1.0] * len(w)
    expected = importance_triple_loop(seqs, atts, weights)
    got = kw.token_importance(seqs, atts, w, criterion)
    assert got.keys() == expected.keys()
    for t in expected:
        assert got[t] == pytest.approx(expected[t], abs=1e-10)


def test_invariant_to_order_and_batching():
    seqs, atts, w = _random_corpus(1, n=200)
    full = kw.token_importance(seqs, atts, w)
    perm = np.random.default_rng(3).permutation(len(seqs))
    shuffled = kw.token_importance([seqs[i] for i in perm], [atts[i] for i in perm], [w[i] for i in perm])
    for t in full:
        assert shuffled[t] == pytest.approx(full[t], abs=1e-12)
    # merging per-batch weighted sums reproduces the full-corpus value
    halves = [(seqs[:90], atts[:90], w[:90]), (seqs[90:], atts[90:], w[90:])]
    sums, counts = {}, {}
    for s, a, ww in halves:
        part = kw.token_importance(s, a, ww)
        for t, v in part.items():
            n = sum(seq.count(t) for seq in s)
            sums[t] = sums.get(t, 0.0) + v * n
            counts[t] = counts.get(t, 0) + n
    for t in full:
        assert sums[t] / counts[t] == pytest.approx(full[t], abs=1e-12)


def test_constant_weight_gives_baseline_ranking():
    seqs, atts, _ = _random_corpus(2, n=300)
    maha = kw.token_importance(seqs, atts, [0.37] * len(seqs), "maha")
    base = kw.token_importance(seqs, atts, None, "baseline")
    assert kw.select_keywords(maha, 15).keywords == kw.select_keywords(base, 15).keywords


def test_misaligned_attention_rejected():
    with pytest.raises(ValueError):
        kw.token_importance([[CLS_ID, 4]], [], [1.0])
    with pytest.raises(ValueError):
        kw.token_importance([[CLS_ID, 4, 5]], [[0.5, 0.5]], [1.0])


def test_select_top_m():
    assert kw.select_keywords({5: 0.9, 7: 0.1, 9: 0.5}, 2).keywords == {5, 9}


def test_select_tie_break_lowest_id():
    assert kw.select_keywords({8: 0.3, 4: 0.3, 6: 0.3}, 2).keywords == {4, 6}


def test_select_matches_sort_oracle():
    rng = np.random.default_rng(4)
    imp = {int(t): float(v) for t, v in zip(rng.permutation(np.arange(3, 203)), np.round(rng.random(200), 2))}
    expected = sorted(imp, key=lambda t: (-imp[t], t))[:20]
    ks = kw.select_keywords(imp, 20)
    assert ks.keywords == set(expected)
    assert min(imp[t] for t in ks.keywords) >= max(imp[t] for t in imp if t not in ks.keywords)


def test_select_too_many_rejected():
    with pytest.raises(ConfigError):
        kw.select_keywords({5: 1.0}, 2)


def test_context_mask_p0_identity():
    x = [CLS_ID, 5, 6, 7, PAD_ID]
    out = kw.context_mask(x, _ks([]), kw.MaskingConfig(p_mask=0.0), np.random.default_rng(0))
    assert out == x


def test_context_mask_p1_masks_all_non_reserved():
    x = [CLS_ID, 5, 6, 7, PAD_ID, PAD_ID]
    out = kw.context_mask(x, _ks([]), kw.MaskingConfig(p_mask=1.0), np.random.default_rng(0))
    assert out == [CLS_ID, MASK_ID, MASK_ID, MASK_ID, PAD_ID, PAD_ID]


def test_context_mask_protects_keywords_and_preserves_length():
    rng = np.random.default_rng(5)
    ks = _ks([5, 9])
    for _ in range(200):
        x = [CLS_ID] + rng.integers(3, 15, size=10).tolist()
        out = kw.context_mask(x, ks, kw.MaskingConfig(p_mask=0.8), rng)
        assert len(out) == len(x)
        assert all(o == t for o, t in zip(out, x) if t in ks)


def test_context_mask_unprotected_can_hit_keywords():
    x = [CLS_ID, 5, 5, 5]
    cfg = kw.MaskingConfig(p_mask=1.0, protect_keywords=False)
    assert kw.context_mask(x, _ks([5]), cfg, np.random.default_rng(0)) == [CLS_ID] + [MASK_ID] * 3


def test_context_mask_rate():
    rng = np.random.default_rng(6)
    x = [CLS_ID] + [10] * 1000
    masked = sum(kw.context_mask(x, _ks([]), kw.MaskingConfig(0.6), rng).count(MASK_ID) for _ in range(100))
    assert 0.58 <= masked / 100_000 <= 0.62


def test_mask_indicators_uncorrelated():
    rng = np.random.default_rng(7)
    x = [CLS_ID, 10, 11, 12, 13]
    draws = np.array([[t == MASK_ID for t in kw.context_mask(x, _ks([]), kw.MaskingConfig(0.5), rng)[1:]]
                      for _ in range(10_000)], dtype=float)
    corr = np.corrcoef(draws.T)
    off = corr[~np.eye(4, dtype=bool)]
    assert np.abs(off).max() < 0.05


def test_masking_config_validates():
    with pytest.raises(ConfigError):
        kw.MaskingConfig(p_mask=1.5)


def test_keyword_mask_definition():
    x = [CLS_ID, 4, 9, 4, 5, 8, PAD_ID]
    out, targets = kw.keyword_mask(x, _ks([8, 9]))
    assert targets == [(2, 9), (5, 8)]
    assert out == [CLS_ID, 4, MASK_ID, 4, 5, MASK_ID, PAD_ID]


def test_keyword_mask_no_keywords():
    x = [CLS_ID, 4, 5]
    out, targets = kw.keyword_mask(x, _ks([99]))
    assert out == x and targets == []


def test_keyword_mask_matches_position_scan():
    rng = np.random.default_rng(8)
    ks = _ks(rng.choice(np.arange(3, 40), size=8, replace=False).tolist())
    for _ in range(300):
        x = [CLS_ID] + rng.integers(3, 40, size=int(rng.integers(1, 20))).tolist()
        out, targets = kw.keyword_mask(x, ks)
        scan = {i for i in range(len(x)) if x[i] in ks.keywords}
        assert {p for p, _ in targets} == scan
        assert {i for i, t in enumerate(out) if t == MASK_ID} == scan


def test_targets_to_array():
    arr = kw.targets_to_array([[(1, 7)], []], 3)
    assert arr.tolist() == [[-100, 7, -100], [-100, -100, -100]]


def test_keywords_tsv_roundtrip(tmp_path):
    ks = kw.select_keywords({5: 0.9, 7: 0.1, 9: 0.5, 11: 0.3}, 3, "baseline")
    kw.write_keywords(ks, tmp_path / "keywords.tsv")
    back = kw.read_keywords(tmp_path / "keywords.tsv")
    assert back.keywords == ks.keywords and back.criterion == "baseline"
    assert all(back.importance[t] == ks.importance[t] for t in ks.keywords)
    assert (tmp_path / "keywords.tsv").read_text().splitlines()[1].startswith("5\t")
