import json

import pytest

from poore.data import (CLS_ID, NUM_RESERVED, PAD_ID, Corpus, DataError, LabeledExample,
                        OODAccessError, SynthConfig, Vocabulary, generate_synthetic, load_jsonl,
                        pad_batch, write_jsonl)


def small_cfg(**kw):
    base = dict(num_classes=4, n_train=200, n_val=50, n_test=60, n_test_ood=60, seed=7)
    base.update(kw)
    return SynthConfig(**base)


def test_generation_is_deterministic(tmp_path):
    a, b = generate_synthetic(small_cfg()), generate_synthetic(small_cfg())
    write_jsonl(a, tmp_path / "a.jsonl")
    write_jsonl(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_different_seeds_differ():
    corpora = [tuple(generate_synthetic(small_cfg(seed=s)).examples) for s in range(10)]
    assert len(set(corpora)) == 10


def test_pool_budget_violation_rejected():
    with pytest.raises(DataError):
        generate_synthetic(small_cfg(vocab_size=100, keywords_per_class=30))


@pytest.mark.parametrize("mode", ["heldout_class", "disjoint_vocab"])
def test_examples_satisfy_invariants(mode):
    cfg = small_cfg(ood_mode=mode)
    corpus = generate_synthetic(cfg)
    for ex in corpus.examples:
        ex.validate(corpus.vocab, corpus.num_classes, cfg.max_len + 1)
    assert sum(e.is_ood for e in corpus.examples) == cfg.n_test_ood


def test_ind_examples_carry_class_keyword_and_shared_context():
    cfg = small_cfg()
    corpus = generate_synthetic(cfg)
    pools = [set(cfg.keyword_pool(c).tolist()) for c in range(cfg.num_classes)]
    ind_keywords = set().union(*pools)
    context = set(cfg.context_pool().tolist())
    for ex in corpus.examples:
        if ex.is_ood:
            continue
        body = set(ex.tokens[1:])
        assert body <= ind_keywords | context
        assert body & ind_keywords


def test_heldout_ood_uses_heldout_pools():
    cfg = small_cfg()
    corpus = generate_synthetic(cfg)
    heldout = set()
    for h in range(cfg.num_heldout_classes):
        heldout |= set(cfg.keyword_pool(cfg.num_classes + h).tolist())
    ind_tokens = {t for e in corpus.examples if not e.is_ood for t in e.tokens}
    assert not heldout & ind_tokens
    for ex in corpus.examples:
        if ex.is_ood:
            assert set(ex.tokens) & heldout


def test_disjoint_vocab_ood_never_overlaps_ind():
    cfg = small_cfg(ood_mode="disjoint_vocab", n_train=1000, n_val=1000, n_test=1000, n_test_ood=1000)
    corpus = generate_synthetic(cfg)
    ind = {t for e in corpus.examples if not e.is_ood for t in e.tokens}
    ood = {t for e in corpus.examples if e.is_ood for t in e.tokens}
    assert ind & ood == {CLS_ID}
    ind_keyword_pools = {t for c in range(cfg.num_classes) for t in cfg.keyword_pool(c).tolist()}
    assert not ood & ind_keyword_pools


def _record(ids, label, is_ood, split):
    return json.dumps({"token_ids": ids, "label": label, "is_ood": is_ood, "split": split})


def test_load_single_record(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(_record([2, 5, 9], 1, False, "train") + "\n")
    corpus = load_jsonl(p)
    assert corpus.examples == [LabeledExample((2, 5, 9), 1, False, "train")]


def test_load_prepends_cls(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(_record([5, 9], 0, False, "val") + "\n")
    assert load_jsonl(p).examples[0].tokens == (CLS_ID, 5, 9)


def test_load_rejects_ood_in_train(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(_record([2, 5], 0, False, "train") + "\n" + _record([2, 5], None, True, "train") + "\n")
    with pytest.raises(DataError, match="line 2"):
        load_jsonl(p)


def test_load_reports_malformed_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(_record([2, 5], 0, False, "train") + "\n{not json\n")
    with pytest.raises(DataError, match="line 2"):
        load_jsonl(p)


@pytest.mark.parametrize("bad", [
    {"token_ids": [2, 5], "label": 0, "is_ood": False},
    {"token_ids": "2 5", "label": 0, "is_ood": False, "split": "train"},
    {"token_ids": [2, 5], "label": None, "is_ood": False, "split": "train"},
    {"token_ids": [2, 5], "label": 0, "is_ood": False, "split": "dev"},
    {"token_ids": [2, 5, 0, 6], "label": 0, "is_ood": False, "split": "train"},
])
def test_load_rejects_invalid_records(tmp_path, bad):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps(bad) + "\n")
    with pytest.raises(DataError, match="line 1|record 1"):
        load_jsonl(p)


def test_load_preserves_order_and_roundtrips(tmp_path):
    corpus = generate_synthetic(small_cfg(n_train=40, n_val=20, n_test=20, n_test_ood=20))
    src = tmp_path / "src.jsonl"
    write_jsonl(corpus.examples, src)
    loaded = load_jsonl(src)
    assert len(loaded) == 100
    assert loaded.examples == corpus.examples
    out = tmp_path / "out.jsonl"
    write_jsonl(loaded, out)
    norm = lambda p: [json.loads(line) for line in p.read_text().splitlines()]
    assert norm(out) == norm(src)


def test_vocabulary_reserved_ids():
    v = Vocabulary(10)
    assert len(v.reserved) == 3 and max(v.reserved) < v.size
    with pytest.raises(DataError):
        Vocabulary(10, pad=1, mask=1)
    with pytest.raises(DataError):
        Vocabulary(2)


def test_ood_lock_blocks_test_access():
    corpus = generate_synthetic(small_cfg())
    with corpus.ood_locked():
        assert corpus.split("train")
        with pytest.raises(OODAccessError):
            corpus.test_examples()
    assert any(e.is_ood for e in corpus.test_examples())


def test_pad_batch():
    out = pad_batch([[2, 5], [2, 5, 6, 7]])
    assert out.tolist() == [[2, 5, PAD_ID, PAD_ID], [2, 5, 6, 7]]


def test_layout_constants():
    cfg = SynthConfig()
    assert cfg.keyword_pool(0)[0] == NUM_RESERVED
    assert cfg.context_pool()[-1] < cfg.vocab_size
