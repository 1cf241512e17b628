"""Knowledge base: construction, retrieval semantics, persistence."""

import numpy as np
import pytest

from procap import memory as M
from procap.config import ModelConfig
from procap.decoder import Vocabulary
from procap.errors import DimensionMismatch, EmptyKnowledgeBase, EmptyRefs, NormViolation
from procap.model import ProCapModel

from oracles import topk_retrieval_oracle


def _kb_from_keys(keys, names):
    entries = [(np.asarray(k, dtype=np.float32), n) for k, n in zip(keys, names)]
    return M.KnowledgeBase(len(keys[0]), entries)


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def test_retrieve_exact_key_match_scores_one():
    d = 8
    keys = np.eye(d)[:4]
    kb = _kb_from_keys(keys, ["a", "b", "c", "d"])
    q_rows = np.tile(keys[2], (3, 1))  # mean = key_2, unit norm
    ctx = M.retrieve(q_rows, kb, k=2)
    assert ctx.names[0] == "c"
    assert ctx.scores[0] == pytest.approx(1.0, abs=1e-12)
    assert ctx.indices[0] == 2


def test_retrieve_pads_to_k_with_nulls():
    rng = np.random.default_rng(0)
    kb = _kb_from_keys([_unit(rng, 6) for _ in range(5)], list("abcde"))
    ctx = M.retrieve(rng.standard_normal((4, 6)), kb, k=9)
    assert len(ctx.names) == len(ctx.scores) == 9
    assert ctx.names[5:] == [""] * 4
    assert ctx.scores[5:] == [-1.0] * 4
    assert sorted(ctx.names[:5]) == list("abcde")
    assert all(a >= b for a, b in zip(ctx.scores, ctx.scores[1:]))


def test_retrieve_dedups_names_keeping_best():
    d = 4
    k0 = np.array([1.0, 0, 0, 0])
    k1 = np.array([0.8, 0.6, 0, 0])
    k2 = np.array([0, 1.0, 0, 0])
    kb = _kb_from_keys([k0, k1, k2], ["dog", "dog", "cat"])
    ctx = M.retrieve(np.tile(k0, (2, 1)), kb, k=3)
    assert ctx.names == ["dog", "cat", ""]
    assert ctx.indices[0] == 0  # the higher-scoring of the two "dog" keys


def test_retrieve_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for trial in range(300):
        d = int(rng.integers(4, 17))
        n = int(rng.integers(1, 20))
        k = int(rng.choice([1, 3, 9]))
        keys = [_unit(rng, d) for _ in range(n)]
        names = [f"n{int(rng.integers(0, max(2, n // 2)))}" for _ in range(n)]
        kb = _kb_from_keys(keys, names)
        q = rng.standard_normal((int(rng.integers(1, 6)), d))
        ctx = M.retrieve(q, kb, k=k)
        keys64 = [np.asarray(kk, dtype=np.float64) for kk, _ in kb.entries]
        want_names, want_scores, want_idx = topk_retrieval_oracle(q, keys64, names, k)
        assert ctx.names == want_names, f"trial {trial}"
        assert ctx.indices == want_idx, f"trial {trial}"
        assert np.allclose(ctx.scores, want_scores, atol=1e-12)


def test_retrieve_scale_invariance():
    rng = np.random.default_rng(2)
    kb = _kb_from_keys([_unit(rng, 8) for _ in range(12)], [f"x{i}" for i in range(12)])
    q = rng.standard_normal((4, 8))
    base = M.retrieve(q, kb, k=5).names
    for c in (1e-3, 0.7, 42.0):
        assert M.retrieve(c * q, kb, k=5).names == base


def test_retrieve_errors():
    rng = np.random.default_rng(3)
    kb = M.KnowledgeBase(8, [])
    with pytest.raises(EmptyKnowledgeBase):
        M.retrieve(rng.standard_normal((2, 8)), kb, k=3)
    kb2 = _kb_from_keys([_unit(rng, 8)], ["a"])
    with pytest.raises(DimensionMismatch):
        M.retrieve(rng.standard_normal((2, 5)), kb2, k=3)


def test_all_null_kb_returns_null_names():
    rng = np.random.default_rng(4)
    kb = _kb_from_keys([_unit(rng, 8) for _ in range(6)], [""] * 6)
    ctx = M.retrieve(rng.standard_normal((3, 8)), kb, k=9)
    assert ctx.names == [""] * 9
    assert len(ctx.scores) == 9


def _tiny_model():
    vocab = Vocabulary.from_corpus(["a red disk", "a blue ring"])
    cfg = ModelConfig(patch_size=8, encoder_dim=16, refined_channels=8, seg_hidden=4,
                      query_dim=16, dec_dim=16, qformer_layers=1, dec_layers=1,
                      qformer_heads=2, dec_heads=2)
    return ProCapModel(cfg, vocab, seed=0)


def test_build_kb_counts_and_unit_norms():
    model = _tiny_model()
    rng = np.random.default_rng(5)
    refs = [(rng.uniform(0, 1, (16, 16, 3)), f"obj{i}") for i in range(10)]
    kb = M.build_kb(model, refs)
    assert len(kb.entries) == 10
    assert kb.names() == [f"obj{i}" for i in range(10)]
    for key, _ in kb.entries:
        assert abs(np.linalg.norm(key.astype(np.float64)) - 1.0) < 1e-6


def test_build_kb_duplicate_images_distinct_names_kept():
    model = _tiny_model()
    img = np.random.default_rng(6).uniform(0, 1, (16, 16, 3))
    kb = M.build_kb(model, [(img, "first"), (img, "second")])
    assert len(kb.entries) == 2
    assert np.array_equal(kb.entries[0][0], kb.entries[1][0])
    ctx = M.retrieve(np.random.default_rng(7).standard_normal((2, kb.dim)), kb, k=2)
    assert set(ctx.names) == {"first", "second"}  # dedup is by name, not image


def test_build_kb_empty_refs():
    with pytest.raises(EmptyRefs):
        M.build_kb(_tiny_model(), [])


def test_kb_roundtrip_is_lossless_at_float32(tmp_path):
    rng = np.random.default_rng(8)
    kb = _kb_from_keys([_unit(rng, 12) for _ in range(7)], [f"name{i}" for i in range(7)])
    path = tmp_path / "kb.json"
    M.save_kb(kb, path, config_snapshot={"seed": 3})
    back = M.load_kb(path)
    assert back.dim == kb.dim
    assert back.names() == kb.names()
    for (k1, _), (k2, _) in zip(kb.entries, back.entries):
        assert np.array_equal(k1, k2)


def test_load_kb_rejects_non_unit_key(tmp_path):
    path = tmp_path / "kb.json"
    doc = {"dim": 3, "entries": [{"name": "bad", "key": [1.0, 1.0, 0.0]}]}
    import json
    path.write_text(json.dumps(doc))
    with pytest.raises(NormViolation):
        M.load_kb(path)


def test_empty_kb_file_loads_but_fails_on_retrieve(tmp_path):
    path = tmp_path / "kb.json"
    M.save_kb(M.KnowledgeBase(4, []), path)
    kb = M.load_kb(path)
    with pytest.raises(EmptyKnowledgeBase):
        M.retrieve(np.zeros((2, 4)), kb, k=1)
