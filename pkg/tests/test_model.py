import numpy as np
import pytest

from mateicl.attention import KVCache, MATEICL, PCW
from mateicl.errors import (
    CapacityError,
    DomainError,
    FormatError,
    WeightValidationError,
)
from mateicl.model import (
    Model,
    ModelConfig,
    build_matching_model,
    causal_mask,
    forward,
    load_weights,
    random_model,
    save_weights,
)
from mateicl.numerics import Rng

from conftest import TINY
from reference import WeightView, causal_allowed, max_rel_err, ref_forward

SMALL = ModelConfig(vocab_size=64, d_model=32, n_heads=2, n_layers=2, max_positions=32)


def test_save_load_round_trip(tmp_path, tiny_model):
    path = tmp_path / "model.mtw"
    save_weights(tiny_model.weights, path)
    loaded = load_weights(path, SMALL)
    assert loaded.names() == tiny_model.weights.names()
    for name in loaded.names():
        assert np.array_equal(loaded[name], tiny_model.weights[name])
    # bit-exact file round trip
    path2 = tmp_path / "model2.mtw"
    save_weights(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_truncated_tensor_names_it(tmp_path, tiny_model):
    path = tmp_path / "model.mtw"
    save_weights(tiny_model.weights, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-17])
    with pytest.raises(FormatError) as err:
        load_weights(path, SMALL)
    assert "tok_emb" in str(err.value)  # last tensor in sorted order


def test_load_bad_magic(tmp_path):
    path = tmp_path / "bad.mtw"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_weights(path, SMALL)


def test_load_wrong_position_rows(tmp_path, tiny_model):
    short = ModelConfig(
        vocab_size=64, d_model=32, n_heads=2, n_layers=2, max_positions=31
    )
    path = tmp_path / "model.mtw"
    save_weights(tiny_model.weights, path)
    with pytest.raises(WeightValidationError) as err:
        load_weights(path, short)
    assert "pos_emb" in str(err.value)


def test_weightstore_rejects_missing_and_extra():
    from mateicl.model import WeightStore, _tensor_specs

    tensors = {
        name: np.zeros(shape, dtype=np.float32)
        for name, shape in _tensor_specs(SMALL).items()
    }
    removed = dict(tensors)
    removed.pop("lnf.g")
    with pytest.raises(WeightValidationError):
        WeightStore(SMALL, removed)
    extra = dict(tensors)
    extra["mystery"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(WeightValidationError):
        WeightStore(SMALL, extra)


def test_random_model_deterministic():
    a = random_model(SMALL, seed=11, scale=0.1)
    b = random_model(SMALL, seed=11, scale=0.1)
    for name in a.names():
        assert np.array_equal(a[name], b[name])


def test_random_model_seeds_differ():
    a = random_model(SMALL, seed=1, scale=0.1)
    b = random_model(SMALL, seed=2, scale=0.1)
    total = same = 0
    for name in a.names():
        total += a[name].size
        same += int((a[name] == b[name]).sum())
    assert same / total < 0.01


def test_random_model_scale_limits():
    with pytest.raises(DomainError):
        random_model(SMALL, seed=1, scale=0.0)
    tiny_scale = random_model(SMALL, seed=1, scale=1e-6)
    logits, _, _ = forward(
        SMALL, tiny_scale, [1, 2, 3], [0, 1, 2], causal_mask(3)
    )
    assert np.std(logits) < 1e-3


def test_forward_matches_reference(tiny_model):
    rng = Rng(88)
    ids = [int(rng.below(64)) for _ in range(9)]
    logits, _, _ = forward(
        TINY, tiny_model.weights, ids, list(range(9)), causal_mask(9)
    )
    ref = ref_forward(
        TINY, WeightView(tiny_model.weights), ids, list(range(9)), causal_allowed(9)
    )
    assert max_rel_err(logits, ref) < 1e-9


def test_forward_cache_consistency(tiny_model):
    rng = Rng(4)
    ids = [int(rng.below(64)) for _ in range(10)]
    full, _, _ = forward(TINY, tiny_model.weights, ids, list(range(10)), causal_mask(10))
    cache = KVCache.empty(TINY.n_layers, TINY.n_heads, TINY.d_head)
    rows = []
    for i, tok in enumerate(ids):
        step, cache, _ = forward(
            TINY, tiny_model.weights, [tok], [i], causal_mask(1, i), kv_in=cache
        )
        rows.append(step[0])
    assert max_rel_err(np.asarray(rows), full) < 1e-5


def test_forward_deterministic(tiny_model):
    ids = [5, 9, 13]
    a, _, _ = forward(TINY, tiny_model.weights, ids, [0, 1, 2], causal_mask(3))
    b, _, _ = forward(TINY, tiny_model.weights, ids, [0, 1, 2], causal_mask(3))
    assert np.array_equal(a, b)


def test_forward_bias_gate_at_w1(tiny_model):
    ids = [3, 4, 5, 6]
    args = (TINY, tiny_model.weights, ids, [0, 1, 2, 3], causal_mask(4))
    pcw, _, _ = forward(*args, bias=PCW, W=1)
    mate, _, _ = forward(*args, bias=MATEICL, W=1)
    assert np.array_equal(pcw, mate)


def test_forward_position_and_vocab_errors(tiny_model):
    with pytest.raises(CapacityError):
        forward(TINY, tiny_model.weights, [1], [TINY.max_positions], causal_mask(1))
    with pytest.raises(DomainError):
        forward(TINY, tiny_model.weights, [TINY.vocab_size], [0], causal_mask(1))


def _matching_logits_by_reference(config, weights, context_ids, query_id):
    ids = list(context_ids) + [query_id]
    n = len(ids)
    return ref_forward(
        config, WeightView(weights), ids, list(range(n)), causal_allowed(n)
    )[-1]


def test_matching_model_retrieves_label():
    config, weights, vocab = build_matching_model(2, 2)
    context = [vocab["A:a"], vocab["B:b"]]
    for query, expect in (("A", "a"), ("B", "b")):
        ref = _matching_logits_by_reference(config, weights, context, vocab[query])
        label_ids = [vocab["a"], vocab["b"]]
        assert label_ids[int(np.argmax(ref[label_ids]))] == vocab[expect]
        logits, _, _ = forward(
            config,
            weights,
            context + [vocab[query]],
            [0, 1, 2],
            causal_mask(3),
        )
        assert label_ids[int(np.argmax(logits[-1][label_ids]))] == vocab[expect]
        assert max_rel_err(logits[-1], ref) < 1e-9


def test_matching_model_no_match_near_uniform():
    config, weights, vocab = build_matching_model(3, 2)
    # balanced context, neither demonstration matches query "A"
    context = [vocab["B:a"], vocab["C:b"]]
    ref = _matching_logits_by_reference(config, weights, context, vocab["A"])
    gap = abs(ref[vocab["a"]] - ref[vocab["b"]])
    assert gap < 0.1


def test_matching_model_exhaustive_placements():
    config, weights, vocab = build_matching_model(4, 3)
    label_ids = [vocab[chr(ord("a") + l)] for l in range(3)]
    for p in range(4):
        # filler pattern differs from the query so only one demo matches
        filler_tok = vocab[f"{chr(ord('A') + (p + 1) % 4)}:c"]
        filler = [filler_tok] * 5
        for l in range(3):
            match = vocab[f"{chr(ord('A') + p)}:{chr(ord('a') + l)}"]
            for slot in range(6):
                context = filler[:slot] + [match] + filler[slot:]
                ids = context + [vocab[chr(ord("A") + p)]]
                logits, _, _ = forward(
                    config, weights, ids, list(range(len(ids))), causal_mask(len(ids))
                )
                assert int(np.argmax(logits[-1][label_ids])) == l, (p, l, slot)
