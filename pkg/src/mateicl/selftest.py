"""Built-in invariant suite behind the ``selftest`` subcommand.

Lighter than the full pytest suite but covers every load-bearing property:
pipeline/full-pass equivalence, the bias schedule and mass law, the
softmax decompositions, dilution, matching-model retrieval, and decoding.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from .attention import (
    MATEICL,
    PCW,
    BiasKind,
    BiasMode,
    apply_atbias,
    bias_value,
    decompose_linear_attention,
    decompose_softmax_attention,
)
from .inference import BeamParams, Model, full_context_pass, generate, run_query, score_labels, windowed_task_logits
from .model import ModelConfig
from .numerics import Rng, stable_softmax
from .windowing import PackedContext, assign_positions


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


def _random_packed(rng: Rng, vocab: int, W: int, win_len: int, task_len: int, N: int) -> PackedContext:
    windows = tuple(
        tuple(int(rng.below(vocab)) for _ in range(win_len)) for _ in range(W)
    )
    task = tuple(int(rng.below(vocab)) for _ in range(task_len))
    return assign_positions(PackedContext(windows=windows, task_tokens=task), N)


def _tiny_model(seed: int) -> Model:
    config = ModelConfig(vocab_size=64, d_model=32, n_heads=2, n_layers=2, max_positions=32)
    return Model.random(config, seed=seed, scale=0.08)


def check_softmax() -> str:
    rng = Rng(11)
    for _ in range(200):
        n = 1 + rng.below(64)
        row = rng.normal(n, 3.0)
        p = stable_softmax(row)
        assert abs(p.sum() - 1.0) < 1e-9
        q = stable_softmax(row + 123.456)
        assert np.max(np.abs(p - q)) < 1e-12
    return "softmax normalization + shift invariance (200 rows)"


def check_rng() -> str:
    a = Rng(987654321).u64(10000)
    b = Rng(987654321).u64(10000)
    assert np.array_equal(a, b)
    return "rng determinism (10k draws)"


def check_schedule() -> str:
    expect = {1: None, 2: 2, 3: 2, 4: 3, 5: 3, 6: 4, 7: 4, 8: 4, 9: 5, 10: 5, 11: 5, 12: 6}
    for W, want in expect.items():
        got = bias_value(MATEICL, W)
        assert got == (None if want is None else float(want)), (W, got, want)
        assert bias_value(PCW, W) is None
    assert bias_value(BiasMode(BiasKind.STRUCTURED), 6) == 6.0
    return "bias schedule table W=1..12"


def check_mass_law() -> str:
    rng = Rng(5)
    for _ in range(2000):
        n = 2 + rng.below(64)
        row = stable_softmax(rng.normal(n, 2.0))
        ts = rng.below(n + 1)
        b = [2.0, 3.0, 5.0][rng.below(3)]
        out = apply_atbias(row, ts, b)
        assert abs(out.sum() - 1.0) < 1e-9
        m = row[ts:].sum()
        assert abs(out[ts:].sum() - b * m / (1 + (b - 1) * m)) < 1e-9
    spot = apply_atbias(np.array([0.4, 0.4, 0.1, 0.1]), 2, 4.0)
    assert abs(spot[2:].sum() - 0.5) < 1e-12
    return "AtBias mass law (2000 rows + spot m=0.2,b=4 -> 0.5)"


def check_oracle_equivalence() -> str:
    rng = Rng(40)
    worst = 0.0
    for trial in range(10):
        model = _tiny_model(100 + trial)
        W = 1 + rng.below(4)
        packed = _random_packed(rng, 64, W, 4 + rng.below(5), 1 + rng.below(6), 32)
        win_logits, _, _ = windowed_task_logits(model, packed, PCW)
        full_logits, _ = full_context_pass(model, packed, PCW)
        worst = max(worst, _rel_err(win_logits, full_logits))
    assert worst < 1e-5, worst
    return f"windowed == full pass on 10 random configs (max rel err {worst:.2e})"


def check_vanilla_reduction() -> str:
    from .model import causal_mask, forward

    rng = Rng(41)
    worst = 0.0
    for trial in range(5):
        model = _tiny_model(200 + trial)
        packed = _random_packed(rng, 64, 1, 6, 4, 32)
        win_logits, _, _ = windowed_task_logits(model, packed, MATEICL)
        ids = list(packed.windows[0]) + list(packed.task_tokens)
        logits, _, _ = forward(
            model.config, model.weights, ids, list(range(len(ids))), causal_mask(len(ids))
        )
        worst = max(worst, _rel_err(win_logits, logits[len(packed.windows[0]) :]))
    assert worst <= 1e-7, worst
    return f"W=1 pipeline == plain causal (max rel err {worst:.2e})"


def check_decompositions() -> str:
    rng = Rng(42)
    for _ in range(200):
        d = 4
        nd, nq = 1 + rng.below(6), 1 + rng.below(6)
        q = rng.normal(d)
        K_d, V_d = rng.normal(nd * d).reshape(nd, d), rng.normal(nd * d).reshape(nd, d)
        K_q, V_q = rng.normal(nq * d).reshape(nq, d), rng.normal(nq * d).reshape(nq, d)
        _, _, _, recon = decompose_softmax_attention(q, K_d, V_d, K_q, V_q)
        K = np.vstack([K_d, K_q])
        V = np.vstack([V_d, V_q])
        full = stable_softmax(K @ q) @ V
        assert np.max(np.abs(recon - full)) < 1e-6
        zsl, icl, total = decompose_linear_attention(q, K_d, V_d, K_q, V_q)
        direct = (K @ q) @ V
        assert _rel_err(total, direct) < 1e-9
    return "softmax + linear attention decompositions (200 instances)"


def check_dilution() -> str:
    rng = Rng(77)
    T, C = 4, 16
    means = []
    for W in (1, 3, 6, 9):
        n = T + W * C
        scores = rng.normal(2000 * n).reshape(2000, n)
        shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights = shifted / shifted.sum(axis=1, keepdims=True)
        mass = weights[:, :T].sum(axis=1)
        se = mass.std() / np.sqrt(len(mass))
        assert abs(mass.mean() - T / n) < 3 * se + 1e-3, (W, mass.mean(), T / n)
        means.append(mass.mean())
    assert all(a > b for a, b in zip(means, means[1:]))
    return "task-mass dilution T/(T+W*C), decreasing in W"


def check_matching_retrieval() -> str:
    model, vocab = Model.matching(3, 2)
    n_checked = 0
    for p in range(3):
        for W in (1, 2, 3):
            demos = [vocab[f"{chr(ord('A') + q)}:{chr(ord('a') + q % 2)}"] for q in range(3)]
            per = (len(demos) + W - 1) // W
            windows = tuple(
                tuple(demos[i : i + per]) for i in range(0, len(demos), per)
            )
            packed = assign_positions(
                PackedContext(windows=windows, task_tokens=(p,)), model.config.max_positions
            )
            from .attention import concat_caches
            from .inference import encode_windows

            cache = concat_caches(encode_windows(model, packed, bias=MATEICL))
            from .tokenizer import TokenSequence

            labels = [TokenSequence([3 + l], chr(ord("a") + l)) for l in range(2)]
            ranked = score_labels(model, cache, [p], labels, MATEICL, W)
            assert ranked[0].token_ids[0] == 3 + p % 2, (p, W)
            n_checked += 1
    return f"matching-model retrieval ({n_checked} query/W combinations)"


def check_beam() -> str:
    from .attention import KVCache

    config = ModelConfig(vocab_size=8, d_model=8, n_heads=2, n_layers=1, max_positions=16)
    rng = Rng(9)
    for trial in range(5):
        model = Model.random(config, seed=300 + trial, scale=0.5)
        prompt = [int(rng.below(8)) for _ in range(3)]
        empty = KVCache.empty(config.n_layers, config.n_heads, config.d_head)
        beam1 = generate(
            model, empty, prompt, BeamParams(beam_width=1, max_new_tokens=4), PCW, 1
        )
        # independent greedy loop: argmax the next token, step by step
        logits, _, cache = run_query(model, empty, prompt, PCW, 1)
        greedy = []
        row = logits[-1]
        for _ in range(4):
            tok = int(np.argmax(row))
            greedy.append(tok)
            step, _, cache = run_query(model, cache, [tok], PCW, 1)
            row = step[-1]
        assert greedy == beam1, (greedy, beam1)
    return "beam width 1 == greedy (5 prompts)"


CHECKS = [
    check_softmax,
    check_rng,
    check_schedule,
    check_mass_law,
    check_oracle_equivalence,
    check_vanilla_reduction,
    check_decompositions,
    check_dilution,
    check_matching_retrieval,
    check_beam,
]


def run(verbose: bool = True) -> int:
    start = time.time()
    passed = 0
    for check in CHECKS:
        try:
            desc = check()
        except AssertionError as exc:
            print(f"FAIL {check.__name__}: {exc}", file=sys.stderr)
            return 1
        passed += 1
        if verbose:
            print(f"ok: {desc}")
    print(f"selftest: {passed} properties checked in {time.time() - start:.1f}s")
    return 0
