"""Pipeline orchestration: encode windows, query with bias, score, decode.

The windowed path (encode_windows -> concat_caches -> run_query) must equal
one full forward pass over the concatenated sequence with the composite
block mask and remapped positions; that equivalence is the engine's core
correctness property and is what the self-test and acceptance suite check.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import TASK_SEGMENT, AttentionTrace, BiasMode, KVCache, PCW, concat_caches
from .errors import DomainError
from .model import Model, causal_mask, forward
from .tokenizer import TokenSequence
from .windowing import PackedContext, build_mask, flat_tokens


def encode_windows(
    model: Model, packed: PackedContext, bias: BiasMode = PCW, threads: int = 1
) -> list[KVCache]:
    """Encode each window independently under its own causal mask.

    Window tokens never see task keys, so the bias hook is a no-op here
    regardless of mode; passing the mode through keeps one code path.
    Encoding is pure, so concurrent and sequential schedules produce
    identical caches.
    """
    if packed.window_positions is None:
        raise DomainError("assign positions before encoding")

    def encode(w: int) -> KVCache:
        tokens = list(packed.windows[w])
        _, cache, _ = forward(
            model.config,
            model.weights,
            tokens,
            list(packed.window_positions[w]),
            causal_mask(len(tokens)),
            segments=w,
            bias=bias,
            W=packed.W,
        )
        return cache

    if threads > 1 and packed.W > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(encode, range(packed.W)))
    return [encode(w) for w in range(packed.W)]


def run_query(
    model: Model,
    cache: KVCache,
    task_tokens: list[int],
    bias: BiasMode,
    W: int,
    collect_traces: bool = False,
) -> tuple[np.ndarray, AttentionTrace | None, KVCache]:
    """Task pass: new tokens see every cached key plus earlier task tokens.

    Task positions continue right after the highest cached position, and the
    new keys are task-tagged so the bias also covers generated tokens.
    """
    n_cached = cache.n_keys
    start = int(cache.positions.max()) + 1 if n_cached else 0
    positions = list(range(start, start + len(task_tokens)))
    logits, kv_out, trace = forward(
        model.config,
        model.weights,
        task_tokens,
        positions,
        causal_mask(len(task_tokens), n_cached),
        kv_in=cache,
        segments=TASK_SEGMENT,
        bias=bias,
        W=W,
        collect_traces=collect_traces,
    )
    return logits, trace, kv_out


def full_context_pass(
    model: Model, packed: PackedContext, bias: BiasMode, collect_traces: bool = False
) -> tuple[np.ndarray, AttentionTrace | None]:
    """Reference path: one forward over [windows..., task] with the composite
    mask and remapped positions.  Returns logits for the task rows only."""
    ids, positions, segments = flat_tokens(packed)
    mask = build_mask(packed)
    logits, _, trace = forward(
        model.config,
        model.weights,
        ids,
        positions,
        mask.allowed,
        segments=segments,
        bias=bias,
        W=packed.W,
        collect_traces=collect_traces,
    )
    return logits[mask.task_key_start :], trace


def windowed_task_logits(
    model: Model,
    packed: PackedContext,
    bias: BiasMode,
    collect_traces: bool = False,
    threads: int = 1,
) -> tuple[np.ndarray, AttentionTrace | None, KVCache]:
    """encode_windows -> concat_caches -> run_query, returning task logits."""
    caches = encode_windows(model, packed, bias=bias, threads=threads)
    cache = concat_caches(caches)
    return run_query(
        model, cache, list(packed.task_tokens), bias, packed.W, collect_traces=collect_traces
    )


def log_softmax(row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    m = row.max()
    shifted = row - m
    return shifted - np.log(np.exp(shifted).sum())


@dataclass(frozen=True)
class ScoredLabel:
    label: str | None
    token_ids: tuple[int, ...]
    total_logprob: float
    normalized_logprob: float


def _continuation_logprob(
    model: Model, cache: KVCache, first_row: np.ndarray, tokens: list[int], bias: BiasMode, W: int
) -> float:
    """Sum of conditional log-probs of ``tokens`` given cache + first_row."""
    total = float(log_softmax(first_row)[tokens[0]])
    if len(tokens) > 1:
        logits, _, _ = run_query(model, cache, tokens[:-1], bias, W)
        for i, tok in enumerate(tokens[1:]):
            total += float(log_softmax(logits[i])[tok])
    return total


def score_labels(
    model: Model,
    cache: KVCache,
    query_tokens: list[int],
    labels: list[TokenSequence],
    bias: BiasMode,
    W: int,
) -> list[ScoredLabel]:
    """Teacher-forced log-likelihood ranking of candidate labels.

    Returns labels sorted by total log-probability, descending; ties keep
    the input order.
    """
    if not labels:
        raise DomainError("need at least one candidate label")
    for lab in labels:
        if len(lab) == 0:
            raise DomainError("labels must be nonempty token sequences")
    logits, _, cache_q = run_query(model, cache, query_tokens, bias, W)
    scored = []
    for lab in labels:
        total = _continuation_logprob(model, cache_q, logits[-1], lab.ids, bias, W)
        scored.append(
            ScoredLabel(
                label=lab.text,
                token_ids=tuple(lab.ids),
                total_logprob=total,
                normalized_logprob=total / len(lab.ids),
            )
        )
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].total_logprob, i))
    return [scored[i] for i in order]


def score_choice(
    model: Model,
    cache: KVCache,
    query_tokens: list[int],
    choice_tokens: list[int],
    bias: BiasMode,
    W: int,
    normalize: bool = False,
) -> float:
    """Log-probability of one continuation after the query (optionally
    divided by its token count)."""
    if not choice_tokens:
        raise DomainError("choice must be nonempty")
    logits, _, cache_q = run_query(model, cache, query_tokens, bias, W)
    total = _continuation_logprob(model, cache_q, logits[-1], list(choice_tokens), bias, W)
    return total / len(choice_tokens) if normalize else total


@dataclass(frozen=True)
class BeamParams:
    """Beam-search settings: score = sum-logprob / ((5 + len) / 6) ** alpha."""

    beam_width: int = 4
    length_penalty: float = 0.6
    max_new_tokens: int = 16
    stop_tokens: tuple[int, ...] = ()

    def __post_init__(self):
        if self.beam_width < 1 or self.length_penalty < 0 or self.max_new_tokens < 1:
            raise DomainError("beam_width >= 1, length_penalty >= 0, max_new_tokens >= 1")

    def lp(self, length: int) -> float:
        return ((5.0 + length) / 6.0) ** self.length_penalty


@dataclass
class _Beam:
    tokens: list[int]
    total: float
    cache: KVCache
    last_logits: np.ndarray


def generate(
    model: Model,
    cache: KVCache,
    prompt_tokens: list[int],
    params: BeamParams,
    bias: BiasMode,
    W: int,
) -> list[int]:
    """Beam-search decode; returns the generated tokens (stop token, if hit,
    is scored and length-counted but not returned).

    Generated tokens are task-tagged, so the bias keeps boosting attention
    to the prompt and to earlier generated tokens.  beam_width = 1 is
    exactly greedy decoding.
    """
    logits, _, cache0 = run_query(model, cache, list(prompt_tokens), bias, W)
    live = [_Beam([], 0.0, cache0, logits[-1])]
    finished: list[tuple[float, int, list[int]]] = []  # (score, arrival, tokens)
    arrival = 0
    for _ in range(params.max_new_tokens):
        candidates: list[tuple[float, int, int]] = []  # (new_total, beam_idx, token)
        for bi, beam in enumerate(live):
            logp = log_softmax(beam.last_logits)
            top = np.argsort(-logp, kind="stable")[: params.beam_width]
            for tok in top:
                candidates.append((beam.total + float(logp[tok]), bi, int(tok)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live: list[_Beam] = []
        for new_total, bi, tok in candidates:
            if len(next_live) == params.beam_width:
                break
            parent = live[bi]
            new_tokens = parent.tokens + [tok]
            if tok in params.stop_tokens:
                finished.append(
                    (new_total / params.lp(len(new_tokens)), arrival, new_tokens[:-1])
                )
                arrival += 1
                continue
            step_logits, _, step_cache = run_query(model, parent.cache, [tok], bias, W)
            next_live.append(_Beam(new_tokens, new_total, step_cache, step_logits[-1]))
        live = next_live
        if not live:
            break
    for beam in live:
        finished.append((beam.total / params.lp(len(beam.tokens)), arrival, beam.tokens))
        arrival += 1
    if not finished:
        return []
    finished.sort(key=lambda f: (-f[0], f[1]))
    return finished[0][2]
