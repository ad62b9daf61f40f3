"""Masked attention, the AtBias recalibration, and dispersion diagnostics.

Key axes are always ordered [window tokens ..., task tokens]; segment tags
identify which keys belong to which window and which are task keys.  The
recalibration multiplies post-softmax weights of task keys by a scalar b
and renormalizes the row, so a row with pre-bias task mass m ends up with
task mass b*m / (1 + (b-1)*m).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DomainError, ShapeError
from .numerics import masked_softmax

TASK_SEGMENT = -1  # segment tag for task keys; windows use their index >= 0


class BiasKind(Enum):
    PCW = "pcw"
    MATEICL = "mateicl"
    STRUCTURED = "structured"
    FIXED = "fixed"


@dataclass(frozen=True)
class BiasMode:
    """Attention recalibration policy.

    PCW applies no bias.  MateICL uses the window-count schedule
    (2 for W in {2,3}, floor(W/3)+2 beyond, off at W=1).  Structured uses
    b = W, the baseline that scales task attention by the window count.
    Fixed uses a constant b >= 1.  All modes are off at W = 1.
    """

    kind: BiasKind
    fixed_b: float | None = None

    def __post_init__(self):
        if self.kind is BiasKind.FIXED:
            if self.fixed_b is None or self.fixed_b < 1.0:
                raise DomainError("Fixed bias requires fixed_b >= 1")
        elif self.fixed_b is not None:
            raise DomainError(f"{self.kind.value} bias does not take fixed_b")

    @classmethod
    def parse(cls, text: str) -> "BiasMode":
        """Parse 'pcw' | 'mateicl' | 'structured' | 'fixed:<b>'."""
        low = text.strip().lower()
        if low.startswith("fixed:"):
            return cls(BiasKind.FIXED, float(low.split(":", 1)[1]))
        try:
            return cls(BiasKind(low))
        except ValueError:
            raise DomainError(f"unknown bias mode {text!r}") from None

    def __str__(self) -> str:
        if self.kind is BiasKind.FIXED:
            return f"fixed:{self.fixed_b:g}"
        return self.kind.value


PCW = BiasMode(BiasKind.PCW)
MATEICL = BiasMode(BiasKind.MATEICL)
STRUCTURED = BiasMode(BiasKind.STRUCTURED)


def bias_value(mode: BiasMode, W: int) -> float | None:
    """Bias factor for W parallel windows, or None when the bias is off."""
    if W < 1:
        raise DomainError("window count must be >= 1")
    if W == 1 or mode.kind is BiasKind.PCW:
        return None
    if mode.kind is BiasKind.MATEICL:
        return float(W // 3 + 2) if W > 3 else 2.0
    if mode.kind is BiasKind.STRUCTURED:
        return float(W)
    return float(mode.fixed_b)


def apply_atbias(row: np.ndarray, task_start: int, b: float) -> np.ndarray:
    """Recalibrate one post-softmax weight row.

    Weights at key index >= task_start are multiplied by b, then the row is
    renormalized.  b = 1 is the identity.
    """
    row = np.asarray(row, dtype=np.float64)
    if b < 1.0:
        raise DomainError("bias factor b must be >= 1")
    if not 0 <= task_start <= row.size:
        raise DomainError(f"task_start {task_start} outside row of length {row.size}")
    if abs(row.sum() - 1.0) > 1e-6:
        raise DomainError("apply_atbias expects a normalized weight row")
    if b == 1.0:
        return row.copy()
    out = row.copy()
    out[task_start:] *= b
    return out / out.sum()


def bias_rows(weights: np.ndarray, task_start: int, b: float) -> np.ndarray:
    """apply_atbias over a (n_rows, n_keys) weight matrix."""
    if b < 1.0:
        raise DomainError("bias factor b must be >= 1")
    out = np.array(weights, dtype=np.float64)
    out[:, task_start:] *= b
    return out / out.sum(axis=1, keepdims=True)


def attend(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    mask: np.ndarray,
    scale: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Masked scaled-dot-product attention for a single head.

    queries: (n_q, d), keys/values: (n_k, d), mask: (n_q, n_k) boolean
    (True = may attend).  Returns (outputs (n_q, d), weights (n_q, n_k)).
    A fully masked query row is a caller bug and raises DomainError.
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if queries.shape[1] != keys.shape[1]:
        raise ShapeError(f"query dim {queries.shape[1]} != key dim {keys.shape[1]}")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError("keys and values disagree on key count")
    if mask.shape != (queries.shape[0], keys.shape[0]):
        raise ShapeError(f"mask shape {mask.shape} does not match (n_q, n_k)")
    scores = queries @ keys.T * scale
    scores = np.where(mask, scores, -np.inf)
    weights = np.empty_like(scores)
    for r in range(scores.shape[0]):
        weights[r], degenerate = masked_softmax(scores[r])
        if degenerate:
            raise DomainError(f"query row {r} has no visible keys")
    return weights @ values, weights


def task_mass(row: np.ndarray, task_start: int) -> float:
    """Total weight a row places on task keys (index >= task_start)."""
    row = np.asarray(row, dtype=np.float64)
    if abs(row.sum() - 1.0) > 1e-6:
        raise DomainError("task_mass expects a normalized weight row")
    return float(row[task_start:].sum())


def compute_nu(scores_on_demo_keys: np.ndarray, scores_on_query_keys: np.ndarray) -> float:
    """Fraction of softmax mass falling on demonstration keys.

    nu = sum_i exp(s_d_i) / (sum_i exp(s_d_i) + sum_j exp(s_q_j)), computed
    with a shared max subtraction so large scores cannot overflow.
    """
    sd = np.asarray(scores_on_demo_keys, dtype=np.float64)
    sq = np.asarray(scores_on_query_keys, dtype=np.float64)
    if sd.size + sq.size == 0:
        raise DomainError("nu needs at least one key")
    hi = max(sd.max() if sd.size else -np.inf, sq.max() if sq.size else -np.inf)
    num = np.exp(sd - hi).sum() if sd.size else 0.0
    den = num + (np.exp(sq - hi).sum() if sq.size else 0.0)
    return float(num / den)


def decompose_softmax_attention(
    query: np.ndarray,
    K_d: np.ndarray,
    V_d: np.ndarray,
    K_q: np.ndarray,
    V_q: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Split one attention row into query-segment and demo-segment parts.

    Returns (query_part, demo_part, nu, reconstruction) where
    reconstruction = (1 - nu) * query_part + nu * demo_part equals attention
    over the concatenated segments.
    """
    query = np.asarray(query, dtype=np.float64)
    for name, seg in (("demonstration", K_d), ("query", K_q)):
        if np.asarray(seg).shape[0] == 0:
            raise DomainError(f"{name} segment is empty; decomposition undefined")
    K_d = np.asarray(K_d, dtype=np.float64)
    V_d = np.asarray(V_d, dtype=np.float64)
    K_q = np.asarray(K_q, dtype=np.float64)
    V_q = np.asarray(V_q, dtype=np.float64)
    s_d = K_d @ query
    s_q = K_q @ query
    nu = compute_nu(s_d, s_q)
    demo_part, _ = attend(query[None, :], K_d, V_d, np.ones((1, K_d.shape[0]), bool), 1.0)
    query_part, _ = attend(query[None, :], K_q, V_q, np.ones((1, K_q.shape[0]), bool), 1.0)
    demo_part = demo_part[0]
    query_part = query_part[0]
    reconstruction = (1.0 - nu) * query_part + nu * demo_part
    return query_part, demo_part, nu, reconstruction


def decompose_linear_attention(
    query: np.ndarray,
    K_d: np.ndarray,
    V_d: np.ndarray,
    K_q: np.ndarray,
    V_q: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Softmax-free split: linear attention is additive over key segments.

    zsl_part = q K_q^T V_q (query keys only), icl_part = q K_d^T V_d
    (demonstration keys only); their sum equals linear attention over the
    concatenation.  Empty segments contribute zero.
    """
    query = np.asarray(query, dtype=np.float64)
    d = query.shape[0]

    def part(K, V):
        K = np.asarray(K, dtype=np.float64).reshape(-1, d)
        V = np.asarray(V, dtype=np.float64).reshape(K.shape[0], -1)
        if K.shape[0] == 0:
            return np.zeros(V.shape[1] if V.size else d)
        return (K @ query) @ V

    zsl_part = part(K_q, V_q)
    icl_part = part(K_d, V_d)
    return zsl_part, icl_part, zsl_part + icl_part


@dataclass
class HeadTrace:
    """Captured attention rows for one (layer, head) in one forward call."""

    layer: int
    head: int
    rows_pre: np.ndarray   # (n_new, n_keys) post-softmax, pre-bias
    rows_post: np.ndarray  # (n_new, n_keys) after AtBias (== rows_pre if off)
    nu: np.ndarray         # (n_new,) pre-bias mass on window-tagged keys
    task_mass_pre: np.ndarray
    task_mass_post: np.ndarray


@dataclass
class AttentionTrace:
    key_segments: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    heads: list[HeadTrace] = field(default_factory=list)

    def head(self, layer: int, head: int) -> HeadTrace:
        for h in self.heads:
            if h.layer == layer and h.head == head:
                return h
        raise KeyError(f"no trace for layer {layer}, head {head}")


@dataclass
class KVCache:
    """Per-layer keys/values plus shared position ids and segment tags.

    layers[i] = (K, V) with shape (n_keys, n_heads, d_head).  Window-tagged
    entries always precede task-tagged entries on the key axis.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    positions: np.ndarray
    segments: np.ndarray

    @classmethod
    def empty(cls, n_layers: int, n_heads: int, d_head: int) -> "KVCache":
        z = np.zeros((0, n_heads, d_head))
        return cls(
            layers=[(z, z) for _ in range(n_layers)],
            positions=np.empty(0, dtype=np.int64),
            segments=np.empty(0, dtype=np.int64),
        )

    @property
    def n_keys(self) -> int:
        return len(self.positions)

    @property
    def task_start(self) -> int:
        """Index of the first task-tagged key (== n_keys when there is none)."""
        task = np.flatnonzero(self.segments == TASK_SEGMENT)
        if task.size == 0:
            return self.n_keys
        start = int(task[0])
        if np.any(self.segments[start:] != TASK_SEGMENT):
            raise DomainError("task keys must be contiguous at the end of the cache")
        return start

    def validate(self) -> None:
        n = self.n_keys
        if len(self.segments) != n:
            raise ShapeError("segment tags do not match key count")
        for i, (k, v) in enumerate(self.layers):
            if k.shape[0] != n or v.shape[0] != n:
                raise ShapeError(f"layer {i} holds {k.shape[0]} keys, metadata says {n}")
            if k.shape != v.shape:
                raise ShapeError(f"layer {i} keys/values shapes differ")
        self.task_start  # raises if task tags are not a suffix

    def extended(
        self, new_kv: list[tuple[np.ndarray, np.ndarray]], positions: np.ndarray, segments: np.ndarray
    ) -> "KVCache":
        """A new cache with the given entries appended; self is untouched."""
        layers = [
            (np.concatenate([k, nk], axis=0), np.concatenate([v, nv], axis=0))
            for (k, v), (nk, nv) in zip(self.layers, new_kv)
        ]
        return KVCache(
            layers=layers,
            positions=np.concatenate([self.positions, np.asarray(positions, dtype=np.int64)]),
            segments=np.concatenate([self.segments, np.asarray(segments, dtype=np.int64)]),
        )


def concat_caches(caches: list[KVCache]) -> KVCache:
    """Concatenate caches along the key axis, preserving order and tags."""
    if not caches:
        raise DomainError("need at least one cache")
    geometry = {tuple(k.shape[1:]) for c in caches for k, _ in c.layers}
    depths = {len(c.layers) for c in caches}
    if len(depths) != 1 or len(geometry) != 1:
        raise ShapeError(f"cache geometries differ: layers={depths}, heads={geometry}")
    n_layers = depths.pop()
    layers = [
        (
            np.concatenate([c.layers[i][0] for c in caches], axis=0),
            np.concatenate([c.layers[i][1] for c in caches], axis=0),
        )
        for i in range(n_layers)
    ]
    out = KVCache(
        layers=layers,
        positions=np.concatenate([c.positions for c in caches]),
        segments=np.concatenate([c.segments for c in caches]),
    )
    out.validate()
    return out
