"""Parallel context windows: packing, position remapping, block masks.

Demonstrations are split across W windows that are encoded independently;
every window reuses the same position range (right-aligned so each window
ends at position C_star - 1), and the task tokens sit at positions
C_star .. C_star + T - 1, adjacent to every window.  Context tokens may
only attend within their own window; task tokens attend to the entire
context plus earlier task tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import TASK_SEGMENT
from .errors import CapacityError, DomainError, PackingError
from .tokenizer import TokenSequence


@dataclass(frozen=True)
class Demonstration:
    """One fully rendered example (prompt plus label), already tokenized."""

    tokens: TokenSequence

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise DomainError("empty demonstration")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class PackedContext:
    """Demonstrations distributed over W windows, plus the task tokens."""

    windows: tuple[tuple[int, ...], ...]
    task_tokens: tuple[int, ...] = ()
    window_positions: tuple[tuple[int, ...], ...] | None = None
    task_positions: tuple[int, ...] | None = None
    demo_counts: tuple[int, ...] = ()

    @property
    def W(self) -> int:
        return len(self.windows)

    @property
    def C_star(self) -> int:
        return max(len(w) for w in self.windows)

    @property
    def T(self) -> int:
        return len(self.task_tokens)

    @property
    def n_context_tokens(self) -> int:
        return sum(len(w) for w in self.windows)

    def with_task(self, task_tokens: list[int]) -> "PackedContext":
        """Attach (or replace) the task tokens; positions must be reassigned."""
        return replace(
            self,
            task_tokens=tuple(task_tokens),
            window_positions=None,
            task_positions=None,
        )


def window_capacity(N: int, task_reserve: int) -> int:
    """Per-window token budget C = N - task_reserve."""
    if task_reserve >= N:
        raise CapacityError(f"task reserve {task_reserve} leaves no context (capacity {N})")
    if task_reserve < 0:
        raise DomainError("task reserve must be non-negative")
    return N - task_reserve


def pack_windows(
    demos: list[Demonstration],
    capacity: int,
    W: int,
    strategy: str = "greedy_fill",
    rng=None,
) -> PackedContext:
    """Assign each demonstration to exactly one of W windows.

    greedy_fill packs windows to capacity in input order; round_robin deals
    demonstrations cyclically (demo i -> window i mod W).  Token order
    inside a window follows input order either way.  ``rng`` is accepted
    for signature compatibility with samplers; both strategies are
    deterministic and ignore it.
    """
    if W < 1:
        raise DomainError("need at least one window")
    if strategy not in ("greedy_fill", "round_robin"):
        raise DomainError(f"unknown packing strategy {strategy!r}")
    for i, demo in enumerate(demos):
        if len(demo) > capacity:
            raise PackingError(
                f"demonstration {i} has {len(demo)} tokens, exceeding window capacity {capacity}"
            )
    assignment: list[list[Demonstration]] = [[] for _ in range(W)]
    if strategy == "round_robin":
        fill = [0] * W
        for i, demo in enumerate(demos):
            w = i % W
            if fill[w] + len(demo) > capacity:
                raise PackingError(
                    f"window {w} overflows capacity {capacity} at demonstration {i}"
                )
            assignment[w].append(demo)
            fill[w] += len(demo)
    else:
        w = 0
        fill = 0
        for i, demo in enumerate(demos):
            while fill + len(demo) > capacity:
                w += 1
                fill = 0
                if w >= W:
                    raise PackingError(
                        f"demonstrations do not fit in {W} windows of capacity {capacity}"
                    )
            assignment[w].append(demo)
            fill += len(demo)
    for w, bucket in enumerate(assignment):
        if not bucket:
            raise PackingError(f"window {w} would be empty; reduce W or add demonstrations")
    windows = tuple(
        tuple(tid for demo in bucket for tid in demo.tokens.ids) for bucket in assignment
    )
    return PackedContext(windows=windows, demo_counts=tuple(len(b) for b in assignment))


def assign_positions(packed: PackedContext, max_positions: int) -> PackedContext:
    """Fill in remapped position ids (zero-based).

    Window w of length len_w is right-aligned to [C_star - len_w, C_star);
    equal-length windows therefore share one position range.  Task tokens
    occupy [C_star, C_star + T).
    """
    c_star = packed.C_star
    if c_star + packed.T > max_positions:
        raise CapacityError(
            f"window span {c_star} + task {packed.T} exceeds capacity {max_positions}"
        )
    window_positions = tuple(
        tuple(range(c_star - len(w), c_star)) for w in packed.windows
    )
    task_positions = tuple(range(c_star, c_star + packed.T))
    return replace(packed, window_positions=window_positions, task_positions=task_positions)


@dataclass(frozen=True)
class AttentionMask:
    """Boolean visibility over the concatenated [windows..., task] key axis."""

    allowed: np.ndarray
    key_segments: np.ndarray
    task_key_start: int


def build_mask(packed: PackedContext) -> AttentionMask:
    """Composite mask: causal blocks per window, full-context task stripe."""
    if packed.window_positions is None:
        raise DomainError("assign positions before building the mask")
    sizes = [len(w) for w in packed.windows]
    n_ctx = sum(sizes)
    n = n_ctx + packed.T
    segments = np.empty(n, dtype=np.int64)
    off = 0
    for w, size in enumerate(sizes):
        segments[off : off + size] = w
        off += size
    segments[n_ctx:] = TASK_SEGMENT

    allowed = np.zeros((n, n), dtype=bool)
    off = 0
    for size in sizes:
        allowed[off : off + size, off : off + size] = np.tril(np.ones((size, size), bool))
        off += size
    allowed[n_ctx:, :n_ctx] = True
    allowed[n_ctx:, n_ctx:] = np.tril(np.ones((packed.T, packed.T), bool))
    return AttentionMask(allowed=allowed, key_segments=segments, task_key_start=n_ctx)


def flat_tokens(packed: PackedContext) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenated (token_ids, position_ids, segments) in mask order."""
    if packed.window_positions is None or packed.task_positions is None:
        raise DomainError("assign positions first")
    ids: list[int] = []
    pos: list[int] = []
    seg: list[int] = []
    for w, (window, positions) in enumerate(zip(packed.windows, packed.window_positions)):
        ids.extend(window)
        pos.extend(positions)
        seg.extend([w] * len(window))
    ids.extend(packed.task_tokens)
    pos.extend(packed.task_positions)
    seg.extend([TASK_SEGMENT] * packed.T)
    return (
        np.asarray(ids, dtype=np.int64),
        np.asarray(pos, dtype=np.int64),
        np.asarray(seg, dtype=np.int64),
    )
