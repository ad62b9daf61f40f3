import numpy as np
import pytest

from mateicl.attention import TASK_SEGMENT
from mateicl.errors import CapacityError, DomainError, PackingError
from mateicl.tokenizer import TokenSequence
from mateicl.windowing import (
    Demonstration,
    PackedContext,
    assign_positions,
    build_mask,
    flat_tokens,
    pack_windows,
    window_capacity,
)


def demo(*ids):
    return Demonstration(TokenSequence(list(ids)))


def test_window_capacity_values():
    assert window_capacity(1024, 24) == 1000
    assert window_capacity(8, 7) == 1
    with pytest.raises(CapacityError):
        window_capacity(8, 8)


def test_pack_greedy_splits_evenly_at_capacity():
    demos = [demo(i, i, i) for i in range(6)]
    packed = pack_windows(demos, capacity=10, W=2, strategy="greedy_fill")
    assert packed.demo_counts == (3, 3)
    assert [len(w) for w in packed.windows] == [9, 9]


def test_pack_single_window_preserves_order():
    demos = [demo(1, 2), demo(3), demo(4, 5)]
    packed = pack_windows(demos, capacity=16, W=1)
    assert packed.windows == ((1, 2, 3, 4, 5),)


def test_pack_item_too_large_names_index():
    demos = [demo(1), demo(*range(11))]
    with pytest.raises(PackingError) as err:
        pack_windows(demos, capacity=10, W=2)
    assert "1" in str(err.value)


def test_pack_overflow():
    demos = [demo(1, 2, 3) for _ in range(8)]
    with pytest.raises(PackingError):
        pack_windows(demos, capacity=3, W=4)


def test_pack_round_robin_deals_cyclically():
    demos = [demo(i) for i in range(6)]
    packed = pack_windows(demos, capacity=4, W=3, strategy="round_robin")
    assert packed.windows == ((0, 3), (1, 4), (2, 5))


def test_pack_empty_window_rejected():
    with pytest.raises(PackingError):
        pack_windows([demo(1)], capacity=4, W=2)


def test_pack_tokens_preserved_exactly_once():
    demos = [demo(10, 11), demo(12), demo(13, 14, 15), demo(16)]
    packed = pack_windows(demos, capacity=6, W=2)
    seen = sorted(t for w in packed.windows for t in w)
    assert seen == [10, 11, 12, 13, 14, 15, 16]


def test_assign_positions_equal_windows():
    packed = PackedContext(
        windows=((1, 2, 3, 4), (5, 6, 7, 8)), task_tokens=(9, 10, 11)
    )
    packed = assign_positions(packed, max_positions=16)
    assert packed.window_positions == ((0, 1, 2, 3), (0, 1, 2, 3))
    assert packed.task_positions == (4, 5, 6)


def test_assign_positions_right_aligns_short_window():
    packed = PackedContext(windows=((1, 2, 3, 4), (5, 6)), task_tokens=(7,))
    packed = assign_positions(packed, max_positions=16)
    assert packed.window_positions == ((0, 1, 2, 3), (2, 3))
    assert packed.task_positions == (4,)


def test_assign_positions_w1_plain_numbering():
    packed = PackedContext(windows=((1, 2, 3),), task_tokens=(4, 5))
    packed = assign_positions(packed, max_positions=8)
    assert packed.window_positions == ((0, 1, 2),)
    assert packed.task_positions == (3, 4)


def test_assign_positions_capacity_error():
    packed = PackedContext(windows=((1, 2, 3),), task_tokens=(4, 5))
    with pytest.raises(CapacityError):
        assign_positions(packed, max_positions=4)


def _packed_2x3():
    packed = PackedContext(windows=((1, 2, 3), (4, 5, 6)), task_tokens=(7, 8))
    return assign_positions(packed, max_positions=16)


def test_mask_blocks_cross_window():
    mask = build_mask(_packed_2x3())
    # query in window 2 (rows 3..5) cannot see window 1 keys (cols 0..2)
    assert not mask.allowed[3:6, 0:3].any()
    assert not mask.allowed[0:3, 3:6].any()


def test_mask_task_sees_entire_context():
    mask = build_mask(_packed_2x3())
    assert mask.allowed[6:, :6].all()


def test_mask_task_causal():
    mask = build_mask(_packed_2x3())
    assert mask.allowed[6, 6] and not mask.allowed[6, 7]
    assert mask.allowed[7, 6] and mask.allowed[7, 7]


def test_mask_no_context_row_sees_task():
    mask = build_mask(_packed_2x3())
    assert not mask.allowed[:6, 6:].any()


def test_mask_self_visibility_every_row():
    mask = build_mask(_packed_2x3())
    assert np.diag(mask.allowed).all()
    assert mask.allowed.sum(axis=1).min() >= 1


def test_mask_window_blocks_causal():
    mask = build_mask(_packed_2x3())
    block = mask.allowed[0:3, 0:3]
    assert np.array_equal(block, np.tril(np.ones((3, 3), dtype=bool)))


def test_mask_key_segments_and_task_start():
    mask = build_mask(_packed_2x3())
    assert list(mask.key_segments) == [0, 0, 0, 1, 1, 1, TASK_SEGMENT, TASK_SEGMENT]
    assert mask.task_key_start == 6


def test_flat_tokens_layout():
    packed = _packed_2x3()
    ids, pos, seg = flat_tokens(packed)
    assert list(ids) == [1, 2, 3, 4, 5, 6, 7, 8]
    assert list(pos) == [0, 1, 2, 0, 1, 2, 3, 4]
    assert list(seg) == [0, 0, 0, 1, 1, 1, TASK_SEGMENT, TASK_SEGMENT]


def test_with_task_resets_positions():
    packed = _packed_2x3()
    replaced = packed.with_task([9])
    assert replaced.task_tokens == (9,)
    assert replaced.window_positions is None and replaced.task_positions is None


def test_demonstration_nonempty():
    with pytest.raises(DomainError):
        Demonstration(TokenSequence([]))
