from fractions import Fraction

import numpy as np
import pytest

from vecperm.core import LayoutError, PermutationMap, TensorLayout, naive_permute
from vecperm.machine import MachineConfig
from vecperm.planner import (
    decompose_pow2,
    enumerate_blocks,
    format_plan,
    merge_dimensions,
    select_block,
)


def bijection_equal(lay1, pm1, lay2, pm2, rng):
    """The two (layout, map) pairs move every element identically."""
    assert lay1.num_elements == lay2.num_elements
    data = rng.integers(0, 2**32 - 1, size=lay1.num_elements, dtype=np.uint32)
    return np.array_equal(naive_permute(data, lay1, pm1), naive_permute(data, lay2, pm2))


class TestMerge:
    def test_trailing_3_5(self):
        # d0=3, d1=5 kept adjacent and ordered by the map: fuse into 15
        lay = TensorLayout((3, 5, 7))
        pm = PermutationMap((2, 0, 1))  # dest order: d2, then the (d1 d0) pair
        ml, mp = merge_dimensions(lay, pm)
        assert ml.dims == (15, 7)
        assert mp.sigma == (1, 0)

    def test_9_8_gives_72(self):
        # d0=9, d1=8 adjacency preserved: merged dim 72, divisible by 8
        lay = TensorLayout((9, 8, 4))
        pm = PermutationMap((2, 0, 1))
        ml, mp = merge_dimensions(lay, pm)
        assert ml.dims == (72, 4)
        assert ml.dims[0] % 8 == 0

    def test_identity_collapses_to_rank1(self):
        lay = TensorLayout((3, 4, 5))
        ml, mp = merge_dimensions(lay, PermutationMap((0, 1, 2)))
        assert ml.dims == (60,)
        assert mp.sigma == (0,)

    def test_size1_dims_do_not_block_merging(self):
        lay = TensorLayout((3, 1, 5, 2))
        pm = PermutationMap((3, 0, 1, 2))  # d3 innermost in dest; (d0 1 d2) run kept
        ml, mp = merge_dimensions(lay, pm)
        assert ml.dims == (15, 2)

    def test_bijection_preserved_random(self):
        rng = np.random.default_rng(10)
        for _ in range(40):
            rank = int(rng.integers(1, 7))
            dims = tuple(int(rng.integers(1, 6)) for _ in range(rank))
            pm = PermutationMap(tuple(int(x) for x in rng.permutation(rank)))
            lay = TensorLayout(dims)
            ml, mp = merge_dimensions(lay, pm)
            assert bijection_equal(lay, pm, ml, mp, rng)


class TestDecompose:
    def test_rank10(self):
        # (2,16,8,4) outer-to-inner becomes an all-2 tensor of rank 10
        lay = TensorLayout((4, 8, 16, 2))
        dl, dp = decompose_pow2(lay, PermutationMap((0, 1, 2, 3)))
        assert dl.dims == (2,) * 10
        assert dp.sigma == tuple(range(10))

    def test_rank1_pow2(self):
        dl, dp = decompose_pow2(TensorLayout((8,)), PermutationMap((0,)))
        assert dl.dims == (2, 2, 2)
        assert dp.sigma == (0, 1, 2)

    def test_4x4_swap_bijection(self):
        lay = TensorLayout((4, 4))
        pm = PermutationMap((1, 0))
        dl, dp = decompose_pow2(lay, pm)
        assert dl.dims == (2,) * 4
        assert dp.sigma == (2, 3, 0, 1)
        rng = np.random.default_rng(11)
        assert bijection_equal(lay, pm, dl, dp, rng)

    def test_non_pow2_rejected(self):
        with pytest.raises(LayoutError):
            decompose_pow2(TensorLayout((3, 4)), PermutationMap((0, 1)))

    def test_bijection_preserved_random(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            rank = int(rng.integers(1, 6))
            dims = tuple(int(2 ** rng.integers(0, 4)) for _ in range(rank))
            pm = PermutationMap(tuple(int(x) for x in rng.permutation(rank)))
            lay = TensorLayout(dims)
            dl, dp = decompose_pow2(lay, pm)
            assert bijection_equal(lay, pm, dl, dp, rng)


def w4() -> MachineConfig:
    return MachineConfig(bit_width=128, elem_width=4)  # w = 4


def w16() -> MachineConfig:
    return MachineConfig(bit_width=512, elem_width=4)  # w = 16


class TestSelectBlock:
    def test_all2_disjoint_two_steps(self):
        lay = TensorLayout((2,) * 6)
        pm = PermutationMap((5, 4, 3, 2, 1, 0))
        plan = select_block(lay, pm, w4())
        assert plan.row_indices == (0, 1)
        assert plan.col_indices == (5, 4)
        assert plan.common_indices == ()
        assert plan.shuffle_steps == 2

    def test_all2_sigma0_common_one_step(self):
        # sigma_0 = 0: one common index, a single exchange step remains
        lay = TensorLayout((2,) * 4)
        pm = PermutationMap((0, 3, 1, 2))
        plan = select_block(lay, pm, w4())
        assert plan.common_indices == (0,)
        assert plan.shuffle_steps == 1
        assert plan.num_registers == 2

    def test_rows_equal_cols_zero_steps(self):
        lay = TensorLayout((2,) * 4)
        pm = PermutationMap((0, 1, 3, 2))  # trailing pair fixed, outer pair swapped
        plan = select_block(lay, pm, w4())
        assert plan.shuffle_steps == 0
        assert plan.num_registers == 1

    def test_utilization_3_5_unmerged(self):
        # trailing (5,3) at w=16 without merging: 15/32
        lay = TensorLayout((3, 5, 16))
        pm = PermutationMap((2, 0, 1))
        plan = select_block(lay, pm, w16())
        assert plan.utilization == Fraction(15, 32)

    def test_utilization_3_5_merged(self):
        # same tensor after merging: dim 15 padded to 16, 15/16
        lay, pm = merge_dimensions(TensorLayout((3, 5, 16)), PermutationMap((2, 0, 1)))
        assert lay.dims == (15, 16)
        plan = select_block(lay, pm, w16())
        assert plan.utilization == Fraction(15, 16)

    def test_utilization_9_8_merged_full(self):
        # (9,8) merged to 72, divisible by w=8: no padding waste at all
        m = MachineConfig(bit_width=256, elem_width=4)  # w = 8
        lay, pm = merge_dimensions(TensorLayout((9, 8, 4)), PermutationMap((2, 0, 1)))
        assert lay.dims == (72, 4)
        plan = select_block(lay, pm, m)
        assert plan.utilization == Fraction(1)

    def test_matrix_tile_fallback_flag(self):
        m = MachineConfig(bit_width=256, elem_width=4)  # w = 8
        plan = select_block(TensorLayout((9, 5)), PermutationMap((1, 0)), m)
        assert plan.fallback_mode == "matrix-tile"
        plan2 = select_block(TensorLayout((5, 9)), PermutationMap((1, 0)), m)
        assert plan2.fallback_mode == "matrix-tile"
        plan3 = select_block(TensorLayout((5, 9)), PermutationMap((0, 1)), m)
        assert plan3.fallback_mode == "none"

    @pytest.mark.parametrize(
        "dims,sigma",
        [
            ((2, 12, 8), (2, 0, 1)),  # row chain 2 x (12 split by 4) is exact
            ((24, 8), (1, 0)),        # 24 = 3 full vectors of 8
            ((4, 4, 16), (2, 0, 1)),
            ((48, 16), (1, 0)),
        ],
    )
    def test_exact_chains_have_full_utilization(self, dims, sigma):
        # whenever both trailing chains split into whole vectors, no lane
        # is ever idle
        m = MachineConfig(bit_width=256)  # w = 8
        plan = select_block(TensorLayout(dims), PermutationMap(sigma), m)
        assert plan.utilization == Fraction(1)

    def test_elem_width_mismatch(self):
        with pytest.raises(LayoutError):
            select_block(TensorLayout((4, 4), 8), PermutationMap((1, 0)), w4())

    def test_format_plan_mentions_key_facts(self):
        plan = select_block(TensorLayout((2,) * 6), PermutationMap((5, 4, 3, 2, 1, 0)), w4())
        text = format_plan(plan)
        assert "shuffle steps: 2" in text
        assert "utilization" in text


class TestEnumerateBlocks:
    def test_single_block(self):
        lay = TensorLayout((8,))
        pm = PermutationMap((0,))
        plan = select_block(lay, pm, MachineConfig(bit_width=256))
        assert list(enumerate_blocks(lay, pm, plan)) == [(0, 0)]

    def test_all2_rank3_w2_offsets(self):
        # block = {i_0} on the row side, {i_2} on the column side; the outer
        # loop walks i_1, so source bases are 0,2 and dest bases 0,2
        pm = PermutationMap((2, 1, 0))
        m = MachineConfig(bit_width=128, elem_width=8)  # w = 2
        lay8 = TensorLayout((2, 2, 2), 8)
        plan = select_block(lay8, pm, m)
        assert plan.row_indices == (0,) and plan.col_indices == (2,)
        pairs = list(enumerate_blocks(lay8, pm, plan))
        assert pairs == [(0, 0), (2, 2)]

    def test_coverage_3_5_7(self):
        # valid store runs tile 0..104 exactly; the source side follows by
        # pulling the tiling through the element bijection
        assert _dest_coverage(TensorLayout((7, 5, 3)), PermutationMap((1, 2, 0))) == list(range(105))

    def test_dest_coverage_exact_random(self):
        rng = np.random.default_rng(13)
        for _ in range(15):
            rank = int(rng.integers(1, 5))
            dims = tuple(int(rng.integers(1, 8)) for _ in range(rank))
            n = int(np.prod(dims))
            if n > 3000:
                continue
            pm = PermutationMap(tuple(int(x) for x in rng.permutation(rank)))
            lay = TensorLayout(dims)
            assert _dest_coverage(lay, pm) == list(range(n)), (dims, pm.sigma)


def _dest_coverage(lay, pm):
    """Sorted list of destination offsets covered by valid store lanes."""
    from vecperm.planner import iter_phase_blocks
    from vecperm.shuffle import build_block_ops

    plan = select_block(lay, pm, MachineConfig(bit_width=256))
    covered = []
    for phase in plan.phases():
        ops = build_block_ops(plan, phase)
        for _, base_dst in iter_phase_blocks(plan.counter_digits, phase.ranges):
            for st in ops.stores:
                start = base_dst + st.offset
                covered.extend(range(start, start + st.valid_count))
    return sorted(covered)
