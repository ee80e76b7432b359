import numpy as np
import pytest

from vecperm.core import PermutationMap, TensorLayout, from_numpy_convention, naive_permute
from vecperm.ir import (
    Addr,
    AllocationError,
    IRProgram,
    Loop,
    VLoad,
    VShuf,
    VStore,
    build_ir,
    build_program,
    dump_ir,
    optimize,
    parse_ir,
)
from vecperm.machine import MachineConfig
from vecperm.planner import merge_dimensions, select_block
from vecperm.vm import VMError, audit_complexity, execute


def m_of(bits=512, ew=4, regs=32):
    return MachineConfig(bit_width=bits, elem_width=ew, num_vector_registers=regs)


def count_ops(loop, kind):
    return sum(isinstance(op, kind) for op in loop.body)


class TestBuildIR:
    def test_identity_is_pure_copy(self):
        ir = build_program(TensorLayout((4, 8, 2)), PermutationMap((0, 1, 2)), m_of())
        for loop in ir.loops:
            assert count_ops(loop, VShuf) == 0
        data = np.arange(64, dtype=np.uint32)
        out, counters = execute(ir, data)
        assert np.array_equal(out, data)
        assert counters["vshuf"] == 0 and counters["vselfshuf"] == 0

    def test_w4_disjoint_op_counts(self):
        # w=4, all-2, disjoint: 4 loads, 2 steps x 4 shuffles, 4 stores
        lay = TensorLayout((2,) * 4)
        pm = PermutationMap((3, 2, 1, 0))
        plan = select_block(lay, pm, m_of(128))
        ir = build_ir(plan)
        (loop,) = ir.loops
        assert count_ops(loop, VLoad) == 4
        assert count_ops(loop, VShuf) == 8
        assert count_ops(loop, VStore) == 4

    def test_pow2_shape_vs_oracle(self):
        rng = np.random.default_rng(30)
        lay = TensorLayout((4, 4, 8, 8, 4, 4))
        for _ in range(5):
            pm = PermutationMap(tuple(int(x) for x in rng.permutation(6)))
            ir = build_program(lay, pm, m_of())
            data = rng.integers(0, 2**32 - 1, size=lay.num_elements, dtype=np.uint32)
            out, _ = execute(ir, data)
            assert np.array_equal(out, naive_permute(data, lay, pm))

    def test_mismatched_plan_inputs_rejected(self):
        plan = select_block(TensorLayout((4, 4)), PermutationMap((1, 0)), m_of())
        with pytest.raises(Exception):
            build_ir(plan, layout=TensorLayout((4, 2)))


class TestOptimize:
    def test_semantics_preserved_random(self):
        rng = np.random.default_rng(31)
        for _ in range(30):
            rank = int(rng.integers(1, 7))
            dims = tuple(int(rng.integers(1, 8)) for _ in range(rank))
            n = int(np.prod(dims))
            if n > 4096:
                continue
            pm = PermutationMap(tuple(int(x) for x in rng.permutation(rank)))
            lay = TensorLayout(dims)
            l2, p2 = merge_dimensions(lay, pm)
            plan = select_block(l2, p2, m_of())
            raw = build_ir(plan)
            opt = optimize(raw)
            data = rng.integers(0, 2**32 - 1, size=n, dtype=np.uint32)
            o1, _ = execute(raw, data)
            o2, _ = execute(opt, data)
            assert np.array_equal(o1, o2)

    def test_store_multiset_preserved_by_unrolling(self):
        from collections import Counter

        from vecperm.vm import run

        lay = TensorLayout((2,) * 8)
        pm = PermutationMap((7, 6, 5, 4, 3, 2, 1, 0))
        l2, p2 = merge_dimensions(lay, pm)
        plan = select_block(l2, p2, m_of(128))
        raw = build_ir(plan)
        opt = optimize(raw)
        assert any(l.unroll > 1 for l in opt.loops)
        data = np.arange(256, dtype=np.uint32)
        t1 = run(raw, data, trace=True)
        t2 = run(opt, data, trace=True)
        assert np.array_equal(t1.output, t2.output)
        assert Counter(t1.trace) == Counter(t2.trace)

    def test_register_budget_w16_four_steps(self):
        # square 16-register block with 4 exchange steps: 16 data + 8 index
        # tables + 2 scratch = 26 registers at most
        lay = TensorLayout((2,) * 8)
        pm = PermutationMap((7, 6, 5, 4, 3, 2, 1, 0))
        ir = build_program(lay, pm, m_of(512))
        assert ir.metadata["index_tables"] == 8
        assert ir.metadata["total_registers"] <= 26

    def test_unroll_factor_low_pressure(self):
        # map (2,1,0,3) on shape (64,32,32,4): few registers per iteration,
        # so the optimizer unrolls at least 4x on a 32-register machine
        lay = TensorLayout((4, 32, 32, 64))
        pm = from_numpy_convention((2, 1, 0, 3))
        ir = build_program(lay, pm, m_of())
        assert all(l.unroll >= 4 for l in ir.loops if l.trips > 1)

    def test_unrolled_equals_oracle(self):
        rng = np.random.default_rng(32)
        lay = TensorLayout((4, 32, 32, 64))
        pm = from_numpy_convention((2, 1, 0, 3))
        ir = build_program(lay, pm, m_of())
        data = rng.integers(0, 2**32 - 1, size=lay.num_elements, dtype=np.uint32)
        out, _ = execute(ir, data)
        assert np.array_equal(out, naive_permute(data, lay, pm))

    def test_zero_shuffle_reorder_noop(self):
        ir = build_program(TensorLayout((64,)), PermutationMap((0,)), m_of())
        data = np.arange(64, dtype=np.uint32)
        out, counters = execute(ir, data)
        assert np.array_equal(out, data)
        assert counters["vshuf"] + counters["vselfshuf"] == 0

    def test_allocated_register_ids_within_budget(self):
        rng = np.random.default_rng(36)
        for _ in range(20):
            rank = int(rng.integers(1, 7))
            dims = tuple(int(rng.integers(1, 8)) for _ in range(rank))
            if int(np.prod(dims)) > 4096:
                continue
            pm = PermutationMap(tuple(int(x) for x in rng.permutation(rank)))
            machine = m_of(int(rng.choice([128, 256, 512])))
            ir = build_program(TensorLayout(dims), pm, machine)
            for loop in ir.loops:
                for op in loop.body:
                    for r in [getattr(op, f) for f in ("dst", "src", "a", "b") if hasattr(op, f)]:
                        assert r < machine.num_vector_registers

    def test_allocation_error_reports_demand(self):
        lay = TensorLayout((2,) * 8)
        pm = PermutationMap((7, 6, 5, 4, 3, 2, 1, 0))
        with pytest.raises(AllocationError) as exc:
            build_program(lay, pm, m_of(512, regs=8))
        assert "registers" in str(exc.value)


class TestVM:
    def test_determinism(self):
        rng = np.random.default_rng(33)
        lay = TensorLayout((5, 7, 3))
        pm = PermutationMap((2, 0, 1))
        ir = build_program(lay, pm, m_of(256))
        data = rng.integers(0, 2**32 - 1, size=105, dtype=np.uint32)
        o1, c1 = execute(ir, data)
        o2, c2 = execute(ir, data)
        assert np.array_equal(o1, o2) and c1 == c2

    def test_input_size_mismatch(self):
        ir = build_program(TensorLayout((4, 4)), PermutationMap((1, 0)), m_of(128))
        with pytest.raises(Exception):
            execute(ir, np.zeros(7, dtype=np.uint32))

    def test_read_before_write_detected(self):
        ir = build_program(TensorLayout((4, 4)), PermutationMap((1, 0)), m_of(128))
        loop = ir.loops[0]
        bad = Loop(
            loop.name, loop.digits, loop.ranges, loop.start, loop.trips, loop.unroll,
            (Addr(0), VStore(5, 0, 0, False)), 1,
        )
        broken = IRProgram(ir.machine, ir.layout, ir.pmap, ir.constants, (bad,), ir.num_vregs)
        with pytest.raises(VMError):
            execute(broken, np.zeros(16, dtype=np.uint32))

    def test_unresolved_table_detected(self):
        ir = build_program(TensorLayout((4, 4)), PermutationMap((1, 0)), m_of(128))
        loop = ir.loops[0]
        bad_body = (Addr(0), VLoad(0, 0, 0, False, "src"), VShuf(0, 0, 99, 1))
        bad = Loop(loop.name, loop.digits, loop.ranges, loop.start, loop.trips,
                   loop.unroll, bad_body, 3)
        broken = IRProgram(ir.machine, ir.layout, ir.pmap, ir.constants, (bad,), ir.num_vregs)
        with pytest.raises(VMError):
            execute(broken, np.zeros(16, dtype=np.uint32))

    def test_out_of_guard_band_detected(self):
        ir = build_program(TensorLayout((4, 4)), PermutationMap((1, 0)), m_of(128))
        loop = ir.loops[0]
        bad_body = (Addr(0), VLoad(0, 0, 400, False, "src"))
        bad = Loop(loop.name, loop.digits, loop.ranges, loop.start, loop.trips,
                   loop.unroll, bad_body, 2)
        broken = IRProgram(ir.machine, ir.layout, ir.pmap, ir.constants, (bad,), ir.num_vregs)
        with pytest.raises(VMError):
            execute(broken, np.zeros(16, dtype=np.uint32))

    def test_guard_bands_survive_ragged_tails(self):
        # destination rows of 5 at w=8 overhang into the guard on the final
        # store; the reserve sequence must leave the sentinels intact
        rng = np.random.default_rng(34)
        lay = TensorLayout((8, 5))
        pm = PermutationMap((1, 0))
        ir = build_program(lay, pm, m_of(256))
        data = rng.integers(0, 2**32 - 1, size=40, dtype=np.uint32)
        out, _ = execute(ir, data)  # raises on guard corruption
        assert np.array_equal(out, naive_permute(data, lay, pm))


class TestAudit:
    def test_all2_exact_count(self):
        # disjoint all-2 block at w=4: per block 4 loads + 8 shuffles +
        # 4 stores moving 16 elements = (2 + log2 w) ops per w elements
        lay = TensorLayout((2,) * 6)
        pm = PermutationMap((5, 4, 3, 2, 1, 0))
        ir = build_program(lay, pm, m_of(128), opt=False)
        data = np.arange(64, dtype=np.uint32)
        _, counters = execute(ir, data)
        rep = audit_complexity(counters, lay, m_of(128))
        assert rep["ops_per_w_elements"] == 4.0
        assert rep["within_bound"]

    def test_identity_two_ops_per_vector(self):
        lay = TensorLayout((64,))
        ir = build_program(lay, PermutationMap((0,)), m_of(128))
        _, counters = execute(ir, np.arange(64, dtype=np.uint32))
        rep = audit_complexity(counters, lay, m_of(128))
        assert rep["ops_per_w_elements"] == 2.0

    def test_padded_bound_scales_with_utilization(self):
        # merged dim 15 padded to 16: the cap scales by 16/15
        lay = TensorLayout((15, 16))
        pm = PermutationMap((1, 0))
        ir = build_program(lay, pm, m_of(512))
        data = np.arange(240, dtype=np.uint32)
        _, counters = execute(ir, data)
        util = float(ir.metadata["utilization"])
        assert util == 15 / 16
        rep = audit_complexity(counters, lay, m_of(512), utilization=util)
        assert rep["within_bound"]
        assert rep["bound"] == pytest.approx(6 * 16 / 15)


class TestTextForm:
    def test_round_trip_execution(self):
        rng = np.random.default_rng(35)
        lay = TensorLayout((5, 3, 4))
        pm = PermutationMap((2, 0, 1))
        ir = build_program(lay, pm, m_of(256))
        text = dump_ir(ir)
        back = parse_ir(text)
        assert dump_ir(back) == text
        data = rng.integers(0, 2**32 - 1, size=60, dtype=np.uint32)
        o1, c1 = execute(ir, data)
        o2, c2 = execute(back, data)
        assert np.array_equal(o1, o2) and c1 == c2

    def test_golden_dump_stable(self, tmp_path):
        import pathlib

        golden = pathlib.Path(__file__).parent / "golden" / "bit4x4.ir"
        lay = TensorLayout((2,) * 4)
        pm = PermutationMap((3, 2, 1, 0))
        plan = select_block(lay, pm, m_of(128))
        text = dump_ir(build_ir(plan))
        assert text == golden.read_text()
