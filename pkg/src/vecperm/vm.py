"""Abstract SIMD virtual machine.

Executes IR programs bit-exactly on byte-addressed buffers with guard
bands, a vector register file, and per-opcode counters.  Lanes are opaque
bit patterns; no arithmetic ever touches element values.  Guard bands (one
vector width on each side) are filled with a sentinel pattern; stores may
transiently overwrite the upper destination guard, but execution fails
unless the final guard content equals the sentinels again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LayoutError, TensorLayout
from .ir import Addr, IRProgram, Loop, VLoad, VSelfShuf, VShuf, VStore
from .machine import MachineConfig

__all__ = ["VMError", "VMState", "run", "execute", "audit_complexity", "format_counters"]


class VMError(RuntimeError):
    pass


_SENTINEL_MULT = 0x9E3779B1


def _sentinels(n: int, dtype) -> np.ndarray:
    i = np.arange(1, n + 1, dtype=np.uint64)
    return (i * _SENTINEL_MULT).astype(dtype)


@dataclass
class VMState:
    """One execution's buffers, register file and counters."""

    program: IRProgram
    src: np.ndarray = field(init=False)
    dst: np.ndarray = field(init=False)
    regs: list = field(init=False)
    written: list = field(init=False)
    counters: dict = field(init=False)
    trace: list | None = None
    output: np.ndarray | None = None

    def __post_init__(self):
        ir = self.program
        w = ir.machine.lanes
        n = ir.num_elements
        dtype = ir.layout.dtype
        self.src = np.empty(n + 2 * w, dtype=dtype)
        self.dst = np.empty(n + 2 * w, dtype=dtype)
        for buf in (self.src, self.dst):
            buf[:w] = _sentinels(w, dtype)
            buf[n + w:] = _sentinels(w, dtype)
        self.dst[w:n + w] = _sentinels(n, dtype)
        nregs = max(ir.machine.num_vector_registers, ir.num_vregs, 1)
        self.regs = [None] * nregs
        self.written = [False] * nregs
        self.counters = {
            "vload": 0,
            "vstore": 0,
            "vshuf": 0,
            "vselfshuf": 0,
            "addr": 0,
            "vload_unaligned": 0,
            "vstore_unaligned": 0,
            "vload_dst": 0,
        }


class _Counter:
    """Mixed-radix walk over one loop's counter sub-range."""

    def __init__(self, loop: Loop):
        self.digits = loop.digits
        self.ranges = loop.ranges
        self.spans = [hi - lo for lo, hi in loop.ranges]
        self.idx = []
        self.src = 0
        self.dst = 0
        rem = loop.start
        for dg, (lo, hi), span in zip(self.digits, self.ranges, self.spans):
            pos = lo + rem % span
            rem //= span
            self.idx.append(pos)
            self.src += dg.src_stride * pos
            self.dst += dg.dst_stride * pos

    def advance(self):
        for i, dg in enumerate(self.digits):
            self.idx[i] += 1
            if self.idx[i] < self.ranges[i][1]:
                self.src += dg.src_stride
                self.dst += dg.dst_stride
                return
            self.idx[i] = self.ranges[i][0]
            self.src -= dg.src_stride * (self.spans[i] - 1)
            self.dst -= dg.dst_stride * (self.spans[i] - 1)


def execute(
    ir: IRProgram, input_buf: np.ndarray | bytes, trace: bool = False
) -> tuple[np.ndarray, dict]:
    """Run the program; returns (output buffer, op counters)."""
    st = run(ir, input_buf, trace=trace)
    return st.output, dict(st.counters)


def run(ir: IRProgram, input_buf: np.ndarray | bytes, trace: bool = False) -> VMState:
    """Full execution returning the machine state (output, counters, trace).

    Raises VMError on out-of-guard-band access, reads of registers never
    written, unresolved constant ids, or corrupted guard bands.
    """
    st = VMState(ir, trace=[] if trace else None)
    w = ir.machine.lanes
    n = ir.num_elements
    dtype = ir.layout.dtype
    data = (
        np.frombuffer(input_buf, dtype=dtype)
        if isinstance(input_buf, (bytes, bytearray))
        else np.asarray(input_buf, dtype=dtype)
    )
    if data.size != n:
        raise LayoutError(f"input holds {data.size} elements, program expects {n}")
    st.src[w:n + w] = data

    tables = {cid: np.asarray(lanes, dtype=np.int64) for cid, lanes in ir.constants}
    for lanes in tables.values():
        if lanes.size != w or lanes.min() < 0 or lanes.max() >= 2 * w:
            raise VMError("malformed shuffle index table")

    regs, written, counters = st.regs, st.written, st.counters
    src, dst = st.src, st.dst
    lo_bound, hi_bound = -w, n  # valid start addresses for one vector access

    def resolve(table_id):
        t = tables.get(table_id)
        if t is None:
            raise VMError(f"unresolved constant table c{table_id}")
        return t

    for loop in ir.loops:
        # precompile the body for the interpreter hot path
        compiled = []
        for op in loop.body:
            if isinstance(op, Addr):
                compiled.append((0, op.scalar))
            elif isinstance(op, VLoad):
                compiled.append((1, op.dst, op.scalar, op.offset, op.aligned, op.space == "dst"))
            elif isinstance(op, VStore):
                compiled.append((2, op.src, op.scalar, op.offset, op.aligned))
            elif isinstance(op, VShuf):
                compiled.append((3, op.a, op.b, resolve(op.table), op.dst))
            elif isinstance(op, VSelfShuf):
                compiled.append((4, op.a, resolve(op.table), op.dst))
            else:
                raise VMError(f"unknown op {op!r}")
        counter = _Counter(loop)
        max_scalar = max(
            (op.scalar for op in loop.body if isinstance(op, (Addr, VLoad, VStore))),
            default=0,
        )
        sbases = [(0, 0)] * (max_scalar + 1)
        for _ in range(loop.trips):
            for c in compiled:
                code = c[0]
                if code == 0:
                    sbases[c[1]] = (counter.src, counter.dst)
                    counter.advance()
                    counters["addr"] += 1
                elif code == 1:
                    _, rd, sc, off, aligned, from_dst = c
                    base = sbases[sc][1] if from_dst else sbases[sc][0]
                    addr = base + off
                    if addr < lo_bound or addr > hi_bound:
                        raise VMError(f"load at {addr} outside guard band")
                    buf = dst if from_dst else src
                    regs[rd] = buf[w + addr: w + addr + w].copy()
                    written[rd] = True
                    counters["vload"] += 1
                    if not aligned:
                        counters["vload_unaligned"] += 1
                    if from_dst:
                        counters["vload_dst"] += 1
                elif code == 2:
                    _, rs, sc, off, aligned = c
                    if not written[rs]:
                        raise VMError(f"store of register r{rs} before any write")
                    addr = sbases[sc][1] + off
                    if addr < lo_bound or addr > hi_bound:
                        raise VMError(f"store at {addr} outside guard band")
                    dst[w + addr: w + addr + w] = regs[rs]
                    counters["vstore"] += 1
                    if not aligned:
                        counters["vstore_unaligned"] += 1
                    if st.trace is not None:
                        st.trace.append((addr, regs[rs].tobytes()))
                elif code == 3:
                    _, a, b, tab, rd = c
                    if not (written[a] and written[b]):
                        raise VMError("shuffle reads a register before any write")
                    regs[rd] = np.concatenate((regs[a], regs[b]))[tab]
                    written[rd] = True
                    counters["vshuf"] += 1
                else:
                    _, a, tab, rd = c
                    if not written[a]:
                        raise VMError("self-shuffle reads a register before any write")
                    if tab.max() >= w:
                        raise VMError("self-shuffle selector exceeds one register")
                    regs[rd] = regs[a][tab]
                    written[rd] = True
                    counters["vselfshuf"] += 1

    sent_w = _sentinels(w, dtype)
    if not np.array_equal(dst[:w], sent_w) or not np.array_equal(dst[n + w:], sent_w):
        raise VMError("destination guard bands corrupted")
    if not np.array_equal(src[:w], sent_w) or not np.array_equal(src[n + w:], sent_w):
        raise VMError("source guard bands corrupted")
    st.output = dst[w:n + w].copy()
    return st


def audit_complexity(
    counters: dict,
    layout: TensorLayout,
    machine: MachineConfig,
    utilization: float = 1.0,
) -> dict:
    """Vector ops per w elements versus the (2 + log2 w) / utilization cap."""
    n = layout.num_elements
    w = machine.lanes
    vec_ops = sum(counters.get(k, 0) for k in ("vload", "vstore", "vshuf", "vselfshuf"))
    per_w = vec_ops * w / n
    bound = (2 + machine.lane_bits) / float(utilization)
    mem_ops = counters.get("vload", 0) + counters.get("vstore", 0)
    unaligned = counters.get("vload_unaligned", 0) + counters.get("vstore_unaligned", 0)
    return {
        "elements": n,
        "lanes": w,
        "vector_ops": vec_ops,
        "ops_per_w_elements": per_w,
        "bound": bound,
        "within_bound": bool(per_w <= bound + 1e-9),
        "utilization": float(utilization),
        "unaligned_fraction": unaligned / mem_ops if mem_ops else 0.0,
        "addr_ops": counters.get("addr", 0),
    }


def format_counters(counters: dict) -> str:
    return "\n".join(f"{k}: {counters[k]}" for k in sorted(counters))
