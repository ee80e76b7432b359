"""Block planning: merging, power-of-two decomposition, trailing-index
selection, and streaming block-address enumeration.

A block is built from the trailing dimensions of the source (its rows) and
of the destination (its columns).  Selection is bit-granular: padded
extents are powers of two, and the dimension that crosses the lane budget
contributes only its low bits to the block while its high bits become an
outer counter digit.  That one rule covers whole small dims, power-of-two
dims wider than a register, and the degenerate matrix-tile case where the
innermost dim alone exceeds the register.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

from .core import LayoutError, PermutationMap, TensorLayout, permuted_layout
from .machine import MachineConfig

__all__ = [
    "SideEntry",
    "CounterDigit",
    "Phase",
    "BlockPlan",
    "merge_dimensions",
    "decompose_pow2",
    "select_block",
    "enumerate_blocks",
    "iter_phase_blocks",
    "format_plan",
]


def ceil_log2(d: int) -> int:
    return (d - 1).bit_length()


@dataclass(frozen=True)
class SideEntry:
    """One dimension's contribution to a block side.

    ``bits`` low bits of the dimension live inside the block on this side;
    ``whole`` marks that 2**bits already covers the full dimension.
    """

    dim: int
    size: int
    bits: int
    whole: bool

    @property
    def padded(self) -> int:
        return 1 << self.bits


@dataclass(frozen=True)
class CounterDigit:
    """One mixed-radix digit of the block counter."""

    dim: int
    extent: int
    src_stride: int
    dst_stride: int
    ragged: bool
    full_extent: int  # digit values below this leave the in-block part full


@dataclass(frozen=True)
class Phase:
    """A rectangular sub-range of the block counter with static lane masks."""

    name: str
    ranges: tuple[tuple[int, int], ...]  # (lo, hi) per counter digit
    valid_counts: dict[int, int]  # dim -> valid values of its in-block bits

    @property
    def trip_count(self) -> int:
        n = 1
        for lo, hi in self.ranges:
            n *= hi - lo
        return n


@dataclass(frozen=True)
class BlockPlan:
    layout: TensorLayout
    pmap: PermutationMap
    machine: MachineConfig
    row_entries: tuple[SideEntry, ...]
    col_entries: tuple[SideEntry, ...]
    counter_digits: tuple[CounterDigit, ...]
    fallback_mode: str  # 'none' or 'matrix-tile'

    # -- summary views -----------------------------------------------------

    @property
    def row_indices(self) -> tuple[int, ...]:
        return tuple(e.dim for e in self.row_entries)

    @property
    def col_indices(self) -> tuple[int, ...]:
        return tuple(e.dim for e in self.col_entries)

    @property
    def common_indices(self) -> tuple[int, ...]:
        rows = {e.dim for e in self.row_entries if e.bits > 0}
        return tuple(e.dim for e in self.col_entries if e.dim in rows and e.bits > 0)

    @property
    def padded_row_extents(self) -> tuple[int, ...]:
        return tuple(e.padded for e in self.row_entries)

    @property
    def padded_col_extents(self) -> tuple[int, ...]:
        return tuple(e.padded for e in self.col_entries)

    @property
    def row_bits_total(self) -> int:
        return sum(e.bits for e in self.row_entries)

    @property
    def col_bits_total(self) -> int:
        return sum(e.bits for e in self.col_entries)

    @property
    def common_bits_total(self) -> int:
        row = {e.dim: e.bits for e in self.row_entries}
        return sum(min(e.bits, row.get(e.dim, 0)) for e in self.col_entries)

    @property
    def shuffle_steps(self) -> int:
        return max(self.row_bits_total, self.col_bits_total) - self.common_bits_total

    @property
    def num_registers(self) -> int:
        return 1 << self.shuffle_steps

    @property
    def utilization(self) -> Fraction:
        util = Fraction(1)
        for e in itertools.chain(self.row_entries, self.col_entries):
            chunk = e.padded
            covered = chunk * -(-e.size // chunk)
            util *= Fraction(e.size, covered)
        return util

    # -- geometry used by the shuffle engine ------------------------------

    def in_block_bits(self) -> dict[int, int]:
        bits: dict[int, int] = {}
        for e in itertools.chain(self.row_entries, self.col_entries):
            bits[e.dim] = max(bits.get(e.dim, 0), e.bits)
        return bits

    def row_bit_refs(self) -> tuple[tuple[int, int], ...]:
        """Lane bits of a freshly loaded register, innermost first."""
        refs = []
        for e in self.row_entries:
            refs.extend((e.dim, b) for b in range(e.bits))
        return tuple(refs)

    def col_bit_refs(self) -> tuple[tuple[int, int], ...]:
        """Lane bits of a register about to be stored, innermost first."""
        refs = []
        for e in self.col_entries:
            refs.extend((e.dim, b) for b in range(e.bits))
        return tuple(refs)

    def static_valid_counts(self) -> dict[int, int]:
        """Full-phase valid value count per dim's in-block bits."""
        counts = {}
        for dim, mb in self.in_block_bits().items():
            counts[dim] = min(self.layout.dims[dim], 1 << mb)
        return counts

    def phases(self) -> tuple[Phase, ...]:
        digits = self.counter_digits
        ragged = [i for i, d in enumerate(digits) if d.ragged]
        base_valid = self.static_valid_counts()
        phases = []
        for choice in itertools.product((False, True), repeat=len(ragged)):
            ranges = [(0, d.extent) for d in digits]
            valid = dict(base_valid)
            names = []
            for flag, i in zip(choice, ragged):
                dg = digits[i]
                if flag:
                    ranges[i] = (dg.full_extent, dg.extent)
                    valid[dg.dim] = self.layout.dims[dg.dim] - dg.full_extent * (
                        1 << self.in_block_bits()[dg.dim]
                    )
                    names.append(f"tail[d{dg.dim}]")
                else:
                    ranges[i] = (0, dg.full_extent)
            name = "+".join(names) if names else "main"
            phase = Phase(name, tuple(ranges), valid)
            if phase.trip_count > 0:
                phases.append(phase)
        return tuple(phases)


def _positions(pmap: PermutationMap) -> list[int]:
    pos = [0] * pmap.rank
    for j, s in enumerate(pmap.sigma):
        pos[s] = j
    return pos


def merge_dimensions(
    layout: TensorLayout, pmap: PermutationMap
) -> tuple[TensorLayout, PermutationMap]:
    """Fuse adjacent dims whose adjacency and order survive the map.

    Size-1 dims are dropped first; they carry no addressing information and
    would otherwise break up mergeable runs.  The element bijection of the
    returned pair equals that of the input pair.
    """
    if pmap.rank != layout.rank:
        raise LayoutError("map rank does not match layout rank")
    keep = [k for k, d in enumerate(layout.dims) if d > 1]
    if not keep:
        return TensorLayout((1,), layout.elem_width), PermutationMap((0,))
    renum = {old: new for new, old in enumerate(keep)}
    dims = [layout.dims[k] for k in keep]
    sigma = [renum[s] for s in pmap.sigma if s in renum]
    pos = [0] * len(dims)
    for j, s in enumerate(sigma):
        pos[s] = j

    groups: list[list[int]] = [[0]]
    for k in range(1, len(dims)):
        if pos[k] == pos[k - 1] + 1:
            groups[-1].append(k)
        else:
            groups.append([k])
    new_dims = tuple(_prod(dims[k] for k in g) for g in groups)
    # destination rank of a group follows the position of its innermost member
    order = sorted(range(len(groups)), key=lambda gi: pos[groups[gi][0]])
    return TensorLayout(new_dims, layout.elem_width), PermutationMap(tuple(order))


def _prod(it) -> int:
    n = 1
    for x in it:
        n *= x
    return n


def decompose_pow2(
    layout: TensorLayout, pmap: PermutationMap
) -> tuple[TensorLayout, PermutationMap]:
    """Rewrite an all-power-of-two tensor as an all-2 tensor of rank log2(N).

    Sub-indices of one original index keep their relative order, so the
    element bijection is unchanged.
    """
    if pmap.rank != layout.rank:
        raise LayoutError("map rank does not match layout rank")
    for d in layout.dims:
        if d & (d - 1):
            raise LayoutError(f"dimension {d} is not a power of two")
    base = []
    acc = 0
    for d in layout.dims:
        base.append(acc)
        acc += ceil_log2(d)
    if acc == 0:
        return TensorLayout((1,), layout.elem_width), PermutationMap((0,))
    sigma = []
    for s in pmap.sigma:
        sigma.extend(range(base[s], base[s] + ceil_log2(layout.dims[s])))
    return TensorLayout((2,) * acc, layout.elem_width), PermutationMap(tuple(sigma))


def _take_side(order: list[int], dims: tuple[int, ...], lane_bits: int) -> list[SideEntry]:
    taken: list[SideEntry] = []
    used = 0
    for k in order:
        d = dims[k]
        e = ceil_log2(d)
        if e == 0:
            taken.append(SideEntry(k, d, 0, True))
            continue
        t = min(e, lane_bits - used)
        if t == 0:
            break
        taken.append(SideEntry(k, d, t, t == e))
        used += t
        if t < e:
            break
    return taken


def select_block(
    layout: TensorLayout, pmap: PermutationMap, machine: MachineConfig
) -> BlockPlan:
    """Choose row/column index sets and build the block counter.

    Expects a merged pair (decomposition is subsumed by the bit-granular
    boundary split, so pre-decomposed all-2 input selects identically).
    """
    if layout.rank == 0:
        raise LayoutError("rank-0 tensor")
    if pmap.rank != layout.rank:
        raise LayoutError("map rank does not match layout rank")
    if layout.elem_width != machine.elem_width:
        raise LayoutError("layout and machine element widths differ")
    w = machine.lanes
    lb = machine.lane_bits
    pos = _positions(pmap)
    out = permuted_layout(layout, pmap)

    row = _take_side(list(range(layout.rank)), layout.dims, lb)
    col = _take_side(list(pmap.sigma), layout.dims, lb)

    fallback = "matrix-tile" if (layout.dims[0] > w or layout.dims[pmap.sigma[0]] > w) else "none"

    in_bits: dict[int, int] = {}
    for e in itertools.chain(row, col):
        in_bits[e.dim] = max(in_bits.get(e.dim, 0), e.bits)

    digits = []
    for k in range(layout.rank):
        d = layout.dims[k]
        chunk = 1 << in_bits.get(k, 0)
        extent = -(-d // chunk)
        if extent <= 1:
            continue
        ragged = (d % chunk != 0) and k in in_bits
        digits.append(
            CounterDigit(
                dim=k,
                extent=extent,
                src_stride=layout.strides[k] * chunk,
                dst_stride=out.strides[pos[k]] * chunk,
                ragged=ragged,
                full_extent=d // chunk if ragged else extent,
            )
        )
    digits.sort(key=lambda dg: dg.dst_stride)

    return BlockPlan(
        layout=layout,
        pmap=pmap,
        machine=machine,
        row_entries=tuple(row),
        col_entries=tuple(col),
        counter_digits=tuple(digits),
        fallback_mode=fallback,
    )


def enumerate_blocks(layout: TensorLayout, pmap: PermutationMap, plan: BlockPlan):
    """Yield one (src_offset, dst_offset) pair per block, O(1) amortized."""
    yield from iter_phase_blocks(plan.counter_digits, tuple((0, d.extent) for d in plan.counter_digits))


def iter_phase_blocks(digits: tuple[CounterDigit, ...], ranges: tuple[tuple[int, int], ...]):
    """Incremental mixed-radix walk of one rectangular counter sub-range."""
    if not digits:
        yield (0, 0)
        return
    src = sum(dg.src_stride * lo for dg, (lo, _) in zip(digits, ranges))
    dst = sum(dg.dst_stride * lo for dg, (lo, _) in zip(digits, ranges))
    idx = [lo for lo, _ in ranges]
    spans = [hi - lo for lo, hi in ranges]
    if any(s <= 0 for s in spans):
        return
    while True:
        yield (src, dst)
        for i, dg in enumerate(digits):
            idx[i] += 1
            if idx[i] < ranges[i][1]:
                src += dg.src_stride
                dst += dg.dst_stride
                break
            idx[i] = ranges[i][0]
            src -= dg.src_stride * (spans[i] - 1)
            dst -= dg.dst_stride * (spans[i] - 1)
        else:
            return


def format_plan(plan: BlockPlan) -> str:
    """Human-readable plan dump for the command-line front end."""
    lay, pm, m = plan.layout, plan.pmap, plan.machine
    lines = [
        f"shape (outer->inner): {lay.shape_outer_first()}",
        f"map (sigma, inner-first): {pm.sigma}",
        f"machine: {m.isa_tag} {m.bit_width}-bit, elem {m.elem_width}B, w={m.lanes}, "
        f"{m.num_vector_registers} regs",
        f"fallback mode: {plan.fallback_mode}",
        "row side (trailing source dims):",
    ]
    for e in plan.row_entries:
        kind = "whole" if e.whole else f"split: low {e.bits} bits in block"
        lines.append(f"  d{e.dim} size {e.size} padded {e.padded} ({kind})")
    lines.append("col side (trailing destination dims):")
    for e in plan.col_entries:
        kind = "whole" if e.whole else f"split: low {e.bits} bits in block"
        lines.append(f"  d{e.dim} size {e.size} padded {e.padded} ({kind})")
    lines += [
        f"common indices: {plan.common_indices or '()'}",
        f"shuffle steps: {plan.shuffle_steps}",
        f"block registers: {plan.num_registers}",
        f"lane utilization: {plan.utilization} = {float(plan.utilization):.4f}",
        f"counter digits (fastest first): "
        + (
            ", ".join(
                f"d{d.dim}x{d.extent}" + ("(ragged)" if d.ragged else "")
                for d in plan.counter_digits
            )
            or "none"
        ),
        f"blocks: {_prod(d.extent for d in plan.counter_digits)}",
    ]
    return "\n".join(lines)
