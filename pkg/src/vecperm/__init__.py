"""SIMD tensor permutation: planning, IR generation, validation VM, backends."""

from .core import (
    ElementBijection,
    LayoutError,
    PermutationMap,
    TensorLayout,
    compute_strides,
    from_numpy_convention,
    naive_permute,
    permuted_layout,
    to_numpy_convention,
)
from .machine import MachineConfig
from .planner import (
    BlockPlan,
    decompose_pow2,
    enumerate_blocks,
    merge_dimensions,
    select_block,
)
from .shuffle import (
    IOPlan,
    ShuffleIndexVector,
    ShuffleSchedule,
    apply_register_rename,
    butterfly_schedule,
    gen_shuffle_indices,
    plan_io,
    prune_padded,
)
from .ir import IRProgram, build_ir, build_program, dump_ir, optimize, parse_ir
from .vm import VMState, audit_complexity, execute, run
from .emit import emit_source, kernel_name, verify_native

__version__ = "0.1.0"
