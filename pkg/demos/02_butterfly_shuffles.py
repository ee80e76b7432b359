#!/usr/bin/env python3
# The in-register exchange network: pairwise shuffles, selector vectors,
# register renaming, and what padding prunes away.

from vecperm import MachineConfig, PermutationMap, TensorLayout, select_block
from vecperm.shuffle import (
    apply_register_rename,
    butterfly_schedule,
    gen_shuffle_indices,
    plan_io,
    prune_padded,
)

w4 = MachineConfig(bit_width=128)  # 4 lanes

# Worst case at w=4: disjoint trailing pairs, log2(4) = 2 exchange steps.
plan = select_block(TensorLayout((2,) * 4), PermutationMap((3, 2, 1, 0)), w4)
sched = butterfly_schedule(plan)
for st in sched.steps:
    print(f"step {st.index}: register pairs {st.pairs} (distance {1 << st.reg_bit})")

# Each step needs just two selector vectors, one per side of every pair.
for vec in gen_shuffle_indices(plan):
    kind = "self" if vec.is_self else "two-source"
    print(f"  table {vec.id} ({kind}): {vec.lanes}")

# A common trailing index halves the work: one step instead of two.
plan_b = select_block(TensorLayout((2,) * 4), PermutationMap((0, 3, 1, 2)), w4)
print("\nshared innermost dim -> steps:", plan_b.shuffle_steps,
      "registers:", plan_b.num_registers)

# Renaming: if the promoted dims land in swapped destination order, the
# store-side register numbering absorbs the swap with zero extra shuffles.
sched = apply_register_rename(butterfly_schedule(plan), plan)
print("\nstore-side renaming:", dict(enumerate(sched.renames)))

# Padding analysis: destination rows of 5 padded to 8 leave three register
# slots empty; their shuffles are dropped or folded into self-shuffles.
w8 = MachineConfig(bit_width=256)
plan_pad = select_block(TensorLayout((8, 5)), PermutationMap((1, 0)), w8)
pruned = prune_padded(butterfly_schedule(plan_pad), plan_pad)
print("\npruned outputs:", sorted(pruned.pruned))
print("self-shuffle rewrites:", pruned.self_rewrites)

io = plan_io(plan_pad)
print("loads:", [(ld.slot, ld.offset) for ld in io.loads])
print("store modes:", [(st.offset, st.mode, st.valid_count) for st in io.stores])
# 'borrow' stores fill their overhang with the next register's data;
# the final 'reserve' store rewrites memory content so nothing is lost.
