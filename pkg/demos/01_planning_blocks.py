#!/usr/bin/env python3
# Walk through the planning layer: layouts, maps, conventions, and how
# merging changes lane utilization.

import numpy as np

from vecperm import (
    MachineConfig,
    PermutationMap,
    TensorLayout,
    from_numpy_convention,
    merge_dimensions,
    naive_permute,
    permuted_layout,
    select_block,
    to_numpy_convention,
)
from vecperm.planner import format_plan

# A tensor is described innermost-first: shape (3,5,7) outer-to-inner means
# dims (7,5,3) here, and strides are the classic suffix products.
lay = TensorLayout((7, 5, 3))
print("dims (inner-first):", lay.dims)
print("strides:           ", lay.strides)  # (1, 7, 35)

# A map lists, per destination position, which source dim lands there.
pm = PermutationMap((1, 2, 0))
print("\npermuted shape (outer-first):", permuted_layout(lay, pm).shape_outer_first())
print("as numpy axes:", to_numpy_convention(pm))
print("round trip:", from_numpy_convention(to_numpy_convention(pm)).sigma == pm.sigma)

# Both conventions move elements identically:
data = np.arange(lay.num_elements, dtype=np.uint32)
ours = naive_permute(data, lay, pm)
theirs = np.transpose(data.reshape(lay.shape_outer_first()), to_numpy_convention(pm)).ravel()
print("bijections agree:", np.array_equal(ours, theirs))

# Planning picks trailing dims of both sides to tile into registers.
m = MachineConfig(bit_width=512)  # 16 lanes of 4 bytes
print("\n--- block plan for (3,5,7) -> destination order (5,7,3) ---")
print(format_plan(select_block(lay, pm, m)))

# Merging: trailing dims 3 and 5 stay adjacent under this map, so they fuse
# into a single run of 15 and padding waste drops from 15/32 to 15/16.
lay2 = TensorLayout((3, 5, 16))
pm2 = PermutationMap((2, 0, 1))
print("\n--- same trailing (5,3) pair, unmerged then merged ---")
print("unmerged utilization:", select_block(lay2, pm2, m).utilization)
ml, mp = merge_dimensions(lay2, pm2)
print("merged dims:", ml.dims, "utilization:", select_block(ml, mp, m).utilization)

# The famous divisible case: (9,8) fuses into 72, a whole number of 8-lane
# vectors, so nothing is wasted at all.
m8 = MachineConfig(bit_width=256)
ml, mp = merge_dimensions(TensorLayout((9, 8, 4)), PermutationMap((2, 0, 1)))
print("\nmerged (9,8) ->", ml.dims, "utilization:", select_block(ml, mp, m8).utilization)
