"""Round trip a change mask through the block codec and score a few answers."""
import numpy as np

from changeguide.codec import (GridSpec, block_labels_from_mask, coarse_mask_from_blocks,
                               parse_runs, render_structured, serialize_runs)
from changeguide.rewards import total_reward

grid = GridSpec(8, 8, 64, 64)

# two changed rectangles on a 64x64 image
mask = np.zeros((64, 64), dtype=np.uint8)
mask[4:20, 8:30] = 1
mask[40:44, 50:60] = 1

gt = block_labels_from_mask(mask, grid)
runs = serialize_runs(gt)
print("changed blocks:", gt.sorted())
print("run string:   ", runs)
assert parse_runs(runs, grid) == gt

coarse = coarse_mask_from_blocks(gt)
print("coarse mask covers", int(coarse.sum()), "pixels for", int(mask.sum()), "changed pixels")
assert np.all(coarse >= mask)

# a few candidate answers, from exact to malformed
answers = {
    "exact": render_structured("two objects moved", runs),
    "missed one block": render_structured("partial", serialize_runs(gt.sorted()[1:])),
    "over-predicted": render_structured("wide", serialize_runs(gt.sorted() + [63])),
    "no tags": runs,
}
for name, raw in answers.items():
    r = total_reward(raw, gt)
    print(f"{name:18s} format={r.r_format} P={r.precision:.3f} R={r.recall:.3f} total={r.total:.3f}")
