"""A look at the synthetic world: one scene, its two text views and the
region x token target matrix the losses train against."""

import numpy as np

from groundwork import synthworld as sw

world = sw.WorldConfig()
print("heldout combinations:", ", ".join(world.heldout_labels))
print("vocabulary size:", len(sw.VOCAB))

for mode in ("detection", "grounding"):
    s = sw.make_sample(7, world, mode)
    print(f"\n[{mode}] {' '.join(s.text.words)}")
    for k, lab in enumerate(s.text.span_labels):
        refs = s.text.span_objects[k]
        print(f"  span {k} {lab!r:>18} -> objects {list(refs)}")
    tm = s.targets.matrix
    print(f"  targets {tm.shape}, positive cells {int(tm.sum())}")

scene = sw.sample_scene(7, world)
grid = np.full(world.grid, ".", dtype=object)
owner = sw.owner_of_cells(scene.objects, world.grid)
for r in range(world.grid[0]):
    for c in range(world.grid[1]):
        j = owner[r * world.grid[1] + c]
        grid[r, c] = str(j) if j >= 0 else "."
print("\ncell owners (object index per anchor):")
print("\n".join(" ".join(row) for row in grid))
for j, o in enumerate(scene.objects):
    print(f"  {j}: {o.label} at {o.box}")
