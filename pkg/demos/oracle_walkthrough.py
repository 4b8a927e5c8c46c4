# %% [markdown]
# # From a click to a pseudo box
#
# One synthetic scene, followed through selection, fusion and box
# generation. The class activation map here is the ideal one (the object's
# own mask), so the pseudo box should land exactly on the ground truth.

# %%
import numpy as np

from clickscale.geometry import iou
from clickscale.proposals import SelectionConfig, generate_sliding_windows, select_for_click
from clickscale.pseudogt import discriminative_region, generate
from clickscale.synth import SceneSpec, generate_scenes, oracle_fused_cam

scene = generate_scenes(SceneSpec(seed=3), 1)[0]
print(scene.image_id, scene.image.shape, "labels:", scene.labels)

# %% [markdown]
# Each object carries one click at the centre of its box.

# %%
for c, g in zip(scene.clicks, scene.objects):
    print(f"class {g.class_id}: click ({c.x:.1f}, {c.y:.1f}) box {g.box.as_tuple()}")

# %% [markdown]
# Proposals: a sliding-window grid stands in for an external proposal
# generator. Selection keeps windows that contain the click, nearest centre
# first, drops near-duplicates and keeps the top eight.

# %%
props = generate_sliding_windows(96, 96, (0.25, 0.35, 0.5, 0.7, 1.0), (0.5, 1.0, 2.0), 0.1)
click = scene.clicks[0]
chosen = select_for_click(props, click, SelectionConfig())
print(len(props), "windows,", len(chosen), "selected")
for p in chosen[:3]:
    print("  ", [round(float(v), 2) for v in p.box.as_tuple()])

# %% [markdown]
# Box generation: threshold the fused map, take the connected region under
# the click, and mirror its farthest extent about the click.

# %%
gt = scene.objects[0]
fused = oracle_fused_cam(gt, 96, 96)
region = discriminative_region(fused.map, 80.0, click)
pseudo = generate(fused, click, len(scene.labels))
print("region pixels:", int(region.sum()))
print("pseudo box:", [float(v) for v in pseudo.box.as_tuple()], "IoU with GT:", iou(pseudo.box, gt.box))

# %% [markdown]
# A crude text rendering of the region, the click (`+`) and the box edges (`#`).

# %%
canvas = np.where(region, "o", ".").astype("<U1")
b = pseudo.box
for x in range(int(b.x1), int(b.x2)):
    canvas[int(b.y1), x] = canvas[int(b.y2) - 1, x] = "#"
for y in range(int(b.y1), int(b.y2)):
    canvas[y, int(b.x1)] = canvas[y, int(b.x2) - 1] = "#"
canvas[int(round(click.y)), int(round(click.x))] = "+"
rows = canvas[max(int(b.y1) - 2, 0) : int(b.y2) + 2, : int(b.x2) + 4]
print("\n".join("".join(row) for row in rows))
