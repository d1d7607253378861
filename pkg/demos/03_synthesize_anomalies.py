"""Pseudo-anomaly synthesis: cut-paste and perlin-blend, with masks.

Writes a small gallery PNG next to this script.

Run:  python demos/03_synthesize_anomalies.py
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from promptad.synthesis import SynthesisParams, cutpaste, perlin_blend, perlin_field
from promptad.toydata import render_toy_image

rng = np.random.default_rng(7)
params = SynthesisParams(patch_area_fraction=(0.08, 0.3), perlin_threshold=0.35,
                         blend_opacity=(0.6, 1.0))

base = render_toy_image("grid", rng)
texture = render_toy_image("stripes", rng)

cp = cutpaste(base, rng, params)
pb = perlin_blend(base, texture, rng, params)
field = perlin_field(32, 32, 3, rng)

print("cutpaste mask area fraction: %.3f" % (cp.mask.mean()))
print("perlin mask area fraction:  %.3f" % (pb.mask.mean()))
print("untouched pixels identical:",
      np.array_equal(cp.image[cp.mask == 0], base[cp.mask == 0]))

fig, axes = plt.subplots(2, 3, figsize=(9, 6))
for ax, (img, title) in zip(axes.flat, [
    (base, "normal"), (cp.image, "cut-paste"), (cp.mask, "cut-paste mask"),
    (field, "noise field"), (pb.image, "perlin blend"), (pb.mask, "blend mask"),
]):
    ax.imshow(img, cmap="gray" if img.ndim == 2 else None)
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
out = Path(__file__).parent / "synthesis_gallery.png"
fig.savefig(out)
print("gallery written to", out)
