#!/usr/bin/env python3
"""From a 28x28 receptive-field map to a full-resolution deterioration heatmap.

Each map cell deposits one amplitude-weighted Gaussian at its receptive-field
center; rendering then saturates the display range at [min, min + (max-min)/4]
so the hazard marks stay strong instead of washing out.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from railfcdd.heatmap import GaussianKernelSpec, Heatmap, RenderSpec, gaussian_upsample, render
from railfcdd.model import BackboneSpec, geometry_of

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

spec = BackboneSpec()  # 224^2 input, 28x28 grid, stride 8
geom = geometry_of(spec)
kernel = GaussianKernelSpec.for_geometry(geom)  # sigma = stride / 2 = 4 px
print(f"grid stride {geom.total_stride} px, cell (0,0) centered at {geom.center(0, 0)}")

# a toy field: one strong cell, one weaker neighbor cluster
field = np.zeros((28, 28))
field[8, 9] = 3.0
field[18:21, 16:19] = 1.2

heat = gaussian_upsample(field, geom, kernel, (224, 224))
print(f"field mass {field.sum():.2f} -> heatmap mass {heat.values.sum():.2f} "
      "(interior Gaussians keep their mass)")

fig, axes = plt.subplots(1, 2, figsize=(9, 4))
axes[0].imshow(field, cmap="jet")
axes[0].set_title("28x28 receptive-field map")
axes[1].imshow(heat.values, cmap="jet")
axes[1].set_title("224x224 Gaussian-upsampled heatmap")
fig.tight_layout()
fig.savefig(OUT / "upsampling.png")

# the display-range rule: saturating the top three quartiles strengthens marks
full = render(Heatmap(heat.values), RenderSpec(quartile=1.0))
strong = render(Heatmap(heat.values), RenderSpec(quartile=0.25))
print(f"full-range bounds {full.bounds}, saturated bounds {strong.bounds}")
(OUT / "render_full_range.png").write_bytes(full.png_bytes)
(OUT / "render_saturated.png").write_bytes(strong.png_bytes)
print(f"figures written to {OUT}/")
