"""Adaptive zoom geometry: box, margin, crop, remap round trip.

Run: python3 demos/04_zoom_cascade.py
"""

import numpy as np

from clickseg.cascade import (
    CascadeConfig, SessionState, adaptive_box, adaptive_margin, crop_resample,
    remap_to_full, zoom_in,
)
from clickseg.clicks import Click
from clickseg.data import generate_scene

cfg = CascadeConfig()
scene = generate_scene(7, kind="disk")
h, w = scene.gt.shape

# margin shrinks as the box grows
for s in (0.001, 0.05, 0.25, 0.75, 1.0):
    print(f"  box/image area {s:5.3f} -> margin factor {adaptive_margin(s, cfg):.3f}")

# pretend the coarse net nailed the disk (smoothed: resampling guarantees
# only hold for smooth fields, a hard 0/1 edge aliases)
from scipy.ndimage import gaussian_filter
p_c = gaussian_filter(scene.gt.astype(float) * 0.9, sigma=3.0)
region = adaptive_box(p_c, cfg)
print(f"zoom region: top={region.top} left={region.left} "
      f"{region.height}x{region.width} -> {region.target_h}x{region.target_w}")

session = SessionState.new(scene.image)
session = SessionState(image=session.image, clicks=(Click(h // 2, w // 2, True, 1),),
                       prev_prob=session.prev_prob, step=1)
crop_img, crop_prob, crop_clicks, region = zoom_in(session, p_c, cfg)
print(f"crop image {crop_img.shape}, {len(crop_clicks)} click(s) inside the crop")

back = remap_to_full(crop_prob, region, h, w, background=p_c)
interior = (slice(region.top + 2, region.top + region.height - 2),
            slice(region.left + 2, region.left + region.width - 2))
err = np.abs(back[interior] - p_c[interior]).max()
print(f"crop -> remap interior error on this smooth field: {err:.4f} (< 0.02)")
