"""The simulated annotator: always the deepest point of the largest error.

Builds a scene, fakes a crummy prediction, and watches the robot place
corrective clicks of the right polarity without ever repeating a pixel.

Run: python3 demos/03_robot_user.py
"""

from clickseg.clicks import encode_clicks, error_regions, simulate_next_click
from clickseg.data import generate_scene

scene = generate_scene(42, kind="ring")
gt = scene.gt
h, w = gt.shape

# a fake prediction: the ring's lower half plus a spurious corner blob
pred = gt.copy()
pred[: h // 2] = False
pred[4:14, 4:14] = True

regions = error_regions(pred, gt)
print(f"{len(regions)} error regions; largest is {regions[0].kind} "
      f"with {regions[0].size} px")

clicks = []
for step in range(5):
    click = simulate_next_click(pred, gt, clicks)
    clicks.append(click)
    print(f"  step {click.step}: {click.polarity:8s} at ({click.row:3d}, {click.col:3d})")

coords = {(c.row, c.col) for c in clicks}
print(f"unique pixels: {len(coords)} of {len(clicks)}")

maps = encode_clicks(clicks, h, w, radius=5)
print(f"guidance disks: {int(maps.pos.sum())} positive px, "
      f"{int(maps.neg.sum())} negative px")
