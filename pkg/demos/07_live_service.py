"""Scripted client against an in-process session service.

Creates a generated scene server-side (so live IoU is available), places
three clicks, undoes one, and prints the responses the browser UI would
render.

Run: python3 demos/07_live_service.py
"""

from fastapi.testclient import TestClient

from clickseg.service import create_app, rle_decode

client = TestClient(create_app(seed=0))

created = client.post("/sessions", json={"generate": {"kind": "ring", "seed": 3}})
info = created.json()
sid = info["session_id"]
print(f"session {sid[:8]}…  {info['width']}x{info['height']}")

for row, col, polarity in [(48, 72, "positive"), (20, 30, "negative"),
                           (70, 100, "positive")]:
    resp = client.post(f"/sessions/{sid}/clicks",
                       json={"row": row, "col": col, "polarity": polarity}).json()
    mask = rle_decode(resp["mask"])
    region = resp["region"]
    box = (f"box {region['height']}x{region['width']} at "
           f"({region['top']},{region['left']})" if region else "no zoom")
    print(f"  step {resp['step']}: {polarity:8s} ({row:3d},{col:3d})  "
          f"mask {int(mask.sum()):5d} px  IoU {resp['iou']:.3f}  {box}")

undone = client.post(f"/sessions/{sid}/undo").json()
print(f"undo -> step {undone['step']}")
client.delete(f"/sessions/{sid}")
print("session deleted")
