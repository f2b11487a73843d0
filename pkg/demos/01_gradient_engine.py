"""Tour of the float64 tape engine: ops, gradients, Adam, checkpoints.

Run: python3 demos/01_gradient_engine.py
"""

import numpy as np

from clickseg.autodiff import (
    AdamState, Tape, Tensor, adam_step, backward, bilinear_upsample, conv2d,
    load_checkpoint, save_checkpoint, sigmoid, sum_all,
)
from clickseg.gradcheck import run_suite

rng = np.random.default_rng(0)

# --- forward + reverse through a tiny conv net -----------------------------
x = Tensor(rng.random((3, 8, 12)))
k1 = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.4, requires_grad=True)
k2 = Tensor(rng.standard_normal((1, 4, 3, 3)) * 0.4, requires_grad=True)

tape = Tape()
with tape:
    h = sigmoid(conv2d(x, k1, pad=1))
    up = bilinear_upsample(h, 2)
    y = conv2d(up, k2, pad=1)
    loss = sum_all(y * y)
backward(loss, tape)
print(f"loss {loss.item():.4f}   |dL/dk1| {np.abs(k1.grad).sum():.4f}   "
      f"|dL/dk2| {np.abs(k2.grad).sum():.4f}")

# --- finite differences agree with the analytic gradients -------------------
results = run_suite(seed=0, instances=2,
                    ops=["conv2d", "upsample_x2", "sigmoid", "softmax_rows"])
for r in results:
    print(f"  fd-check {r.name:14s} max rel err {r.max_err:.2e}")

# --- Adam walks a quadratic to its minimum ----------------------------------
p = Tensor(np.array([0.0]), requires_grad=True)
state = AdamState()
for _ in range(500):
    p.grad = 2.0 * (p.data - 3.0)
    adam_step({"p": p}, state, lr=0.1)
print(f"argmin of (x-3)^2 after 500 Adam steps: {p.data.item():.6f}")

# --- checkpoints round-trip bit-exactly -------------------------------------
import tempfile, pathlib
with tempfile.TemporaryDirectory() as d:
    path = pathlib.Path(d) / "weights.ckpt"
    save_checkpoint(path, {"k1": k1, "k2": k2})
    loaded = load_checkpoint(path)
    same = all(loaded[n].tobytes() == t.data.tobytes()
               for n, t in (("k1", k1), ("k2", k2)))
    print(f"checkpoint round trip bit-exact: {same}")
