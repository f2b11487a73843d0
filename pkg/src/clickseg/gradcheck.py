"""Central finite-difference validation of analytic gradients.

Every differentiable op has a registered check that builds a random small
instance, reduces the op output to a scalar through a fixed random probe,
and compares each analytic input gradient against central differences with
step 1e-5.  Large parameter sets (the full model) are spot-checked on a
random coordinate subset per tensor; small ops check every coordinate.

The relative error uses a 1e-6 floor on the denominator so the 0/0 case of
genuinely zero gradients does not produce spurious failures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape, backward

Array = np.ndarray

FD_STEP = 1e-5
REL_TOL = 1e-4


def max_rel_error(analytic: Array, numeric: Array) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max())


def fd_gradients(fn: Callable[[], Tensor], t: Tensor,
                 coords: Sequence[int] | None = None, step: float = FD_STEP) -> tuple[Array, Array]:
    """(analytic, numeric) gradients of scalar fn() w.r.t. t at the given
    flat coordinates (all coordinates when None)."""
    t.requires_grad = True
    t.grad = None
    tape = Tape()
    with tape:
        loss = fn()
    backward(loss, tape)
    analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
    if coords is None:
        coords = range(t.data.size)
    coords = list(coords)
    numeric = np.empty(len(coords))
    flat = t.data.reshape(-1)
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + step
        up = fn().item()
        flat[c] = orig - step
        down = fn().item()
        flat[c] = orig
        numeric[j] = (up - down) / (2.0 * step)
    analytic = analytic_full.reshape(-1)[coords]
    t.grad = None
    return analytic, numeric


def check_scalar_fn(fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                    coords_per_tensor: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Worst relative FD error of fn over all listed input tensors."""
    worst = 0.0
    for t in tensors.values():
        if coords_per_tensor is None or t.data.size <= coords_per_tensor:
            coords = None
        else:
            coords = (rng or np.random.default_rng(0)).choice(
                t.data.size, size=coords_per_tensor, replace=False)
        analytic, numeric = fd_gradients(fn, t, coords)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _probe(shape) -> Array:
    # Fixed pseudo-random probe so multi-output ops reduce to one scalar.
    rng = np.random.default_rng(12345)
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# Instance builders, one per checked op
# ---------------------------------------------------------------------------

def _check_elementwise(rng, op, positive=False):
    a = Tensor(rng.uniform(0.2, 2.0, (4, 5)) if positive else rng.standard_normal((4, 5)))
    b = Tensor(rng.uniform(0.5, 2.0, (4, 5)))
    w = _probe((4, 5))

    def fn():
        return ad.sum_all(op(a, b) * w)

    return check_scalar_fn(fn, {"a": a, "b": b})


def _check_unary(rng, op, low=None, high=None):
    if low is not None:
        a = Tensor(rng.uniform(low, high, (3, 6)))
    else:
        a = Tensor(rng.standard_normal((3, 6)) + 0.05)   # keep off the relu kink
    w = _probe((3, 6))

    def fn():
        return ad.sum_all(op(a) * w)

    return check_scalar_fn(fn, {"a": a})


def check_conv2d(rng, stride=1, dilation=1, pad=1, cin=2, cout=3, k=3, h=6, w=7):
    x = Tensor(rng.standard_normal((cin, h, w)))
    kern = Tensor(rng.standard_normal((cout, cin, k, k)) * 0.5)
    hc = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    wc = (w + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    probe = _probe((cout, hc, wc))

    def fn():
        return ad.sum_all(ad.conv2d(x, kern, stride=stride, dilation=dilation, pad=pad) * probe)

    return check_scalar_fn(fn, {"x": x, "k": kern})


def check_upsample(rng, factor=2):
    x = Tensor(rng.standard_normal((2, 3, 4)))
    probe = _probe((2, 3 * factor, 4 * factor))

    def fn():
        return ad.sum_all(ad.bilinear_upsample(x, factor) * probe)

    return check_scalar_fn(fn, {"x": x})


def check_sgm(rng):
    from .graph import ClickIndexSet, SgmParams, sgm_forward
    c, h, w = 4, 3, 4
    f = Tensor(rng.standard_normal((c, h, w)))
    p = SgmParams(w_c=Tensor(rng.standard_normal((c, c)) * 0.5),
                  theta=Tensor(rng.standard_normal((c, c)) * 0.5),
                  phi=Tensor(rng.standard_normal((c, c)) * 0.5),
                  polarity_embed=Tensor(rng.standard_normal((2, c)) * 0.3))
    clicks = ClickIndexSet.from_flat([1, 7, 10], [1, 0, 1], h * w)
    probe = _probe((c, h, w))

    def fn():
        return ad.sum_all(sgm_forward(f, clicks, p) * probe)

    return check_scalar_fn(fn, {"f": f, **{k: v for k, v in p.named().items()}})


def check_hsgm(rng):
    from .graph import ClickIndexSet, HsgmParams, hsgm_forward
    cl, ch, h, w = 3, 4, 4, 4
    f_low = Tensor(rng.standard_normal((cl, h, w)))
    g_up = Tensor(rng.standard_normal((ch, h, w)))
    p = HsgmParams(sigma_w=Tensor(rng.standard_normal((cl, cl + ch)) * 0.5),
                   sigma_b=Tensor(rng.standard_normal(cl) * 0.2),
                   w_f=Tensor(rng.standard_normal((cl, cl)) * 0.5),
                   theta_g=Tensor(rng.standard_normal((ch, ch)) * 0.5),
                   phi_g=Tensor(rng.standard_normal((ch, ch)) * 0.5),
                   polarity_embed=Tensor(rng.standard_normal((2, ch)) * 0.3))
    clicks = ClickIndexSet.from_flat([2, 9], [1, 0], h * w)
    probe = _probe((cl, h, w))

    def fn():
        return ad.sum_all(hsgm_forward(f_low, g_up, clicks, p) * probe)

    return check_scalar_fn(fn, {"f_low": f_low, "g_up": g_up, **p.named()})


def check_nfl(rng, gamma=2.0):
    from .model import nfl_loss
    p = Tensor(rng.uniform(0.05, 0.95, (5, 6)))
    y = rng.random((5, 6)) > 0.5

    def fn():
        return nfl_loss(p, y, gamma)

    return check_scalar_fn(fn, {"p": p})


def check_full_model(rng, coords_per_tensor=4):
    """Forward + loss through every parameter group of the default net."""
    from .clicks import Click, encode_clicks
    from .model import ArchConfig, EncodedInput, forward, init_params, nfl_loss
    h, w = 16, 24
    params = init_params(ArchConfig(), seed=int(rng.integers(0, 2 ** 31)))
    image = rng.random((3, h, w))
    prev = rng.random((h, w))
    clicks = [Click(4, 6, True, 1), Click(12, 18, False, 2)]
    guidance = encode_clicks(clicks, h, w, radius=2)
    x = EncodedInput(image=image, guidance=guidance, prev_prob=prev)
    y = rng.random((h, w)) > 0.5

    def fn():
        return nfl_loss(forward(x, clicks, params), y, gamma=2.0)

    return check_scalar_fn(fn, params.tensors, coords_per_tensor=coords_per_tensor, rng=rng)


def check_softmax(rng):
    a = Tensor(rng.standard_normal((5, 4)))
    probe = _probe((5, 4))

    def fn():
        return ad.sum_all(ad.softmax_rows(a) * probe)

    return check_scalar_fn(fn, {"a": a})


def check_matmul(rng):
    a = Tensor(rng.standard_normal((4, 3)))
    b = Tensor(rng.standard_normal((3, 5)))
    probe = _probe((4, 5))

    def fn():
        return ad.sum_all(ad.matmul(a, b) * probe)

    return check_scalar_fn(fn, {"a": a, "b": b})


def check_concat(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)))
    b = Tensor(rng.standard_normal((3, 3, 4)))
    probe = _probe((5, 3, 4))

    def fn():
        return ad.sum_all(ad.concat([a, b], axis=0) * probe)

    return check_scalar_fn(fn, {"a": a, "b": b})


def check_gather(rng):
    a = Tensor(rng.standard_normal((6, 3)))
    idx = [0, 4, 4, 2]   # duplicates must scatter-add
    probe = _probe((4, 3))

    def fn():
        return ad.sum_all(ad.gather_rows(a, idx) * probe)

    return check_scalar_fn(fn, {"a": a})


def check_channel_sum(rng):
    x = Tensor(rng.standard_normal((4, 3, 5)))
    probe = _probe((3, 5))

    def fn():
        return ad.sum_all(ad.channel_sum(x) * probe)

    return check_scalar_fn(fn, {"x": x})


def check_bias_add(rng, rank):
    if rank == 3:
        x = Tensor(rng.standard_normal((3, 4, 5)))
        b = Tensor(rng.standard_normal(3))
        probe = _probe((3, 4, 5))
    else:
        x = Tensor(rng.standard_normal((6, 4)))
        b = Tensor(rng.standard_normal(4))
        probe = _probe((6, 4))

    def fn():
        return ad.sum_all(ad.bias_add(x, b) * probe)

    return check_scalar_fn(fn, {"x": x, "b": b})


@dataclass
class CheckResult:
    name: str
    max_err: float
    instances: int

    @property
    def ok(self) -> bool:
        return self.max_err < REL_TOL


# name -> single-instance callable(rng) -> max rel error
CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "add": lambda rng: _check_elementwise(rng, ad.add),
    "sub": lambda rng: _check_elementwise(rng, ad.sub),
    "mul": lambda rng: _check_elementwise(rng, ad.mul),
    "div": lambda rng: _check_elementwise(rng, ad.div),
    "relu": lambda rng: _check_unary(rng, ad.relu),
    "sigmoid": lambda rng: _check_unary(rng, ad.sigmoid),
    "log": lambda rng: _check_unary(rng, ad.log, low=0.2, high=3.0),
    "pow": lambda rng: _check_unary(rng, lambda t: ad.pow_const(t, 2.5), low=0.2, high=2.0),
    "clamp_min": lambda rng: _check_unary(rng, lambda t: ad.clamp_min(t, 0.5), low=0.6, high=2.0),
    "matmul": check_matmul,
    "softmax_rows": check_softmax,
    "concat": check_concat,
    "gather_rows": check_gather,
    "bias_add_chw": lambda rng: check_bias_add(rng, 3),
    "bias_add_rows": lambda rng: check_bias_add(rng, 2),
    "sum": lambda rng: _check_unary(rng, lambda t: t * 1.0),
    "channel_sum": check_channel_sum,
    "conv2d": check_conv2d,
    "conv2d_stride2": lambda rng: check_conv2d(rng, stride=2),
    "conv2d_dilated": lambda rng: check_conv2d(rng, dilation=2, pad=2),
    "conv2d_1x1": lambda rng: check_conv2d(rng, k=1, pad=0),
    "upsample_x2": check_upsample,
    "upsample_x3": lambda rng: check_upsample(rng, factor=3),
    "sgm_forward": check_sgm,
    "hsgm_forward": check_hsgm,
    "nfl_loss": check_nfl,
    "nfl_loss_gamma0": lambda rng: check_nfl(rng, gamma=0.0),
    "full_model": check_full_model,
}


def run_suite(seed: int = 0, instances: int = 20,
              ops: Sequence[str] | None = None,
              full_model_instances: int = 3) -> list[CheckResult]:
    """Run every registered check.  The full-model check is heavier, so it
    runs fewer instances (random-coordinate spot checks per tensor); all
    other ops run ``instances`` fresh random instances each."""
    import zlib
    names = list(CHECKS) if ops is None else list(ops)
    results = []
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown gradcheck op '{name}'")
        rng = np.random.default_rng(seed + zlib.crc32(name.encode()))
        n = full_model_instances if name == "full_model" else instances
        worst = 0.0
        for _ in range(n):
            worst = max(worst, CHECKS[name](rng))
        results.append(CheckResult(name=name, max_err=worst, instances=n))
    return results
