"""Sparse click-to-pixel feature propagation.

Two residual graph blocks move information from the M clicked locations to
all N = H*W positions of a feature map in O(M*N):

* ``sgm_forward`` augments a semantic feature map: each location receives a
  softmax-weighted sum of transformed click features, added residually.
* ``hsgm_forward`` runs at higher resolution: it first fuses the low-level
  map with the upsampled sparse-graph output, then passes messages between
  fused click features and all locations, with attention computed purely on
  the upsampled semantic features so that low-level texture cannot corrupt
  the affinities.

``dense_nonlocal_oracle`` is the quadratic fully-connected counterpart used
for equivalence testing and for the scaling benchmark; restricted to the
click columns it must match ``sgm_forward`` to 1e-9.

Attention normalizes over the M clicks only.  Logits are max-subtracted
before exponentiation (softmax is unchanged); entries are strictly
positive up to float64 underflow, which needs a logit gap beyond ~745.
Clicks of both polarities share one attention pool; optionally a learned
per-polarity embedding is added to the key features before the key
transform (disable by leaving ``polarity_embed`` unset to get the plain
residual message-passing rule).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Sequence, TYPE_CHECKING

import numpy as np

from .autodiff import (
    Tensor, add, bias_add, concat, gather_rows, matmul, relu, reshape,
    softmax_rows, transpose,
)
from .errors import DimensionError, EmptyClickSetError

if TYPE_CHECKING:
    from .clicks import Click

Array = np.ndarray


# ---------------------------------------------------------------------------
# Parameters and click index sets
# ---------------------------------------------------------------------------

@dataclass
class SgmParams:
    """Weights of the sparse graph block on a C-channel map.

    w_c transforms click messages, theta/phi are the attention query/key
    transforms.  polarity_embed, when present, is a (2, C) table (row 0 =
    negative, row 1 = positive) added to click key features.
    """

    w_c: Tensor
    theta: Tensor
    phi: Tensor
    polarity_embed: Tensor | None = None

    def __post_init__(self):
        c = self.w_c.shape[0]
        for name, t in (("w_c", self.w_c), ("theta", self.theta), ("phi", self.phi)):
            if t.shape != (c, c):
                raise DimensionError(f"SgmParams.{name}: expected ({c}, {c}), got {t.shape}")
        if self.polarity_embed is not None and self.polarity_embed.shape != (2, c):
            raise DimensionError(
                f"SgmParams.polarity_embed: expected (2, {c}), got {self.polarity_embed.shape}")

    @property
    def channels(self) -> int:
        return self.w_c.shape[0]

    def named(self, prefix: str = "sgm") -> dict[str, Tensor]:
        out = {f"{prefix}.w_c": self.w_c, f"{prefix}.theta": self.theta,
               f"{prefix}.phi": self.phi}
        if self.polarity_embed is not None:
            out[f"{prefix}.pol"] = self.polarity_embed
        return out


@dataclass
class HsgmParams:
    """Weights of the high-resolution sparse graph block.

    sigma_w/sigma_b realize the fusion transform (a 1x1 conv + relu over
    the channel-concatenated [low-level, upsampled] features, mapping
    c_low + c_high -> c_low).  w_f transforms fused click messages;
    theta_g/phi_g are attention transforms over the upsampled features.
    """

    sigma_w: Tensor      # (c_low, c_low + c_high)
    sigma_b: Tensor      # (c_low,)
    w_f: Tensor          # (c_low, c_low)
    theta_g: Tensor      # (c_high, c_high)
    phi_g: Tensor        # (c_high, c_high)
    polarity_embed: Tensor | None = None   # (2, c_high)

    def __post_init__(self):
        c_low = self.w_f.shape[0]
        c_high = self.theta_g.shape[0]
        if self.sigma_w.shape != (c_low, c_low + c_high):
            raise DimensionError(
                f"HsgmParams.sigma_w: expected ({c_low}, {c_low + c_high}), got {self.sigma_w.shape}")
        if self.sigma_b.shape != (c_low,):
            raise DimensionError(f"HsgmParams.sigma_b: expected ({c_low},), got {self.sigma_b.shape}")
        if self.w_f.shape != (c_low, c_low):
            raise DimensionError(f"HsgmParams.w_f: expected square, got {self.w_f.shape}")
        for name, t in (("theta_g", self.theta_g), ("phi_g", self.phi_g)):
            if t.shape != (c_high, c_high):
                raise DimensionError(f"HsgmParams.{name}: expected ({c_high}, {c_high}), got {t.shape}")
        if self.polarity_embed is not None and self.polarity_embed.shape != (2, c_high):
            raise DimensionError("HsgmParams.polarity_embed: expected (2, c_high)")

    def named(self, prefix: str = "hsgm") -> dict[str, Tensor]:
        out = {f"{prefix}.sigma_w": self.sigma_w, f"{prefix}.sigma_b": self.sigma_b,
               f"{prefix}.w_f": self.w_f, f"{prefix}.theta_g": self.theta_g,
               f"{prefix}.phi_g": self.phi_g}
        if self.polarity_embed is not None:
            out[f"{prefix}.pol"] = self.polarity_embed
        return out


@dataclass(frozen=True)
class ClickIndexSet:
    """Flat feature-grid indices of the clicks, deduplicated.

    Pixel clicks are mapped onto a stride-s grid by floor division; when
    several clicks land in the same cell only the first is kept (a
    duplicated key would double-count one message under the softmax).
    """

    indices: tuple[int, ...]
    polarities: tuple[int, ...]   # 1 = positive, 0 = negative

    def __post_init__(self):
        if len(self.indices) != len(self.polarities):
            raise DimensionError("ClickIndexSet: indices and polarities differ in length")

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def from_flat(cls, indices: Sequence[int], polarities: Sequence[int],
                  grid_size: int) -> "ClickIndexSet":
        seen = set()
        idx, pol = [], []
        for i, p in zip(indices, polarities):
            i = int(i)
            if not 0 <= i < grid_size:
                raise ValueError(f"click index {i} outside grid of {grid_size} cells")
            if i in seen:
                continue
            seen.add(i)
            idx.append(i)
            pol.append(int(bool(p)))
        return cls(tuple(idx), tuple(pol))

    @classmethod
    def from_clicks(cls, clicks: Sequence["Click"], stride: int,
                    grid_h: int, grid_w: int) -> "ClickIndexSet":
        flat, pol = [], []
        for c in clicks:
            r = min(c.row // stride, grid_h - 1)
            q = min(c.col // stride, grid_w - 1)
            flat.append(r * grid_w + q)
            pol.append(1 if c.positive else 0)
        return cls.from_flat(flat, pol, grid_h * grid_w)


# ---------------------------------------------------------------------------
# Forward passes (differentiable)
# ---------------------------------------------------------------------------

def _to_rows(f: Tensor) -> Tensor:
    """CxHxW -> (H*W)xC."""
    c, h, w = f.shape
    return transpose(reshape(f, (c, h * w)))


def _to_map(rows: Tensor, shape: tuple[int, int, int]) -> Tensor:
    c, h, w = shape
    return reshape(transpose(rows), (c, h, w))


def _click_keys(feat_rows: Tensor, clicks: ClickIndexSet,
                polarity_embed: Tensor | None) -> Tensor:
    fu = gather_rows(feat_rows, clicks.indices)
    if polarity_embed is None:
        return fu
    emb = gather_rows(polarity_embed, clicks.polarities)
    return add(fu, emb)


def _attention_rows(feat_rows: Tensor, key_feat_rows: Tensor,
                    theta: Tensor, phi: Tensor) -> Tensor:
    q = matmul(feat_rows, transpose(theta))
    k = matmul(key_feat_rows, transpose(phi))
    return softmax_rows(matmul(q, transpose(k)))


def sgm_attention(f: Tensor, clicks: ClickIndexSet, p: SgmParams) -> Tensor:
    """(H*W, M) attention from every location to each click; rows sum to 1."""
    if len(clicks) == 0:
        raise EmptyClickSetError("sgm_attention needs at least one click")
    _check_grid(f, clicks, p.channels, "sgm_attention")
    rows = _to_rows(f)
    keys = _click_keys(rows, clicks, p.polarity_embed)
    return _attention_rows(rows, keys, p.theta, p.phi)


def sgm_forward(f: Tensor, clicks: ClickIndexSet, p: SgmParams) -> Tensor:
    """Residual sparse message passing over a CxHxW map.

    Every location is moved toward the transformed click features, weighted
    by attention; with no clicks the map passes through unchanged (the
    message sum is empty).
    """
    if len(clicks) == 0:
        return f
    _check_grid(f, clicks, p.channels, "sgm_forward")
    rows = _to_rows(f)
    fu = gather_rows(rows, clicks.indices)
    keys = fu if p.polarity_embed is None else add(fu, gather_rows(p.polarity_embed, clicks.polarities))
    att = _attention_rows(rows, keys, p.theta, p.phi)
    messages = matmul(fu, p.w_c)                  # rows are W_c^T f_u
    out_rows = add(rows, matmul(att, messages))
    return _to_map(out_rows, f.shape)


def hsgm_forward(f_low: Tensor, g_up: Tensor, clicks: ClickIndexSet,
                 p: HsgmParams) -> Tensor:
    """High-resolution fusion + sparse message passing.

    f_low is the c_low-channel low-level map, g_up the c_high-channel
    upsampled sparse-graph output on the same grid (upsampling is the
    caller's duty).  Fusion applies the 1x1-conv + relu transform to the
    channel concatenation; messages carry the *fused* click features while
    attention is computed on g_up alone.
    """
    if f_low.shape[1:] != g_up.shape[1:]:
        raise DimensionError(
            f"hsgm_forward: spatial grids differ, {f_low.shape[1:]} vs {g_up.shape[1:]}")
    low_rows = _to_rows(f_low)
    g_rows = _to_rows(g_up)
    fused = relu(bias_add(matmul(concat([low_rows, g_rows], axis=1),
                                 transpose(p.sigma_w)), p.sigma_b))
    out_shape = (p.w_f.shape[0], f_low.shape[1], f_low.shape[2])
    if len(clicks) == 0:
        return _to_map(fused, out_shape)
    _check_grid(g_up, clicks, p.theta_g.shape[0], "hsgm_forward")
    keys = _click_keys(g_rows, clicks, p.polarity_embed)
    att = _attention_rows(g_rows, keys, p.theta_g, p.phi_g)
    messages = matmul(gather_rows(fused, clicks.indices), p.w_f)
    return _to_map(add(fused, matmul(att, messages)), out_shape)


def _check_grid(f: Tensor, clicks: ClickIndexSet, channels: int, op: str) -> None:
    c, h, w = f.shape
    if c != channels:
        raise DimensionError(f"{op}: map has {c} channels, params expect {channels}")
    n = h * w
    for i in clicks.indices:
        if not 0 <= i < n:
            raise ValueError(f"{op}: click index {i} outside {h}x{w} grid")


# ---------------------------------------------------------------------------
# Dense non-local oracle (numpy only; quadratic in N)
# ---------------------------------------------------------------------------

def dense_nonlocal_oracle(f: Array, p: SgmParams,
                          restrict_cols: ClickIndexSet | None = None,
                          block: int = 4096) -> Array:
    """Fully-connected non-local update of a CxHxW array.

    Attention keys/values run over all N locations, or over the given
    column subset, in which case the result must agree with
    ``sgm_forward`` (same key embedding rules apply).  Row blocks bound
    memory to O(block * N).
    """
    c, h, w = f.shape
    rows = f.reshape(c, h * w).T                           # (N, C)
    if restrict_cols is None:
        key_feats = rows
        values = rows @ p.w_c.data
    else:
        if len(restrict_cols) == 0:
            return f.copy()
        idx = np.asarray(restrict_cols.indices, dtype=np.intp)
        sel = rows[idx]
        key_feats = sel
        if p.polarity_embed is not None:
            key_feats = sel + p.polarity_embed.data[np.asarray(restrict_cols.polarities, dtype=np.intp)]
        values = sel @ p.w_c.data
    keys = key_feats @ p.phi.data.T                        # (K, C)
    out = np.empty_like(rows)
    for start in range(0, rows.shape[0], block):
        stop = min(start + block, rows.shape[0])
        q = rows[start:stop] @ p.theta.data.T
        logits = q @ keys.T
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        att = e / e.sum(axis=1, keepdims=True)
        out[start:stop] = rows[start:stop] + att @ values
    return out.T.reshape(c, h, w)


# ---------------------------------------------------------------------------
# Scaling benchmark: sparse O(MN) versus dense O(N^2)
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkRow:
    n: int
    m: int
    c: int
    sparse_ms: float
    dense_ms: float | None


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    sparse_slope: float
    dense_slope: float | None
    runs: int

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("n,m,c,sparse_ms,dense_ms\n")
            for r in self.rows:
                dense = "" if r.dense_ms is None else f"{r.dense_ms:.6f}"
                fh.write(f"{r.n},{r.m},{r.c},{r.sparse_ms:.6f},{dense}\n")

    def to_json(self, path) -> None:
        payload = {
            "runs": self.runs,
            "log_log_slopes": {"sparse": self.sparse_slope, "dense": self.dense_slope},
            "points": [
                {"n": r.n, "m": r.m, "c": r.c,
                 "sparse_ms": r.sparse_ms, "dense_ms": r.dense_ms}
                for r in self.rows
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    def doubling_ratio(self, which: str = "sparse") -> float:
        """Time ratio for the largest consecutive size doubling that has
        both endpoints measured."""
        pts = [(r.n, r.sparse_ms if which == "sparse" else r.dense_ms)
               for r in self.rows]
        pts = [(n, t) for n, t in pts if t is not None]
        for (n0, t0), (n1, t1) in zip(reversed(pts[:-1]), reversed(pts[1:])):
            if n1 == 2 * n0:
                return t1 / t0
        raise ValueError(f"no consecutive doubling pair measured for {which}")


def benchmark_scaling(c: int, m: int, sizes: Sequence[int], runs: int = 10,
                      warmup: int = 2, dense_limit: int | None = None,
                      seed: int = 0) -> BenchmarkReport:
    """Median wall-clock of sparse vs dense propagation per grid size.

    sizes must be ascending; each N is laid out as a 1xN grid (the math
    only sees the flattened length).  BLAS is pinned to one thread during
    timing so the slope is not distorted by threshold-triggered threading.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be sorted ascending")
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    theta = Tensor(rng.standard_normal((c, c)) / np.sqrt(c))
    phi = Tensor(rng.standard_normal((c, c)) / np.sqrt(c))
    w_c = Tensor(rng.standard_normal((c, c)) / np.sqrt(c))
    params = SgmParams(w_c=w_c, theta=theta, phi=phi)

    rows: list[BenchmarkRow] = []
    with threadpool_limits(limits=1):
        for n in sizes:
            f = Tensor(rng.standard_normal((c, 1, n)))
            if m > 0:
                idx = rng.choice(n, size=m, replace=False)
                clicks = ClickIndexSet.from_flat(idx, [1] * m, n)
            else:
                clicks = ClickIndexSet((), ())
            sparse_ms = _time_median(lambda: sgm_forward(f, clicks, params),
                                     runs, warmup)
            dense_ms = None
            if dense_limit is None or n <= dense_limit:
                dense_ms = _time_median(
                    lambda: dense_nonlocal_oracle(f.data, params), runs, warmup)
            rows.append(BenchmarkRow(n=n, m=m, c=c,
                                     sparse_ms=sparse_ms, dense_ms=dense_ms))

    sparse_slope = _loglog_slope([(r.n, r.sparse_ms) for r in rows])
    dense_pts = [(r.n, r.dense_ms) for r in rows if r.dense_ms is not None]
    dense_slope = _loglog_slope(dense_pts) if len(dense_pts) >= 2 else None
    return BenchmarkReport(rows=rows, sparse_slope=sparse_slope,
                           dense_slope=dense_slope, runs=runs)


def _time_median(fn, runs: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def _loglog_slope(points: list[tuple[int, float]]) -> float:
    xs = np.log([p[0] for p in points])
    ys = np.log([max(p[1], 1e-9) for p in points])
    return float(np.polyfit(xs, ys, 1)[0])
