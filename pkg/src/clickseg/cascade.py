"""Coarse-to-fine interactive step: full-frame prediction, adaptive
zoom-in, fine prediction on the crop, remap to the full image.

Per interaction the coarse network re-estimates the foreground on the whole
frame from (image, previous prediction, click maps); the binarized estimate
yields a bounding box that is expanded by an adaptive margin (small boxes
get proportionally more context), cropped, and resampled to a fixed
resolution for the fine network.  The fine output is resampled back into
the box; pixels outside keep the coarse values, preserving already-correct
background.  If the coarse estimate has no foreground at all there is
nothing to zoom into and the coarse prediction is the step output.

All resampling is corner-aligned bilinear (see ``autodiff``), which is what
makes the crop -> remap round trip approximately the identity on smooth
fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import linear_resample_matrix, resample_plane
from .clicks import Click, encode_clicks, map_clicks_to_crop
from .errors import (
    ContractError, DimensionError, DuplicateClickError, EmptyForegroundError,
    OutOfBoundsClickError,
)

Array = np.ndarray


@dataclass(frozen=True)
class ZoomRegion:
    """A source-image rectangle plus the resolution it is resampled to."""

    top: int
    left: int
    height: int
    width: int
    target_h: int
    target_w: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.target_h < 1 or self.target_w < 1:
            raise ValueError(f"degenerate zoom region {self}")

    def validate_inside(self, img_h: int, img_w: int) -> None:
        if (self.top < 0 or self.left < 0
                or self.top + self.height > img_h
                or self.left + self.width > img_w):
            raise ContractError(
                f"zoom region {self} exceeds {img_h}x{img_w} frame")

    def as_dict(self) -> dict:
        return {"top": self.top, "left": self.left, "height": self.height,
                "width": self.width, "target_h": self.target_h,
                "target_w": self.target_w}


@dataclass(frozen=True)
class CascadeConfig:
    """Zoom and click-encoding knobs (config keys under ``zoom.`` / ``click.``)."""

    zoom_threshold: float = 0.5
    margin_scale: float = 0.4
    margin_min: float = 0.1
    margin_max: float = 0.8
    target_h: int = 96
    target_w: int = 144
    click_radius: int = 5
    min_region_side: int = 8


@dataclass(frozen=True)
class SessionState:
    """One interactive episode: image, clicks so far, previous prediction."""

    image: Array                     # (3, H, W), values in [0, 1]
    clicks: tuple[Click, ...]
    prev_prob: Array                 # (H, W)
    step: int
    last_region: ZoomRegion | None = None

    @classmethod
    def new(cls, image: Array) -> "SessionState":
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"image must be 3xHxW, got {image.shape}")
        h, w = image.shape[1:]
        return cls(image=image, clicks=(), prev_prob=np.zeros((h, w)), step=0)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


def adaptive_box(p_c: Array, cfg: CascadeConfig) -> ZoomRegion:
    """Bounding box of the binarized coarse prediction, expanded by an
    adaptive margin.

    The margin factor is m = clamp(margin_scale * (1 - s), margin_min,
    margin_max) with s the box-to-image area fraction, so small boxes are
    expanded proportionally more; each side grows by round(m * max(box_h,
    box_w)) pixels and the result is clipped to the frame and grown to the
    minimum legal side length.
    """
    p_c = np.asarray(p_c)
    img_h, img_w = p_c.shape
    fg_rows, fg_cols = np.nonzero(p_c >= cfg.zoom_threshold)
    if fg_rows.size == 0:
        raise EmptyForegroundError("no pixel reaches the zoom threshold")
    top, bottom = int(fg_rows.min()), int(fg_rows.max())
    left, right = int(fg_cols.min()), int(fg_cols.max())
    box_h, box_w = bottom - top + 1, right - left + 1
    s = (box_h * box_w) / (img_h * img_w)
    m = float(np.clip(cfg.margin_scale * (1.0 - s), cfg.margin_min, cfg.margin_max))
    pad = int(round(m * max(box_h, box_w)))
    top, left = max(0, top - pad), max(0, left - pad)
    bottom, right = min(img_h - 1, bottom + pad), min(img_w - 1, right + pad)
    top, bottom = _grow_to_min(top, bottom, cfg.min_region_side, img_h)
    left, right = _grow_to_min(left, right, cfg.min_region_side, img_w)
    return ZoomRegion(top=top, left=left, height=bottom - top + 1,
                      width=right - left + 1,
                      target_h=cfg.target_h, target_w=cfg.target_w)


def adaptive_margin(s: float, cfg: CascadeConfig = CascadeConfig()) -> float:
    """The margin factor alone, exposed for monotonicity checks."""
    return float(np.clip(cfg.margin_scale * (1.0 - s), cfg.margin_min, cfg.margin_max))


def _grow_to_min(lo: int, hi: int, min_side: int, limit: int) -> tuple[int, int]:
    side = hi - lo + 1
    want = min(min_side, limit)
    while side < want:
        if lo > 0:
            lo -= 1
            side += 1
        if side < want and hi < limit - 1:
            hi += 1
            side += 1
        if lo == 0 and hi == limit - 1:
            break
    return lo, hi


def crop_resample(plane: Array, region: ZoomRegion) -> Array:
    """Resample one 2-D plane from the region rectangle to the target
    resolution (corner-aligned bilinear)."""
    rmat = linear_resample_matrix(region.target_h, plane.shape[0],
                                  lo=region.top, hi=region.top + region.height - 1)
    cmat = linear_resample_matrix(region.target_w, plane.shape[1],
                                  lo=region.left, hi=region.left + region.width - 1)
    return resample_plane(plane, rmat, cmat)


def crop_resample_nearest(mask: Array, region: ZoomRegion) -> Array:
    """Nearest-neighbor crop of a boolean mask onto the target grid (used
    for ground truth, which must stay binary)."""
    rows = np.linspace(region.top, region.top + region.height - 1,
                       region.target_h) if region.target_h > 1 else \
        np.array([region.top + (region.height - 1) / 2.0])
    cols = np.linspace(region.left, region.left + region.width - 1,
                       region.target_w) if region.target_w > 1 else \
        np.array([region.left + (region.width - 1) / 2.0])
    ri = np.clip(np.rint(rows).astype(int), 0, mask.shape[0] - 1)
    ci = np.clip(np.rint(cols).astype(int), 0, mask.shape[1] - 1)
    return np.asarray(mask)[np.ix_(ri, ci)]


def zoom_in(session: SessionState, p_c: Array,
            cfg: CascadeConfig) -> tuple[Array, Array, list[Click], ZoomRegion]:
    """Crop image, coarse probability and clicks into the adaptive region.

    Returns (crop_image 3xThxTw, crop_prob ThxTw, crop_clicks, region).
    Raises EmptyForegroundError when the coarse estimate has no foreground.
    """
    region = adaptive_box(p_c, cfg)
    crop_img = np.stack([crop_resample(ch, region) for ch in session.image])
    crop_prob = crop_resample(p_c, region)
    crop_clicks, _ = map_clicks_to_crop(session.clicks, region)
    return crop_img, crop_prob, crop_clicks, region


def remap_to_full(crop_prob: Array, region: ZoomRegion, full_h: int,
                  full_w: int, background: Array) -> Array:
    """Resample a crop prediction back into its source rectangle; pixels
    outside the rectangle keep the background (coarse) values."""
    crop_prob = np.asarray(crop_prob)
    if crop_prob.shape != (region.target_h, region.target_w):
        raise DimensionError(
            f"crop prediction {crop_prob.shape} does not match region target "
            f"{(region.target_h, region.target_w)}")
    region.validate_inside(full_h, full_w)
    rmat = linear_resample_matrix(region.height, region.target_h)
    cmat = linear_resample_matrix(region.width, region.target_w)
    out = np.array(background, dtype=np.float64, copy=True)
    out[region.top:region.top + region.height,
        region.left:region.left + region.width] = resample_plane(crop_prob, rmat, cmat)
    return out


# ---------------------------------------------------------------------------
# The per-click step
# ---------------------------------------------------------------------------

def _predict(params, x, clicks) -> Array:
    # Anything exposing predict_prob(x, clicks) can stand in for a network
    # (test stubs, calibration oracles); ModelParams go through the real
    # forward pass.
    if hasattr(params, "predict_prob"):
        return np.asarray(params.predict_prob(x, clicks), dtype=np.float64)
    from . import model as model_mod
    return model_mod.forward(x, clicks, params).data


def interactive_step(session: SessionState, new_click: Click, coarse,
                     fine=None, cfg: CascadeConfig = CascadeConfig()
                     ) -> tuple[Array, SessionState]:
    """Advance one interaction: full-frame coarse pass, adaptive zoom,
    fine pass on the crop, remap.

    ``coarse``/``fine`` are ModelParams (or any object with a
    ``predict_prob(x, clicks)`` method); with ``fine=None`` the coarse
    prediction is the step output (no zoom refinement).  When the coarse
    estimate has no foreground the step falls back to coarse-only as well.
    Returns (probability map, updated session).
    """
    from . import model as model_mod

    h, w = session.height, session.width
    if not (0 <= new_click.row < h and 0 <= new_click.col < w):
        raise OutOfBoundsClickError(
            f"click at ({new_click.row}, {new_click.col}) outside {h}x{w} frame")
    if any(c.row == new_click.row and c.col == new_click.col for c in session.clicks):
        raise DuplicateClickError(
            f"pixel ({new_click.row}, {new_click.col}) already clicked")
    clicks = session.clicks + (new_click,)

    guidance = encode_clicks(clicks, h, w, cfg.click_radius)
    x = model_mod.EncodedInput(image=session.image, guidance=guidance,
                               prev_prob=session.prev_prob)
    p_c = _predict(coarse, x, clicks)

    region = None
    p_t = p_c
    if fine is not None:
        try:
            crop_img, crop_prob, crop_clicks, region = zoom_in(
                replace(session, clicks=clicks), p_c, cfg)
            crop_guidance = encode_clicks(crop_clicks, region.target_h,
                                          region.target_w, cfg.click_radius)
            crop_x = model_mod.EncodedInput(image=crop_img, guidance=crop_guidance,
                                            prev_prob=crop_prob)
            p_f = _predict(fine, crop_x, crop_clicks)
            p_t = remap_to_full(p_f, region, h, w, background=p_c)
        except EmptyForegroundError:
            region = None
            p_t = p_c

    new_session = replace(session, clicks=clicks, prev_prob=p_t,
                          step=session.step + 1, last_region=region)
    return p_t, new_session


def strategy_step(session: SessionState, new_click: Click, first, second,
                  cfg: CascadeConfig, strategy: str = "coarse_to_fine"
                  ) -> tuple[Array, SessionState]:
    """One interaction under an alternative two-level strategy.

    coarse_to_fine   full-frame first pass, zoomed second pass (default).
    coarse_to_coarse both passes full frame: the second network refines the
                     first estimate without any zoom.
    fine_to_fine     both passes zoomed: the first zoom region comes from
                     the previous step's prediction (full frame when that
                     is empty), the second from the first pass's output.
    """
    from . import model as model_mod

    if strategy == "coarse_to_fine":
        return interactive_step(session, new_click, first, second, cfg)

    h, w = session.height, session.width
    if any(c.row == new_click.row and c.col == new_click.col for c in session.clicks):
        raise DuplicateClickError(
            f"pixel ({new_click.row}, {new_click.col}) already clicked")
    clicks = session.clicks + (new_click,)
    guidance = encode_clicks(clicks, h, w, cfg.click_radius)

    if strategy == "coarse_to_coarse":
        x = model_mod.EncodedInput(image=session.image, guidance=guidance,
                                   prev_prob=session.prev_prob)
        p_c = _predict(first, x, clicks)
        x2 = model_mod.EncodedInput(image=session.image, guidance=guidance,
                                    prev_prob=p_c)
        p_t = _predict(second, x2, clicks)
        new_session = replace(session, clicks=clicks, prev_prob=p_t,
                              step=session.step + 1, last_region=None)
        return p_t, new_session

    if strategy == "fine_to_fine":
        work = replace(session, clicks=clicks)
        # First level zooms from the previous prediction when possible.
        try:
            crop_img, crop_prob, crop_clicks, region1 = zoom_in(work, session.prev_prob, cfg)
            g1 = encode_clicks(crop_clicks, region1.target_h, region1.target_w,
                               cfg.click_radius)
            x1 = model_mod.EncodedInput(image=crop_img, guidance=g1, prev_prob=crop_prob)
            p1 = _predict(first, x1, crop_clicks)
            p1_full = remap_to_full(p1, region1, h, w,
                                    background=np.zeros((h, w)))
        except EmptyForegroundError:
            x1 = model_mod.EncodedInput(image=session.image, guidance=guidance,
                                        prev_prob=session.prev_prob)
            p1_full = _predict(first, x1, clicks)
        p_t = p1_full
        region2 = None
        try:
            crop_img, crop_prob, crop_clicks, region2 = zoom_in(work, p1_full, cfg)
            g2 = encode_clicks(crop_clicks, region2.target_h, region2.target_w,
                               cfg.click_radius)
            x2 = model_mod.EncodedInput(image=crop_img, guidance=g2, prev_prob=crop_prob)
            p2 = _predict(second, x2, crop_clicks)
            p_t = remap_to_full(p2, region2, h, w, background=p1_full)
        except EmptyForegroundError:
            pass
        new_session = replace(session, clicks=clicks, prev_prob=p_t,
                              step=session.step + 1, last_region=region2)
        return p_t, new_session

    raise ValueError(f"unknown strategy '{strategy}'")
