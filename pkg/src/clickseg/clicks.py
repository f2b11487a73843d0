"""Click representation, disk-encoded guidance maps, and the simulated
annotator.

The simulated user always corrects the largest error region, clicking its
deepest interior point: the pixel maximizing Euclidean distance to the
region's complement.  Out-of-image pixels count as complement (the region
mask is padded with one background ring before the distance transform), so
the rule stays total for regions touching the border.  The deepest point is
always inside the region, unlike a centroid, which can fall outside a
concave region.  All ties break lexicographically by (row, col) so the
simulator is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence, TYPE_CHECKING

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionError, NoErrorPixelsError, OutOfBoundsClickError,
)

if TYPE_CHECKING:
    from .cascade import ZoomRegion

Array = np.ndarray

FALSE_NEGATIVE = "false_negative"
FALSE_POSITIVE = "false_positive"

# 4-connectivity for error components.
_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class Click:
    """One user annotation: a pixel plus its polarity and 1-based step."""

    row: int
    col: int
    positive: bool
    step: int

    @property
    def polarity(self) -> str:
        return "positive" if self.positive else "negative"


def clicks_to_json(clicks: Sequence[Click]) -> list[dict]:
    return [{"row": c.row, "col": c.col, "polarity": c.polarity, "step": c.step}
            for c in clicks]


def clicks_from_json(data: Iterable[dict]) -> list[Click]:
    return [Click(row=int(d["row"]), col=int(d["col"]),
                  positive=(d["polarity"] == "positive"), step=int(d["step"]))
            for d in data]


@dataclass(frozen=True)
class GuidanceMaps:
    """Binary disk heatmaps, one per polarity, image sized."""

    pos: Array
    neg: Array


def encode_clicks(clicks: Sequence[Click], h: int, w: int,
                  radius: int = 5) -> GuidanceMaps:
    """Stamp a radius-r binary disk around every click.

    A pixel is set iff its Euclidean distance to some click of that
    polarity is <= radius; disks are clipped at the image border.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    pos = np.zeros((h, w), dtype=np.float64)
    neg = np.zeros((h, w), dtype=np.float64)
    for c in clicks:
        if not (0 <= c.row < h and 0 <= c.col < w):
            raise OutOfBoundsClickError(
                f"click at ({c.row}, {c.col}) outside {h}x{w} image")
        _stamp_disk(pos if c.positive else neg, c.row, c.col, radius)
    return GuidanceMaps(pos=pos, neg=neg)


def _stamp_disk(target: Array, row: int, col: int, radius: int) -> None:
    h, w = target.shape
    r0, r1 = max(0, row - radius), min(h, row + radius + 1)
    c0, c1 = max(0, col - radius), min(w, col + radius + 1)
    yy, xx = np.ogrid[r0:r1, c0:c1]
    disk = (yy - row) ** 2 + (xx - col) ** 2 <= radius * radius
    target[r0:r1, c0:c1][disk] = 1.0


# ---------------------------------------------------------------------------
# Error regions and the simulated annotator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorRegion:
    kind: str          # FALSE_NEGATIVE or FALSE_POSITIVE
    mask: Array        # bool, image sized
    size: int
    bbox_top: int
    bbox_left: int


def error_regions(pred: Array, gt: Array) -> list[ErrorRegion]:
    """4-connected components of pred XOR gt, one polarity per component,
    sorted by size descending (ties: smallest bounding-box top-left)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(
            f"error_regions: mask shapes differ, {pred.shape} vs {gt.shape}")
    regions: list[ErrorRegion] = []
    for kind, mask in ((FALSE_NEGATIVE, gt & ~pred), (FALSE_POSITIVE, pred & ~gt)):
        labels, count = ndimage.label(mask, structure=_CONN4)
        for i in range(1, count + 1):
            comp = labels == i
            rows, cols = np.nonzero(comp)
            regions.append(ErrorRegion(kind=kind, mask=comp, size=rows.size,
                                       bbox_top=int(rows.min()),
                                       bbox_left=int(cols.min())))
    regions.sort(key=lambda r: (-r.size, r.bbox_top, r.bbox_left))
    return regions


def interior_depth(mask: Array) -> Array:
    """Per-pixel Euclidean distance to the mask complement, counting
    out-of-image pixels as complement."""
    padded = np.pad(np.asarray(mask, dtype=bool), 1)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def simulate_next_click(pred: Array, gt: Array,
                        existing: Sequence[Click]) -> Click:
    """Place the next corrective click.

    Picks the largest error component and its deepest interior pixel;
    positive for a missed-foreground component, negative for spurious
    foreground.  Pixels already clicked are skipped (next-best depth,
    falling through to smaller components if a component is exhausted).
    """
    regions = error_regions(pred, gt)
    if not regions:
        raise NoErrorPixelsError("prediction matches ground truth")
    used = {(c.row, c.col) for c in existing}
    step = len(existing) + 1
    for region in regions:
        depth = interior_depth(region.mask)
        rows, cols = np.nonzero(region.mask)
        order = np.lexsort((cols, rows, -depth[rows, cols]))
        for k in order:
            r, c = int(rows[k]), int(cols[k])
            if (r, c) not in used:
                return Click(row=r, col=c,
                             positive=(region.kind == FALSE_NEGATIVE), step=step)
    raise NoErrorPixelsError("every error pixel has already been clicked")


# ---------------------------------------------------------------------------
# Click coordinate mapping into zoom crops
# ---------------------------------------------------------------------------

def map_clicks_to_crop(clicks: Sequence[Click],
                       region: "ZoomRegion") -> tuple[list[Click], list[Click]]:
    """Affine-map clicks into crop pixel coordinates.

    Returns (kept, dropped): clicks outside the source rectangle are
    dropped.  Mapping follows the corner-aligned resize convention (source
    rectangle corners land on crop corners), rounded to the nearest crop
    pixel.
    """
    kept: list[Click] = []
    dropped: list[Click] = []
    rs = (region.target_h - 1) / (region.height - 1) if region.height > 1 else 0.0
    cs = (region.target_w - 1) / (region.width - 1) if region.width > 1 else 0.0
    for c in clicks:
        if not (region.top <= c.row < region.top + region.height
                and region.left <= c.col < region.left + region.width):
            dropped.append(c)
            continue
        nr = int(round((c.row - region.top) * rs))
        nc = int(round((c.col - region.left) * cs))
        kept.append(replace(c, row=min(nr, region.target_h - 1),
                            col=min(nc, region.target_w - 1)))
    return kept, dropped
