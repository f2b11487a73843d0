"""Robot-user evaluation: NoC/NoF, mIoU-per-click curves, click-count
histograms, and seconds-per-click timing.

Protocol per sample: start from zero clicks and a zero previous
prediction; each round the simulated annotator clicks the deepest point of
the largest error region, the cascade runs one interactive step, the
binarized output is scored against ground truth; stop when IoU reaches the
threshold or the click budget is exhausted.  Ground truth is consulted
only by the annotator and the IoU computation.

Conventions: failed samples are charged the full click budget in NoC (the
counting that makes capped-interaction averages comparable); mIoU curves
hold a sample's final IoU constant after its episode terminates.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cascade import CascadeConfig, SessionState, interactive_step, strategy_step
from .clicks import simulate_next_click
from .data import SyntheticScene
from .errors import DimensionError, NoErrorPixelsError

Array = np.ndarray

# Full-scale GPU pipeline numbers from the published evaluation, recorded
# for context only; they are not reachable nor asserted at toy scale.
REFERENCE_FULL_SCALE = {
    "noc20_at_90_davis_resnet101": 5.8,
    "davis_within_5_clicks_fraction": 0.713,
    "spc_seconds_titan_rtx_resnet50": 0.217,
}


@dataclass(frozen=True)
class EvalConfig:
    tau: float = 0.85
    max_clicks: int = 20
    binarize_threshold: float = 0.5
    strategy: str = "coarse_to_fine"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.max_clicks < 1:
            raise ValueError("max_clicks must be >= 1")


@dataclass
class EvalRecord:
    sample_id: str
    ious: list[float]
    clicks_used: int
    success: bool
    wall_ms: list[float]
    error: str | None = None

    def final_iou(self) -> float:
        return self.ious[-1] if self.ious else 0.0


def iou(pred: Array, gt: Array) -> float:
    """Intersection over union; two empty masks count as a perfect 1.0."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"iou: mask shapes differ, {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def evaluate(coarse, fine, scenes: Sequence[SyntheticScene], cfg: EvalConfig,
             cascade_cfg: CascadeConfig = CascadeConfig()) -> list[EvalRecord]:
    """Run the robot-user protocol over every scene.

    ``fine=None`` evaluates the coarse network alone (no zoom refinement).
    A model failure marks that record failed and evaluation continues.
    """
    records = []
    for i, scene in enumerate(scenes):
        records.append(_evaluate_one(f"scene_{i:04d}", coarse, fine, scene,
                                     cfg, cascade_cfg))
    return records


def _evaluate_one(sample_id, coarse, fine, scene, cfg, cascade_cfg) -> EvalRecord:
    session = SessionState.new(scene.image)
    ious: list[float] = []
    wall: list[float] = []
    try:
        for _ in range(cfg.max_clicks):
            pred_bin = session.prev_prob >= cfg.binarize_threshold
            try:
                click = simulate_next_click(pred_bin, scene.gt, session.clicks)
            except NoErrorPixelsError:
                break
            t0 = time.perf_counter()
            if cfg.strategy == "coarse_to_fine":
                p_t, session = interactive_step(session, click, coarse, fine,
                                                cascade_cfg)
            else:
                p_t, session = strategy_step(session, click, coarse, fine,
                                             cascade_cfg, cfg.strategy)
            wall.append((time.perf_counter() - t0) * 1e3)
            ious.append(iou(p_t >= cfg.binarize_threshold, scene.gt))
            if ious[-1] >= cfg.tau:
                break
    except Exception as exc:  # pragma: no cover - defensive
        return EvalRecord(sample_id=sample_id, ious=ious,
                          clicks_used=len(ious), success=False, wall_ms=wall,
                          error=f"{type(exc).__name__}: {exc}")
    success = bool(ious and ious[-1] >= cfg.tau)
    return EvalRecord(sample_id=sample_id, ious=ious, clicks_used=len(ious),
                      success=success, wall_ms=wall)


def noc(records: Sequence[EvalRecord], cfg: EvalConfig) -> float:
    """Mean clicks to termination; failures are charged max_clicks."""
    if not records:
        raise ValueError("noc needs at least one record")
    total = sum(r.clicks_used if r.success else cfg.max_clicks for r in records)
    return total / len(records)


def nof(records: Sequence[EvalRecord], cfg: EvalConfig) -> int:
    """Count of samples that never reached tau within the budget."""
    if not records:
        raise ValueError("nof needs at least one record")
    return sum(0 if r.success else 1 for r in records)


def miou_at_k(records: Sequence[EvalRecord], k_max: int) -> list[float]:
    """Mean IoU after k clicks, k = 1..k_max, holding each sample's last
    IoU after its episode ends."""
    curve = []
    for k in range(1, k_max + 1):
        vals = []
        for r in records:
            if not r.ious:
                vals.append(0.0)
            elif k <= len(r.ious):
                vals.append(r.ious[k - 1])
            else:
                vals.append(r.ious[-1])
        curve.append(float(np.mean(vals)))
    return curve


def click_histogram(records: Sequence[EvalRecord],
                    bins: Sequence[tuple[int, int]] = ((1, 5), (6, 10), (11, 15), (16, 20)),
                    ) -> dict[str, int]:
    """Successful samples binned by clicks used, plus a failure bin; the
    counts partition the record set."""
    hist = {f"{lo}-{hi}": 0 for lo, hi in bins}
    hist["fail"] = 0
    for r in records:
        if not r.success:
            hist["fail"] += 1
            continue
        for lo, hi in bins:
            if lo <= r.clicks_used <= hi:
                hist[f"{lo}-{hi}"] += 1
                break
        else:
            hist["fail"] += 1   # success outside all bins: count with failures
    return hist


@dataclass
class SpcStats:
    median_s: float
    mean_s: float
    steps: int
    machine: str
    reference_gpu_spc_s: float = REFERENCE_FULL_SCALE["spc_seconds_titan_rtx_resnet50"]


def spc_benchmark(coarse, fine, scenes: Sequence[SyntheticScene],
                  cfg: EvalConfig,
                  cascade_cfg: CascadeConfig = CascadeConfig()) -> SpcStats:
    """Wall-clock seconds per interactive step, after a warm-up pass."""
    if scenes:
        _evaluate_one("warmup", coarse, fine, scenes[0], cfg, cascade_cfg)
    times = []
    for rec in evaluate(coarse, fine, scenes, cfg, cascade_cfg):
        times.extend(ms / 1e3 for ms in rec.wall_ms)
    return SpcStats(median_s=float(np.median(times)), mean_s=float(np.mean(times)),
                    steps=len(times),
                    machine=f"{platform.machine()} {platform.processor() or 'cpu'}")


# ---------------------------------------------------------------------------
# Report writers
# ---------------------------------------------------------------------------

def write_records_csv(records: Sequence[EvalRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write("sample,clicks,success,final_iou,ms_per_click\n")
        for r in records:
            ms = np.mean(r.wall_ms) if r.wall_ms else 0.0
            fh.write(f"{r.sample_id},{r.clicks_used},{int(r.success)},"
                     f"{r.final_iou():.6f},{ms:.3f}\n")


def write_summary_json(records: Sequence[EvalRecord], cfg: EvalConfig, path) -> None:
    import json
    payload = {
        "tau": cfg.tau,
        "max_clicks": cfg.max_clicks,
        "noc": noc(records, cfg),
        "nof": nof(records, cfg),
        "curve": miou_at_k(records, cfg.max_clicks),
        "histogram": click_histogram(records),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def write_curve_tsv(records: Sequence[EvalRecord], k_max: int, path) -> None:
    curve = miou_at_k(records, k_max)
    with open(path, "w") as fh:
        fh.write("k\tmiou\n")
        for k, v in enumerate(curve, start=1):
            fh.write(f"{k}\t{v:.6f}\n")
