"""Stage-wise training with simulated clicks, plus the ablation runner.

Stage one trains the coarse (full-frame) network; stage two initializes
the fine network from the coarse weights, freezes the coarse network, and
trains the fine network on zoom crops produced by running the real coarse
network.  Both stages minimize the normalized focal loss with Adam; the
learning rate decays by 10x at two epoch milestones.

Click simulation mixes two regimes per sample: purely random clicks
(positives inside the target, negatives at least 5 px away from it) and
corrective clicks obtained by running the current model and repeatedly
clicking the deepest point of its largest error region, which narrows the
gap between training inputs and the interactive test-time distribution.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import (
    AdamState, Tape, Tensor, adam_step, backward, linear_resample_matrix,
    resample_plane,
)
from .cascade import CascadeConfig, adaptive_box, crop_resample, crop_resample_nearest
from .clicks import Click, encode_clicks, interior_depth, map_clicks_to_crop, simulate_next_click
from .data import SceneConfig, SyntheticScene, generate_split
from .errors import EmptyForegroundError, NoErrorPixelsError, TrainingDivergedError
from .evalbench import EvalConfig, evaluate, noc, nof
from .model import ArchConfig, EncodedInput, ModelParams, forward, init_params, nfl_loss

Array = np.ndarray
log = logging.getLogger(__name__)

STRATEGIES = ("coarse_to_fine", "coarse_to_coarse", "fine_to_fine")

# ablation preset -> (fpm variant, use zoom cascade)
ABLATION_PRESETS = {
    "baseline": ("none", False),
    "fpm": ("hsgm", False),
    "iaf": ("none", True),
    "full": ("hsgm", True),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs_coarse: int = 30
    epochs_fine: int = 10
    lr_coarse: float = 1e-3
    lr_fine: float = 1e-5
    batch_size: int = 8
    max_sim_clicks: int = 8
    gamma: float = 2.0
    seed: int = 0
    ablation: str = "full"
    strategy: str = "coarse_to_fine"
    fpm_variant: str | None = None      # overrides the ablation preset
    use_iaf: bool | None = None
    lr_milestones: tuple[float, float] = (0.8, 0.95)
    corrective_prob: float = 0.5
    corrective_refresh: bool = False
    augment: bool = True
    vertical_flip: bool = False
    polarity_embedding: bool = True

    def __post_init__(self):
        if self.epochs_coarse < 1 or self.batch_size < 1 or self.max_sim_clicks < 1:
            raise ValueError("epoch, batch and click counts must be positive")
        if self.lr_coarse <= 0 or self.lr_fine <= 0:
            raise ValueError("learning rates must be positive")
        if self.ablation not in ABLATION_PRESETS:
            raise ValueError(f"unknown ablation '{self.ablation}'")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}'")

    def resolved(self) -> tuple[str, bool]:
        fpm, iaf = ABLATION_PRESETS[self.ablation]
        if self.fpm_variant is not None:
            fpm = self.fpm_variant
        if self.use_iaf is not None:
            iaf = self.use_iaf
        return fpm, iaf

    def arch(self) -> ArchConfig:
        fpm, _ = self.resolved()
        return ArchConfig(fpm=fpm, polarity_embedding=self.polarity_embedding)


# ---------------------------------------------------------------------------
# Click simulation
# ---------------------------------------------------------------------------

def sample_training_clicks(gt: Array, prev_pred: Array | None,
                           rng: np.random.Generator, max_clicks: int,
                           predict_fn: Callable[[Sequence[Click]], Array] | None = None,
                           corrective_prob: float = 0.5,
                           corrective_refresh: bool = False,
                           ) -> tuple[list[Click], Array]:
    """Draw a click set for one training sample.

    k ~ Uniform{1..max_clicks}.  The first click is positive at the
    target's deepest interior point, jittered uniformly within its depth
    radius (staying inside the target).  With probability corrective_prob
    the remaining clicks correct the current model's errors (running
    ``predict_fn`` when given, else correcting ``prev_pred``); otherwise
    they are random positives/negatives.  Returns (clicks, prev_prob)
    where prev_prob is the model prediction preceding the corrective
    clicks, or zeros when no model pass happened.
    """
    gt = np.asarray(gt, dtype=bool)
    if not gt.any():
        raise ValueError("sample_training_clicks: empty ground truth")
    h, w = gt.shape
    depth = interior_depth(gt)
    rows, cols = np.nonzero(gt)
    best = np.lexsort((cols, rows, -depth[rows, cols]))[0]
    r0, c0 = int(rows[best]), int(cols[best])
    jitter = int(depth[r0, c0] / 2)
    if jitter > 0:
        for _ in range(10):
            rr = r0 + int(rng.integers(-jitter, jitter + 1))
            cc = c0 + int(rng.integers(-jitter, jitter + 1))
            if 0 <= rr < h and 0 <= cc < w and gt[rr, cc]:
                r0, c0 = rr, cc
                break
    clicks = [Click(row=r0, col=c0, positive=True, step=1)]

    k = int(rng.integers(1, max_clicks + 1))
    prev_prob = np.zeros((h, w)) if prev_pred is None else np.asarray(prev_pred)
    if k == 1:
        return clicks, prev_prob

    corrective = rng.random() < corrective_prob and (predict_fn is not None
                                                     or prev_pred is not None)
    if corrective:
        pred = predict_fn(clicks) if predict_fn is not None else prev_prob
        prev_prob = pred
        for _ in range(k - 1):
            try:
                clicks.append(simulate_next_click(pred >= 0.5, gt, clicks))
            except NoErrorPixelsError:
                break
            if corrective_refresh and predict_fn is not None:
                pred = predict_fn(clicks)
        return clicks, prev_prob

    bg_depth = ndimage.distance_transform_edt(~gt)
    far_bg = bg_depth >= 5.0
    used = {(c.row, c.col) for c in clicks}
    for _ in range(k - 1):
        want_positive = bool(rng.random() < 0.5)
        for polarity in (want_positive, not want_positive):
            pool = gt if polarity else far_bg
            prs, pcs = np.nonzero(pool)
            free = [(int(r), int(c)) for r, c in zip(prs, pcs) if (r, c) not in used]
            if free:
                r, c = free[int(rng.integers(0, len(free)))]
                clicks.append(Click(row=r, col=c, positive=polarity,
                                    step=len(clicks) + 1))
                used.add((r, c))
                break
        else:
            break
    return clicks, prev_prob


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    hflip: bool = False
    vflip: bool = False
    scale: float = 1.0
    offset: tuple[float, float] = (0.5, 0.5)   # placement fractions


def draw_augment(rng: np.random.Generator, vertical_flip: bool = False,
                 scale_range: tuple[float, float] = (0.75, 1.25)) -> AugmentDraw:
    return AugmentDraw(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(vertical_flip and rng.random() < 0.5),
        scale=float(rng.uniform(*scale_range)),
        offset=(float(rng.random()), float(rng.random())),
    )


def scale_scene(scene: SyntheticScene, scale: float) -> SyntheticScene:
    """Resample a scene by a scale factor (bilinear image, nearest mask)."""
    h, w = scene.gt.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    rmat = linear_resample_matrix(nh, h)
    cmat = linear_resample_matrix(nw, w)
    image = np.stack([resample_plane(ch, rmat, cmat) for ch in scene.image])
    ri = np.clip(np.rint(np.linspace(0, h - 1, nh)).astype(int), 0, h - 1)
    ci = np.clip(np.rint(np.linspace(0, w - 1, nw)).astype(int), 0, w - 1)
    gt = scene.gt[np.ix_(ri, ci)]
    return SyntheticScene(image=image, gt=gt, meta=dict(scene.meta))


def apply_augment(scene: SyntheticScene, draw: AugmentDraw) -> SyntheticScene:
    """Deterministically apply one augmentation draw; the mask undergoes
    exactly the geometric transform of the image."""
    image, gt = scene.image, scene.gt
    if draw.hflip:
        image, gt = image[:, :, ::-1], gt[:, ::-1]
    if draw.vflip:
        image, gt = image[:, ::-1, :], gt[::-1, :]
    h, w = gt.shape
    if draw.scale != 1.0:
        scaled = scale_scene(SyntheticScene(image=image.copy(), gt=gt.copy(),
                                            meta=dict(scene.meta)), draw.scale)
        image, gt = scaled.image, scaled.gt
        nh, nw = gt.shape
        if nh >= h and nw >= w:      # crop back to canonical
            top = round(draw.offset[0] * (nh - h))
            left = round(draw.offset[1] * (nw - w))
            image = image[:, top:top + h, left:left + w]
            gt = gt[top:top + h, left:left + w]
        else:                        # pad back (edge-replicated image)
            pt = round(draw.offset[0] * (h - nh))
            pl = round(draw.offset[1] * (w - nw))
            image = np.pad(image, ((0, 0), (pt, h - nh - pt), (pl, w - nw - pl)),
                           mode="edge")
            gt = np.pad(gt, ((pt, h - nh - pt), (pl, w - nw - pl)))
    return SyntheticScene(image=np.ascontiguousarray(image),
                          gt=np.ascontiguousarray(gt), meta=dict(scene.meta))


def augment(scene: SyntheticScene, rng: np.random.Generator,
            vertical_flip: bool = False) -> SyntheticScene:
    """Random flip/scale/crop; redraws (up to 20 times) if the transform
    pushed the whole target out of frame."""
    for _ in range(20):
        out = apply_augment(scene, draw_augment(rng, vertical_flip))
        if out.gt.any():
            return out
    return scene


# ---------------------------------------------------------------------------
# Stage-wise training
# ---------------------------------------------------------------------------

def _lr_at(cfg: TrainConfig, base_lr: float, epoch: int, total_epochs: int) -> float:
    lr = base_lr
    for frac in cfg.lr_milestones:
        if epoch >= math.floor(frac * total_epochs):
            lr *= 0.1
    return lr


def _predictor(params: ModelParams, image: Array, prev: Array,
               cascade_cfg: CascadeConfig) -> Callable[[Sequence[Click]], Array]:
    h, w = image.shape[1:]

    def predict(clicks: Sequence[Click]) -> Array:
        guidance = encode_clicks(clicks, h, w, cascade_cfg.click_radius)
        x = EncodedInput(image=image, guidance=guidance, prev_prob=prev)
        return forward(x, clicks, params).data

    return predict


def _grad_norm(params: ModelParams) -> float:
    total = 0.0
    for t in params.tensors.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return math.sqrt(total)


def train_coarse(scenes: Sequence[SyntheticScene], cfg: TrainConfig,
                 cascade_cfg: CascadeConfig = CascadeConfig()
                 ) -> tuple[ModelParams, list[dict]]:
    """Stage one: full-frame network on simulated clicks.

    Returns the trained parameters and the per-step history
    ({step, epoch, loss, grad_norm, lr} records).
    """
    if not scenes:
        raise ValueError("train_coarse: empty dataset")
    params = init_params(cfg.arch(), seed=cfg.seed)
    params.set_trainable(True)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 1)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs_coarse):
        lr = _lr_at(cfg, cfg.lr_coarse, epoch, cfg.epochs_coarse)
        order = rng.permutation(len(scenes))
        for start in range(0, len(order), cfg.batch_size):
            batch = [scenes[i] for i in order[start:start + cfg.batch_size]]
            losses = []
            prepared = []
            for scene in batch:
                sample = augment(scene, rng, cfg.vertical_flip) if cfg.augment else scene
                if not sample.gt.any():
                    log.warning("skipping sample with empty ground truth")
                    continue
                predict_fn = _predictor(params, sample.image,
                                        np.zeros_like(sample.gt, dtype=float),
                                        cascade_cfg)
                clicks, prev = sample_training_clicks(
                    sample.gt, None, rng, cfg.max_sim_clicks,
                    predict_fn=predict_fn, corrective_prob=cfg.corrective_prob,
                    corrective_refresh=cfg.corrective_refresh)
                prepared.append((sample, clicks, prev))
            if not prepared:
                continue
            for sample, clicks, prev in prepared:
                h, w = sample.gt.shape
                guidance = encode_clicks(clicks, h, w, cascade_cfg.click_radius)
                x = EncodedInput(image=sample.image, guidance=guidance, prev_prob=prev)
                tape = Tape()
                with tape:
                    loss = nfl_loss(forward(x, clicks, params), sample.gt, cfg.gamma)
                backward(loss, tape, seed=1.0 / len(prepared))
                losses.append(loss.item())
            mean_loss = float(np.mean(losses))
            if not math.isfinite(mean_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}",
                    diagnostics={"epoch": epoch, "step": step, "losses": losses,
                                 "scene_seeds": [s.meta.get("seed") for s, _, _ in prepared]})
            grad_norm = _grad_norm(params)
            adam_step(params.tensors, state, lr)
            history.append({"step": step, "epoch": epoch, "loss": mean_loss,
                            "grad_norm": grad_norm, "lr": lr})
            step += 1
    return params, history


def train_fine(coarse: ModelParams, scenes: Sequence[SyntheticScene],
               cfg: TrainConfig, cascade_cfg: CascadeConfig = CascadeConfig(),
               zoom: bool = True) -> tuple[ModelParams, list[dict]]:
    """Stage two: fine network initialized from (and trained against the
    outputs of) the frozen coarse network.

    With ``zoom=True`` training samples pass through the real coarse
    network and the adaptive crop; samples whose coarse estimate has no
    foreground are skipped.  ``zoom=False`` trains the second network on
    full frames (the no-zoom strategy ablation).
    """
    if not scenes:
        raise ValueError("train_fine: empty dataset")
    checksum_before = coarse.checksum()
    coarse.set_trainable(False)
    fine = coarse.copy()
    fine.set_trainable(True)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 2)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs_fine):
        lr = _lr_at(cfg, cfg.lr_fine, epoch, cfg.epochs_fine)
        order = rng.permutation(len(scenes))
        for start in range(0, len(order), cfg.batch_size):
            batch = [scenes[i] for i in order[start:start + cfg.batch_size]]
            prepared = []
            for scene in batch:
                sample = augment(scene, rng, cfg.vertical_flip) if cfg.augment else scene
                if not sample.gt.any():
                    log.warning("skipping sample with empty ground truth")
                    continue
                h, w = sample.gt.shape
                predict_fn = _predictor(coarse, sample.image,
                                        np.zeros((h, w)), cascade_cfg)
                clicks, prev = sample_training_clicks(
                    sample.gt, None, rng, cfg.max_sim_clicks,
                    predict_fn=predict_fn, corrective_prob=cfg.corrective_prob,
                    corrective_refresh=cfg.corrective_refresh)
                guidance = encode_clicks(clicks, h, w, cascade_cfg.click_radius)
                p_c = forward(EncodedInput(image=sample.image, guidance=guidance,
                                           prev_prob=prev), clicks, coarse).data
                if zoom:
                    try:
                        region = adaptive_box(p_c, cascade_cfg)
                    except EmptyForegroundError:
                        continue
                    crop_img = np.stack([crop_resample(ch, region) for ch in sample.image])
                    crop_prob = crop_resample(p_c, region)
                    crop_gt = crop_resample_nearest(sample.gt, region)
                    crop_clicks, _ = map_clicks_to_crop(clicks, region)
                    if not crop_gt.any():
                        continue
                    cg = encode_clicks(crop_clicks, region.target_h, region.target_w,
                                       cascade_cfg.click_radius)
                    prepared.append((EncodedInput(image=crop_img, guidance=cg,
                                                  prev_prob=crop_prob),
                                     crop_clicks, crop_gt))
                else:
                    prepared.append((EncodedInput(image=sample.image, guidance=guidance,
                                                  prev_prob=p_c), list(clicks), sample.gt))
            if not prepared:
                continue
            losses = []
            for x, clicks, gt in prepared:
                tape = Tape()
                with tape:
                    loss = nfl_loss(forward(x, clicks, fine), gt, cfg.gamma)
                backward(loss, tape, seed=1.0 / len(prepared))
                losses.append(loss.item())
            mean_loss = float(np.mean(losses))
            if not math.isfinite(mean_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at fine epoch {epoch} step {step}",
                    diagnostics={"epoch": epoch, "step": step, "losses": losses})
            grad_norm = _grad_norm(fine)
            adam_step(fine.tensors, state, lr)
            history.append({"step": step, "epoch": epoch, "loss": mean_loss,
                            "grad_norm": grad_norm, "lr": lr})
            step += 1
    assert coarse.checksum() == checksum_before, "coarse network changed during stage two"
    return fine, history


def write_history_jsonl(history: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------

# name -> (fpm variant, use zoom cascade, strategy)
GRIDS: dict[str, list[tuple[str, str, bool, str]]] = {
    "components": [
        ("baseline", "none", False, "coarse_to_fine"),
        ("fpm", "hsgm", False, "coarse_to_fine"),
        ("iaf", "none", True, "coarse_to_fine"),
        ("full", "hsgm", True, "coarse_to_fine"),
    ],
    "fpm": [
        ("sgm", "sgm", False, "coarse_to_fine"),
        ("sgm_fuse", "sgm_fuse", False, "coarse_to_fine"),
        ("sgm_fuse_sgm", "sgm_fuse_sgm", False, "coarse_to_fine"),
        ("sgm_hsgm", "hsgm", False, "coarse_to_fine"),
    ],
    "strategy": [
        ("coarse_to_coarse", "hsgm", True, "coarse_to_coarse"),
        ("fine_to_fine", "hsgm", True, "fine_to_fine"),
        ("coarse_to_fine", "hsgm", True, "coarse_to_fine"),
    ],
}


@dataclass
class AblationCell:
    variant: str
    seed: int
    noc: float
    nof: int
    n_eval: int
    # fraction of eval scenes whose very first click already yields a
    # strictly positive IoU (step-0 IoU is 0: empty prediction, nonempty gt)
    first_click_gain: float = 0.0


@dataclass
class AblationReport:
    grid: str
    cells: list[AblationCell]

    def mean_noc(self, variant: str) -> float:
        vals = [c.noc for c in self.cells if c.variant == variant]
        return float(np.mean(vals))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("variant,seed,noc,nof,n_eval\n")
            for c in self.cells:
                fh.write(f"{c.variant},{c.seed},{c.noc:.4f},{c.nof},{c.n_eval}\n")
            for variant in dict.fromkeys(c.variant for c in self.cells):
                fh.write(f"{variant},mean,{self.mean_noc(variant):.4f},,\n")


def run_cell(variant: str, fpm: str, iaf: bool, strategy: str, seed: int,
             n_train: int, n_eval: int, cfg: TrainConfig,
             eval_cfg: EvalConfig, cascade_cfg: CascadeConfig,
             scene_cfg: SceneConfig, single_thread: bool = False) -> AblationCell:
    """Train and evaluate one (variant, seed) cell on its own generated
    train/eval splits (splits depend only on the seed, so variants see
    paired data)."""
    if single_thread:
        from threadpoolctl import threadpool_limits
        ctx = threadpool_limits(limits=1)
    else:
        import contextlib
        ctx = contextlib.nullcontext()
    with ctx:
        cell_cfg = replace(cfg, seed=seed, fpm_variant=fpm, use_iaf=iaf,
                           strategy=strategy)
        train_scenes = generate_split(n_train, seed, scene_cfg, index_offset=0)
        eval_scenes = generate_split(n_eval, seed, scene_cfg, index_offset=n_train)
        coarse, _ = train_coarse(train_scenes, cell_cfg, cascade_cfg)
        fine = None
        if iaf:
            fine, _ = train_fine(coarse, train_scenes, cell_cfg, cascade_cfg,
                                 zoom=(strategy != "coarse_to_coarse"))
        records = evaluate(coarse, fine, eval_scenes,
                           replace(eval_cfg, strategy=strategy), cascade_cfg)
        gain = float(np.mean([bool(r.ious) and r.ious[0] > 0.0 for r in records]))
        return AblationCell(variant=variant, seed=seed,
                            noc=noc(records, eval_cfg),
                            nof=nof(records, eval_cfg), n_eval=len(records),
                            first_click_gain=gain)


def run_ablation(grid: str, n_train: int, n_eval: int, cfg: TrainConfig,
                 seeds: Sequence[int] | None = None,
                 eval_cfg: EvalConfig = EvalConfig(),
                 cascade_cfg: CascadeConfig = CascadeConfig(),
                 scene_cfg: SceneConfig = SceneConfig(),
                 n_jobs: int = 1) -> AblationReport:
    """Train/evaluate every variant of a grid over several seeds.

    Cells are independent and deterministic per (variant, seed), so the
    result is identical whether they run serially or across processes.
    """
    if grid not in GRIDS:
        raise ValueError(f"unknown ablation grid '{grid}', have {sorted(GRIDS)}")
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(3)]
    jobs = [(variant, fpm, iaf, strategy, seed)
            for (variant, fpm, iaf, strategy) in GRIDS[grid] for seed in seeds]
    cells: list[AblationCell] = []
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(run_cell, variant, fpm, iaf, strategy, seed,
                                   n_train, n_eval, cfg, eval_cfg, cascade_cfg,
                                   scene_cfg, True)
                       for (variant, fpm, iaf, strategy, seed) in jobs]
            cells = [f.result() for f in futures]
    else:
        for (variant, fpm, iaf, strategy, seed) in jobs:
            cells.append(run_cell(variant, fpm, iaf, strategy, seed, n_train,
                                  n_eval, cfg, eval_cfg, cascade_cfg, scene_cfg))
    return AblationReport(grid=grid, cells=cells)
