"""Synthetic scene generation, PNG round trips, dataset manifests.

Scenes are one colored target shape (disk, rotated rectangle, blob of
overlapping disks, or ring) over a gently graded background with optional
distractor shapes drawn in near-background colors, plus Gaussian pixel
noise.  The ground truth is the exact raster of the target.  Rings exist
specifically to exercise long-range click propagation: a click on one side
of the ring should help pixels on the far side.

Per-scene seeds are derived from the master seed with splitmix64 so
generation parallelizes and reruns bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataGenerationError, FormatError

Array = np.ndarray

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

SHAPE_KINDS = ("disk", "rect", "blob", "ring")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 96
    width: int = 144
    kinds: tuple[str, ...] = SHAPE_KINDS
    noise_sigma: float = 0.05
    area_min: float = 0.01
    area_max: float = 0.60
    max_distractors: int = 3
    max_attempts: int = 100

    def __post_init__(self):
        if self.height < 64 or self.width < 96:
            raise ValueError("canonical size must be at least 64x96")


@dataclass
class SyntheticScene:
    image: Array          # (3, H, W) in [0, 1]
    gt: Array             # (H, W) bool, nonempty
    meta: dict


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    mask = (1 << 64) - 1
    state = (state + 0x9E3779B97F4A7C15) & mask
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return state, z ^ (z >> 31)


def scene_seed(master_seed: int, index: int) -> int:
    """index-th splitmix64 output of the master seed."""
    state = master_seed & ((1 << 64) - 1)
    out = 0
    for _ in range(index + 1):
        state, out = splitmix64(state)
    return out


# ---------------------------------------------------------------------------
# Shape rasters
# ---------------------------------------------------------------------------

def _raster(kind: str, h: int, w: int, rng: np.random.Generator) -> tuple[Array, dict]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    short = min(h, w)
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    if kind == "disk":
        r = rng.uniform(0.10, 0.32) * short
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r, {"radius": r, "center": (cy, cx)}
    if kind == "rect":
        hh = rng.uniform(0.08, 0.28) * short
        hw = rng.uniform(0.08, 0.28) * short
        angle = rng.uniform(0, np.pi)
        u = (yy - cy) * np.cos(angle) + (xx - cx) * np.sin(angle)
        v = -(yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle)
        return (np.abs(u) <= hh) & (np.abs(v) <= hw), {
            "half_sides": (hh, hw), "angle": angle, "center": (cy, cx)}
    if kind == "blob":
        n = int(rng.integers(2, 5))
        mask = np.zeros((h, w), dtype=bool)
        base_r = rng.uniform(0.08, 0.20) * short
        centers = []
        py, px = cy, cx
        for _ in range(n):
            r = base_r * rng.uniform(0.7, 1.3)
            mask |= (yy - py) ** 2 + (xx - px) ** 2 <= r * r
            centers.append((py, px, r))
            step = base_r * rng.uniform(0.6, 1.2)
            ang = rng.uniform(0, 2 * np.pi)
            py = np.clip(py + step * np.sin(ang), 0.15 * h, 0.85 * h)
            px = np.clip(px + step * np.cos(ang), 0.15 * w, 0.85 * w)
        return mask, {"disks": centers}
    if kind == "ring":
        r_out = rng.uniform(0.18, 0.36) * short
        r_in = r_out * rng.uniform(0.45, 0.70)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r_out * r_out) & (d2 > r_in * r_in), {
            "r_outer": r_out, "r_inner": r_in, "center": (cy, cx)}
    raise ValueError(f"unknown shape kind '{kind}'")


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig(),
                   kind: str | None = None) -> SyntheticScene:
    """One scene, deterministic in the seed.  Rejection-samples the target
    until its area fraction lands in [area_min, area_max]."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    chosen = kind or str(rng.choice(list(cfg.kinds)))
    gt = None
    params: dict = {}
    for _ in range(cfg.max_attempts):
        candidate, params = _raster(chosen, h, w, rng)
        frac = candidate.sum() / (h * w)
        if cfg.area_min <= frac <= cfg.area_max and candidate.any():
            gt = candidate
            break
    if gt is None:
        raise DataGenerationError(
            f"no {chosen} satisfied the area bounds after {cfg.max_attempts} attempts")

    bg_color = rng.uniform(0.15, 0.85, size=3)
    target_color = bg_color
    while np.linalg.norm(target_color - bg_color) < 0.35:
        target_color = rng.uniform(0.05, 0.95, size=3)

    grad_y = rng.uniform(-0.08, 0.08)
    grad_x = rng.uniform(-0.08, 0.08)
    ramp = (grad_y * np.linspace(-1, 1, h)[:, None]
            + grad_x * np.linspace(-1, 1, w)[None, :])
    image = bg_color[:, None, None] + ramp[None, :, :]

    n_distract = int(rng.integers(0, cfg.max_distractors + 1))
    for _ in range(n_distract):
        dk = str(rng.choice(list(cfg.kinds)))
        dmask, _ = _raster(dk, h, w, rng)
        dcolor = np.clip(bg_color + rng.normal(0, 0.05, size=3), 0, 1)
        image[:, dmask] = dcolor[:, None]

    image[:, gt] = target_color[:, None]
    image = image + rng.normal(0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    meta = {"kind": chosen, "seed": int(seed), "distractors": n_distract,
            "params": _jsonable(params)}
    return SyntheticScene(image=image, gt=gt, meta=meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def generate_split(n: int, master_seed: int, cfg: SceneConfig = SceneConfig(),
                   index_offset: int = 0) -> list[SyntheticScene]:
    """n scenes with per-scene splitmix seeds; disjoint splits use
    non-overlapping index ranges of the same master seed."""
    return [generate_scene(scene_seed(master_seed, index_offset + i), cfg)
            for i in range(n)]


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def save_image(path, image: Array) -> None:
    """(3, H, W) floats in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_image(path) -> Array:
    """8-bit RGB PNG -> (3, H, W) floats; save -> load error <= 1/255."""
    _check_png_magic(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise FormatError(f"{path}: cannot decode PNG ({exc})") from exc
    return arr.transpose(2, 0, 1)


def save_mask(path, mask: Array) -> None:
    """(H, W) bool -> single-channel 0/255 PNG; round trip is bit-exact."""
    u8 = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path, format="PNG")


def load_mask(path) -> Array:
    _check_png_magic(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                raise FormatError(f"{path}: expected single-channel mask, got mode {im.mode}")
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise FormatError(f"{path}: cannot decode PNG ({exc})") from exc
    values = np.unique(arr)
    if not np.isin(values, (0, 255)).all():
        raise FormatError(f"{path}: mask pixels must be 0 or 255, found {values[:8]}")
    return arr == 255


def _check_png_magic(path) -> None:
    try:
        with open(path, "rb") as fh:
            head = fh.read(len(_PNG_MAGIC))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if head != _PNG_MAGIC:
        raise FormatError(f"{path}: missing PNG signature")


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: str
    mask: str
    split: str
    seed: int
    sha256_image: str
    sha256_mask: str


@dataclass
class DatasetManifest:
    height: int
    width: int
    master_seed: int
    entries: list[ManifestEntry]

    def paths(self, split: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries if split is None or e.split == split]


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def build_dataset(n_train: int, n_eval: int, seed: int, out_dir,
                  cfg: SceneConfig = SceneConfig()) -> DatasetManifest:
    """Generate, write and manifest disjoint train/eval splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    specs = [("train", i, i) for i in range(n_train)]
    specs += [("eval", i, n_train + i) for i in range(n_eval)]
    for split, i, index in specs:
        s = scene_seed(seed, index)
        scene = generate_scene(s, cfg)
        img_path = out / f"{split}_{i:04d}.png"
        mask_path = out / f"{split}_{i:04d}_mask.png"
        save_image(img_path, scene.image)
        save_mask(mask_path, scene.gt)
        entries.append(ManifestEntry(
            image=img_path.name, mask=mask_path.name, split=split, seed=s,
            sha256_image=_sha256_file(img_path),
            sha256_mask=_sha256_file(mask_path)))
    manifest = DatasetManifest(height=cfg.height, width=cfg.width,
                               master_seed=seed, entries=entries)
    with open(out / "manifest.json", "w") as fh:
        json.dump({
            "height": manifest.height, "width": manifest.width,
            "master_seed": manifest.master_seed,
            "entries": [e.__dict__ for e in entries],
        }, fh, indent=2)
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    entries = [ManifestEntry(**e) for e in raw["entries"]]
    base = path.parent
    for e in entries:
        for rel in (e.image, e.mask):
            if not (base / rel).exists():
                raise FormatError(f"manifest references missing file {rel}")
    return DatasetManifest(height=raw["height"], width=raw["width"],
                           master_seed=raw["master_seed"], entries=entries)


def load_scene(manifest_path, entry: ManifestEntry) -> SyntheticScene:
    base = Path(manifest_path).parent
    return SyntheticScene(image=load_image(base / entry.image),
                          gt=load_mask(base / entry.mask),
                          meta={"seed": entry.seed, "split": entry.split})


def manifest_hash(path) -> str:
    """Content hash of a manifest file (regeneration equality check)."""
    return _sha256_file(path)
