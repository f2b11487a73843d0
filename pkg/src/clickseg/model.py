"""The segmentation network used at both cascade levels.

A small conv backbone produces two feature maps: a low-level c_low-channel
map at 1/2 resolution (tapped right after guidance fusion) and a semantic
c_high-channel map at 1/4 resolution (after a further stride and a
mini-ASPP of parallel dilated convs).  Click features then propagate
through the sparse graph blocks, and a two-conv head plus sigmoid emits a
full-resolution foreground probability map.

Guidance enters once: the channel-stacked [previous prediction, positive
map, negative map] goes through its own small conv stack and is added to
the image branch at the first-block output, the early-fusion arrangement
common in click-based segmentation systems.

``fpm`` selects the propagation variant, which is what the ablations
toggle:

  none           no propagation; upsampled semantic features projected 1x1
  sgm            sparse graph on the semantic map only
  sgm_fuse       sgm + plain concat-and-1x1 fusion with the low-level map
  sgm_fuse_sgm   as above, plus a second sparse graph on the fused map
                 (attention computed on the fused low-level features)
  hsgm           sgm + the high-res sparse graph block (default)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor, bias_add, bilinear_upsample, clamp_min, concat, conv2d, log,
    pow_const, relu, reshape, sigmoid, sum_all, load_checkpoint,
    save_checkpoint,
)
from .clicks import Click, GuidanceMaps
from .errors import DimensionError
from .graph import ClickIndexSet, HsgmParams, SgmParams, hsgm_forward, sgm_forward

Array = np.ndarray

FPM_VARIANTS = ("none", "sgm", "sgm_fuse", "sgm_fuse_sgm", "hsgm")


@dataclass(frozen=True)
class ArchConfig:
    c_low: int = 16
    c_high: int = 32
    fpm: str = "hsgm"
    polarity_embedding: bool = True

    def __post_init__(self):
        if self.fpm not in FPM_VARIANTS:
            raise ValueError(f"unknown fpm variant '{self.fpm}', expected one of {FPM_VARIANTS}")


@dataclass(frozen=True)
class EncodedInput:
    """Spatially aligned network inputs."""

    image: Array            # (3, H, W)
    guidance: GuidanceMaps  # pos/neg, (H, W) each
    prev_prob: Array        # (H, W)

    def __post_init__(self):
        h, w = self.image.shape[1:]
        for name, arr in (("guidance.pos", self.guidance.pos),
                          ("guidance.neg", self.guidance.neg),
                          ("prev_prob", self.prev_prob)):
            if arr.shape != (h, w):
                raise DimensionError(
                    f"EncodedInput.{name} is {arr.shape}, image plane is {(h, w)}")


class ModelParams:
    """Named weight tensors plus the architecture they belong to."""

    def __init__(self, arch: ArchConfig, tensors: dict[str, Tensor]):
        self.arch = arch
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: Tensor(v.data.copy())
                                       for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def sgm(self, prefix: str = "sgm") -> SgmParams:
        return SgmParams(
            w_c=self.tensors[f"{prefix}.w_c"],
            theta=self.tensors[f"{prefix}.theta"],
            phi=self.tensors[f"{prefix}.phi"],
            polarity_embed=self.tensors.get(f"{prefix}.pol"),
        )

    def hsgm(self) -> HsgmParams:
        return HsgmParams(
            sigma_w=self.tensors["hsgm.sigma_w"],
            sigma_b=self.tensors["hsgm.sigma_b"],
            w_f=self.tensors["hsgm.w_f"],
            theta_g=self.tensors["hsgm.theta_g"],
            phi_g=self.tensors["hsgm.phi_g"],
            polarity_embed=self.tensors.get("hsgm.pol"),
        )


def init_params(arch: ArchConfig = ArchConfig(), seed: int = 0) -> ModelParams:
    """He-style random initialization, deterministic under the seed."""
    rng = np.random.default_rng(seed)
    cl, ch = arch.c_low, arch.c_high
    t: dict[str, Tensor] = {}

    def conv_w(name, cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        t[f"{name}.w"] = Tensor(rng.standard_normal((cout, cin, k, k)) * std)
        t[f"{name}.b"] = Tensor(np.zeros(cout))

    def mat(name, rows, cols, std):
        t[name] = Tensor(rng.standard_normal((rows, cols)) * std)

    conv_w("img1", cl, 3, 3)
    conv_w("img2", cl, cl, 3)
    conv_w("fuse1", cl, 3, 3)
    conv_w("fuse2", cl, cl, 3)
    conv_w("down", ch, cl, 3)
    conv_w("aspp_d1", cl, ch, 3)
    conv_w("aspp_d2", cl, ch, 3)
    conv_w("aspp_d4", cl, ch, 3)
    conv_w("aspp_proj", ch, 3 * cl, 1)

    if arch.fpm != "none":
        mat("sgm.theta", ch, ch, 1.0 / np.sqrt(ch))
        mat("sgm.phi", ch, ch, 1.0 / np.sqrt(ch))
        mat("sgm.w_c", ch, ch, np.sqrt(2.0 / ch))
        if arch.polarity_embedding:
            t["sgm.pol"] = Tensor(np.zeros((2, ch)))
    if arch.fpm == "hsgm":
        mat("hsgm.sigma_w", cl, cl + ch, np.sqrt(2.0 / (cl + ch)))
        t["hsgm.sigma_b"] = Tensor(np.zeros(cl))
        mat("hsgm.w_f", cl, cl, np.sqrt(2.0 / cl))
        mat("hsgm.theta_g", ch, ch, 1.0 / np.sqrt(ch))
        mat("hsgm.phi_g", ch, ch, 1.0 / np.sqrt(ch))
        if arch.polarity_embedding:
            t["hsgm.pol"] = Tensor(np.zeros((2, ch)))
    elif arch.fpm in ("none", "sgm"):
        conv_w("neck", cl, ch, 1)
    elif arch.fpm in ("sgm_fuse", "sgm_fuse_sgm"):
        conv_w("fuse_neck", cl, cl + ch, 1)
        if arch.fpm == "sgm_fuse_sgm":
            mat("sgm2.theta", cl, cl, 1.0 / np.sqrt(cl))
            mat("sgm2.phi", cl, cl, 1.0 / np.sqrt(cl))
            mat("sgm2.w_c", cl, cl, np.sqrt(2.0 / cl))
            if arch.polarity_embedding:
                t["sgm2.pol"] = Tensor(np.zeros((2, cl)))

    conv_w("head1", cl, cl, 3)
    conv_w("head2", 1, cl, 3)
    return ModelParams(arch, t)


def _conv_block(x: Tensor, p: ModelParams, name: str, stride: int = 1,
                dilation: int = 1, pad: int = 1, act: bool = True) -> Tensor:
    out = bias_add(conv2d(x, p[f"{name}.w"], stride=stride, dilation=dilation,
                          pad=pad), p[f"{name}.b"])
    return relu(out) if act else out


def backbone_features(x: EncodedInput, p: ModelParams) -> tuple[Tensor, Tensor]:
    """(low-level map at 1/2 scale, semantic map at 1/4 scale).

    H and W must be divisible by 4; the data loader pads images to
    multiples of 4 before they reach the network.
    """
    h, w = x.image.shape[1:]
    if h % 4 or w % 4:
        raise ValueError(f"input {h}x{w} not divisible by 4; pad first")
    img = Tensor(x.image)
    guid = Tensor(np.stack([x.prev_prob, x.guidance.pos, x.guidance.neg]))

    t1 = _conv_block(img, p, "img1")
    t2 = _conv_block(t1, p, "img2", stride=2, act=False)
    g1 = _conv_block(guid, p, "fuse1", stride=2)
    g2 = _conv_block(g1, p, "fuse2", act=False)
    f_low = relu(t2 + g2)                                  # (c_low, H/2, W/2)

    d = _conv_block(f_low, p, "down", stride=2)            # (c_high, H/4, W/4)
    a1 = _conv_block(d, p, "aspp_d1", dilation=1, pad=1)
    a2 = _conv_block(d, p, "aspp_d2", dilation=2, pad=2)
    a4 = _conv_block(d, p, "aspp_d4", dilation=4, pad=4)
    f_high = _conv_block(concat([a1, a2, a4], axis=0), p, "aspp_proj", pad=0)
    return f_low, f_high


def fuse_guidance(x: EncodedInput, p: ModelParams) -> Tensor:
    """First-block output with guidance added (the 1/2-scale tap)."""
    return backbone_features(x, p)[0]


def forward(x: EncodedInput, clicks: Sequence[Click], p: ModelParams) -> Tensor:
    """Full forward pass to an (H, W) probability map in (0, 1).

    Click pixel coordinates are floor-divided onto the 1/4 grid for the
    semantic graph block and the 1/2 grid for the high-res one.  With no
    clicks the propagation blocks degenerate gracefully (identity /
    fusion-only).
    """
    f_low, f_high = backbone_features(x, p)
    arch = p.arch
    _, hq, wq = f_high.shape
    _, hh, wh = f_low.shape

    if arch.fpm != "none":
        clicks_q = ClickIndexSet.from_clicks(clicks, 4, hq, wq)
        f_high = sgm_forward(f_high, clicks_q, p.sgm())
    g = bilinear_upsample(f_high, 2)                       # (c_high, H/2, W/2)

    if arch.fpm == "hsgm":
        clicks_h = ClickIndexSet.from_clicks(clicks, 2, hh, wh)
        head_in = hsgm_forward(f_low, g, clicks_h, p.hsgm())
    elif arch.fpm in ("none", "sgm"):
        head_in = _conv_block(g, p, "neck", pad=0)
    else:  # sgm_fuse / sgm_fuse_sgm
        head_in = _conv_block(concat([f_low, g], axis=0), p, "fuse_neck", pad=0)
        if arch.fpm == "sgm_fuse_sgm":
            clicks_h = ClickIndexSet.from_clicks(clicks, 2, hh, wh)
            head_in = sgm_forward(head_in, clicks_h, p.sgm("sgm2"))

    h1 = _conv_block(head_in, p, "head1")
    logits = _conv_block(h1, p, "head2", act=False)        # (1, H/2, W/2)
    logits_full = bilinear_upsample(logits, 2)
    prob = sigmoid(logits_full)
    h, w = x.image.shape[1:]
    return reshape(prob, (h, w))


def nfl_loss(p: Tensor, y: Array, gamma: float = 2.0) -> Tensor:
    """Normalized focal loss.

    With p_t the probability assigned to the true class per pixel:
    loss = sum((1-p_t)^gamma * -log(p_t)) / max(sum((1-p_t)^gamma), 1e-12).
    gamma = 0 is exactly mean binary cross-entropy.  p_t is floored at
    1e-12 so the log stays finite even on saturated predictions.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    y = np.asarray(y)
    if y.shape != p.shape:
        raise DimensionError(f"nfl_loss: prediction {p.shape} vs target {y.shape}")
    y_f = y.astype(np.float64)
    p_t = clamp_min(p * y_f + (1.0 - p) * (1.0 - y_f), 1e-12)
    weight = pow_const(1.0 - p_t, gamma)
    num = sum_all(weight * (-log(p_t)))
    den = clamp_min(sum_all(weight), 1e-12)
    return num / den


# ---------------------------------------------------------------------------
# Checkpoint bundles (CPKT1 payload + JSON sidecar with the architectures)
# ---------------------------------------------------------------------------

def _arch_dict(arch: ArchConfig) -> dict:
    return asdict(arch)


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_bundle(path, coarse: ModelParams, fine: ModelParams | None = None) -> None:
    """Write one CPKT1 file holding both networks (names prefixed
    ``coarse/`` and ``fine/``) plus a ``<path>.json`` sidecar recording
    the architectures and a config hash."""
    path = Path(path)
    tensors: dict[str, Tensor] = {f"coarse/{k}": v for k, v in coarse.tensors.items()}
    if fine is not None:
        tensors.update({f"fine/{k}": v for k, v in fine.tensors.items()})
    save_checkpoint(path, tensors)
    meta = {"coarse_arch": _arch_dict(coarse.arch),
            "fine_arch": _arch_dict(fine.arch) if fine is not None else None}
    meta["config_hash"] = _config_hash(meta)
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_bundle(path) -> tuple[ModelParams, ModelParams | None]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {sidecar}")
    with open(sidecar) as fh:
        meta = json.load(fh)
    raw = load_checkpoint(path)

    def build(prefix: str, arch_dict: dict) -> ModelParams:
        arch = ArchConfig(**arch_dict)
        tensors = {k[len(prefix):]: Tensor(v) for k, v in raw.items()
                   if k.startswith(prefix)}
        return ModelParams(arch, tensors)

    coarse = build("coarse/", meta["coarse_arch"])
    fine = build("fine/", meta["fine_arch"]) if meta.get("fine_arch") else None
    return coarse, fine
