"""Flat dotted-key configuration with INI-style section files.

A config file groups keys by section::

    [zoom]
    threshold = 0.5
    target_h = 96

which maps to ``zoom.threshold`` etc.  Values are parsed to the type of
the built-in default; unknown keys are rejected so typos fail loudly.
CLI ``--set section.key=value`` overrides file values.
"""

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Mapping

from .cascade import CascadeConfig
from .data import SceneConfig
from .evalbench import EvalConfig
from .training import TrainConfig

DEFAULTS: dict[str, object] = {
    "zoom.threshold": 0.5,
    "zoom.margin_scale": 0.4,
    "zoom.margin_min": 0.1,
    "zoom.margin_max": 0.8,
    "zoom.target_h": 96,
    "zoom.target_w": 144,
    "zoom.min_region_side": 8,
    "click.radius": 5,
    "data.height": 96,
    "data.width": 144,
    "data.noise_sigma": 0.05,
    "train.epochs_coarse": 30,
    "train.epochs_fine": 10,
    "train.lr_coarse": 1e-3,
    "train.lr_fine": 1e-5,
    "train.batch_size": 8,
    "train.max_sim_clicks": 8,
    "train.gamma": 2.0,
    "train.corrective_prob": 0.5,
    "train.corrective_refresh": False,
    "train.augment": True,
    "train.vertical_flip": False,
    "train.polarity_embedding": True,
    "eval.tau": 0.85,
    "eval.max_clicks": 20,
    "eval.binarize_threshold": 0.5,
    "bench.m": 5,
    "bench.c": 32,
    "bench.runs": 10,
    "bench.sizes": "1024,2048,4096,32768,65536,131072",
    "bench.dense_limit": 4096,
    "serve.port": 8000,
    "serve.session_ttl": 3600,
}


class Config:
    def __init__(self, values: Mapping[str, object] | None = None):
        self._values = dict(DEFAULTS)
        if values:
            for key, value in values.items():
                self.set(key, value)

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None) -> "Config":
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(Path(path))
            if not read:
                raise FileNotFoundError(f"config file not found: {path}")
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cfg.set(f"{section}.{key}", raw)
        for item in overrides or []:
            if "=" not in item:
                raise ValueError(f"override '{item}' is not key=value")
            key, raw = item.split("=", 1)
            cfg.set(key.strip(), raw.strip())
        return cfg

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise KeyError(f"unknown config key '{key}'")
        default = DEFAULTS[key]
        if isinstance(raw, str) and not isinstance(default, str):
            if isinstance(default, bool):
                low = raw.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{key}: cannot parse '{raw}' as bool")
                raw = low in ("true", "1", "yes")
            elif isinstance(default, int):
                raw = int(raw)
            elif isinstance(default, float):
                raw = float(raw)
        self._values[key] = raw

    def __getitem__(self, key: str):
        return self._values[key]

    def cascade(self) -> CascadeConfig:
        return CascadeConfig(
            zoom_threshold=self["zoom.threshold"],
            margin_scale=self["zoom.margin_scale"],
            margin_min=self["zoom.margin_min"],
            margin_max=self["zoom.margin_max"],
            target_h=self["zoom.target_h"],
            target_w=self["zoom.target_w"],
            min_region_side=self["zoom.min_region_side"],
            click_radius=self["click.radius"],
        )

    def scene(self) -> SceneConfig:
        return SceneConfig(height=self["data.height"], width=self["data.width"],
                           noise_sigma=self["data.noise_sigma"])

    def train(self, seed: int = 0, ablation: str = "full") -> TrainConfig:
        return TrainConfig(
            epochs_coarse=self["train.epochs_coarse"],
            epochs_fine=self["train.epochs_fine"],
            lr_coarse=self["train.lr_coarse"],
            lr_fine=self["train.lr_fine"],
            batch_size=self["train.batch_size"],
            max_sim_clicks=self["train.max_sim_clicks"],
            gamma=self["train.gamma"],
            seed=seed,
            ablation=ablation,
            corrective_prob=self["train.corrective_prob"],
            corrective_refresh=self["train.corrective_refresh"],
            augment=self["train.augment"],
            vertical_flip=self["train.vertical_flip"],
            polarity_embedding=self["train.polarity_embedding"],
        )

    def eval(self) -> EvalConfig:
        return EvalConfig(tau=self["eval.tau"], max_clicks=self["eval.max_clicks"],
                          binarize_threshold=self["eval.binarize_threshold"])

    def bench_sizes(self) -> list[int]:
        return [int(s) for s in str(self["bench.sizes"]).split(",") if s.strip()]
