"""Run configuration: loss weights, learning rates, toggles.

Defaults follow the training recipe the engine was tuned with: 30k
iterations, 8 latent channels per Gaussian, loss mix (0.2, 0.5, 1.0, 0.3).
Learning rates are desk-scale Adam defaults, not tuned per scene.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np


@dataclass
class LossWeights:
    """Weights of the four objective terms.

    lambda_s mixes L1 against (1 - SSIM) inside each reconstruction term,
    eta scales the thermal feature-supervision term, lambda_rf scales the
    whole feature-supervision loss and lambda_sm the thermal smoothness
    regularizer.
    """

    lambda_s: float = 0.2
    eta: float = 0.5
    lambda_rf: float = 1.0
    lambda_sm: float = 0.3

    def validate(self) -> None:
        if not 0.0 <= self.lambda_s <= 1.0:
            raise ValueError(f"lambda_s must be in [0,1], got {self.lambda_s}")
        for name in ("eta", "lambda_rf", "lambda_sm"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class TrainConfig:
    iterations: int = 30000
    feature_dim: int = 8
    sh_degree: int = 3
    sh_unlock_every: int = 1000
    tile_size: int = 16

    # objective
    lambda_s: float = 0.2
    eta: float = 0.5
    lambda_rf: float = 1.0
    lambda_sm: float = 0.3

    # per-group learning rates (positions decay exponentially to the final value)
    lr_positions: float = 1.6e-4
    lr_positions_final: float = 1.6e-6
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity: float = 5e-2
    lr_thermal_offset: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_features: float = 2.5e-3
    lr_net: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    # ablation toggles
    disable_film: bool = False
    disable_decoupling: bool = False
    disable_hybrid: bool = False
    disable_fea_rgb: bool = False
    disable_fea_th: bool = False
    # which feature map drives the thermal head: the thermal-pass map (default)
    # or the base-pass map (ablation alternative)
    film_source: str = "thermal"

    # rendering
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lowpass: float = 0.3
    pixel_budget: int = 1 << 26

    # network widths
    net_hidden: int = 32
    net_thermal_hidden: int = 16

    # optional opacity pruning (off by default; cloud size is otherwise fixed)
    prune_enabled: bool = False
    prune_every: int = 1000
    prune_threshold: float = 0.005

    # bookkeeping
    eval_every: int = 500
    seed: int = 0
    precision: str = "f32"  # "f32" for training, "f64" for gradcheck/oracle work

    # initialization used by the CLI when no checkpoint is given
    n_gaussians: int = 5000
    init_mode: str = "random_box"

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4 (channels 0-3 are supervised)")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in 0..3")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.film_source not in ("thermal", "base"):
            raise ValueError(f"film_source must be 'thermal' or 'base', got {self.film_source!r}")
        for name in ("lr_positions", "lr_log_scales", "lr_rotations", "lr_opacity",
                     "lr_thermal_offset", "lr_sh", "lr_features", "lr_net"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        self.loss_weights.validate()

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_s, self.eta, self.lambda_rf, self.lambda_sm)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision == "f64" else np.float32)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(data)
        if "background" in d:
            d["background"] = tuple(float(v) for v in d["background"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
