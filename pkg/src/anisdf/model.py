"""The full AniSDF model: fused geometry field, blended appearance and NeuS sharpness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .appearance import AppearanceConfig, AppearanceField
from .autodiff import ParameterStore
from .geometry import FieldSample, GeometryConfig, GeometryField
from .hashgrid import GridConfig

SHARPNESS_ID = "render.log_s"


@dataclass(frozen=True)
class ModelConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    appearance: AppearanceConfig = field(default_factory=AppearanceConfig)
    init_sharpness: float = 20.0


class AniSDFModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, store: ParameterStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(seed)
        self.field = GeometryField(self.store, cfg.grid, cfg.geometry, rng)
        center = tuple(0.5 * (a + b) for a, b in zip(cfg.grid.aabb_min, cfg.grid.aabb_max))
        self.appearance = AppearanceField(
            self.store,
            cfg.geometry.feature_dim,
            self.field.coarse_encoding,
            cfg.grid.encoding_dim("coarse"),
            cfg.appearance,
            rng,
            center=center,
        )
        self.store.add(SHARPNESS_ID, np.array([math.log(cfg.init_sharpness)]))

    @property
    def aabb(self):
        return self.cfg.grid.aabb_min, self.cfg.grid.aabb_max

    def sharpness(self) -> torch.Tensor:
        return torch.exp(self.store[SHARPNESS_ID][0])

    def radiance(self, x, d, sample: FieldSample) -> dict[str, torch.Tensor]:
        return self.appearance(x, d, sample.normal, sample.feature, pos_enc=sample.encoding)
