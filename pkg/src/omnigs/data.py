"""In-memory training/evaluation sample shared by the model and the harness."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import CameraModel, VolumeSpec


@dataclass
class BinSample:
    """One bin: the K input views at the rig center and the novel views around it.

    Depth maps are camera-z; pixels that hit nothing are ``inf``.
    """

    name: str
    input_images: torch.Tensor   # (K, H, W, 3) in [0, 1]
    input_depth: np.ndarray      # (K, H, W)
    input_cams: list[CameraModel]
    novel_images: torch.Tensor   # (M, H, W, 3)
    novel_depth: np.ndarray      # (M, H, W)
    novel_cams: list[CameraModel]
    spec: VolumeSpec
    meta: dict = field(default_factory=dict)

    @property
    def n_input(self) -> int:
        return len(self.input_cams)

    @property
    def n_novel(self) -> int:
        return len(self.novel_cams)

    def to(self, dtype) -> "BinSample":
        return BinSample(self.name, self.input_images.to(dtype), self.input_depth, self.input_cams,
                         self.novel_images.to(dtype), self.novel_depth, self.novel_cams, self.spec, self.meta)
