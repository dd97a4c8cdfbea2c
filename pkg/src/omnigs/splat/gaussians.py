from __future__ import annotations

from dataclasses import dataclass, fields, replace

import torch

SOURCE_VOLUME = 0
SOURCE_PIXEL = 1


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions in (w, x, y, z) order -> (N, 3, 3); normalizes first."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(*q.shape[:-1], 3, 3)


def covariance_3d(scales: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    """R(q) diag(s^2) R(q)^T for (N, 3) scales and (N, 4) quaternions."""
    R = quat_to_rotmat(quats)
    M = R * scales[..., None, :]
    return M @ M.transpose(-1, -2)


@dataclass
class GaussianSet:
    """Struct-of-arrays Gaussian collection.

    ``source`` tags each Gaussian as volume (0) or pixel (1). ``features`` is
    optional per-Gaussian payload (the pixel branch carries U-Net features for
    fusion); it is dropped when sets with and without features are merged.
    """

    means: torch.Tensor
    opacities: torch.Tensor
    scales: torch.Tensor
    quats: torch.Tensor
    colors: torch.Tensor
    source: torch.Tensor
    features: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def empty(cls, dtype=torch.float64) -> "GaussianSet":
        z = lambda *s: torch.zeros(0, *s, dtype=dtype)
        return cls(z(3), z(), z(3), z(4), z(3), torch.zeros(0, dtype=torch.long))

    @property
    def dtype(self):
        return self.means.dtype

    def select(self, idx) -> "GaussianSet":
        kw = {f.name: (getattr(self, f.name)[idx] if getattr(self, f.name) is not None else None)
              for f in fields(self)}
        return GaussianSet(**kw)

    def detach(self) -> "GaussianSet":
        kw = {f.name: (getattr(self, f.name).detach() if getattr(self, f.name) is not None else None)
              for f in fields(self)}
        return GaussianSet(**kw)

    def without_features(self) -> "GaussianSet":
        return replace(self, features=None)

    def count(self, source: int) -> int:
        return int((self.source == source).sum())

    def check(self, atol: float = 1e-9):
        """Raise if any Gaussian violates the parameter invariants."""
        if len(self) == 0:
            return
        if not ((self.opacities > 0) & (self.opacities < 1)).all():
            raise ValueError("opacity outside (0, 1)")
        if not (self.scales > 0).all():
            raise ValueError("non-positive scale")
        if ((self.quats.norm(dim=-1) - 1).abs() > atol).any():
            raise ValueError("quaternion not unit")
        if not torch.isfinite(self.means).all():
            raise ValueError("non-finite mean")


def merge_gaussians(*sets: GaussianSet) -> GaussianSet:
    """Concatenate sets in order, keeping source tags; no deduplication."""
    sets = [s for s in sets if s is not None]
    if not sets:
        return GaussianSet.empty()
    nonempty = [s for s in sets if len(s) > 0]
    if len(nonempty) <= 1:
        return nonempty[0] if nonempty else sets[0]
    keep_feat = all(s.features is not None for s in sets)
    cat = lambda name: torch.cat([getattr(s, name) for s in sets], dim=0)
    return GaussianSet(cat("means"), cat("opacities"), cat("scales"), cat("quats"),
                       cat("colors"), cat("source"), cat("features") if keep_feat else None)
