"""Virtual-camera rotations built from learned elevation statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .geometry import rot_azimuth, rot_elevation
from .numerics import clamp_min

SIGMA_FLOOR = 1e-3
PRIOR_ELEVATION = math.pi / 9


@dataclass
class ElevationStats:
    mu: torch.Tensor
    sigma: torch.Tensor
    n: int

    def detach(self) -> "ElevationStats":
        return ElevationStats(self.mu.detach(), self.sigma.detach(), self.n)

    def as_floats(self) -> tuple[float, float]:
        return float(self.mu), float(self.sigma)


def batch_elevation_stats(e: torch.Tensor, floor: float = SIGMA_FLOOR) -> ElevationStats:
    """Mean and unbiased std of a batch of elevations, std floored at ``floor``."""
    e = e.reshape(-1)
    n = e.numel()
    if n < 2:
        raise ValueError(f"elevation statistics need a batch of at least 2, got {n}")
    mu = e.mean()
    var = ((e - mu) ** 2).sum() / (n - 1)
    sigma = torch.sqrt(clamp_min(var, floor * floor))
    return ElevationStats(mu=mu, sigma=sigma, n=n)


@dataclass
class RotationDraw:
    azimuth: torch.Tensor
    eps: torch.Tensor            # N(0,1) noise, or U[-pi/9, pi/9] angles without learned elevation
    elevation: torch.Tensor      # sampled target elevation


def draw_noise(n: int, generator: torch.Generator | None, dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Azimuth in U[-pi, pi] and standard-normal noise, one per sample."""
    dtype = dtype or torch.get_default_dtype()
    a = (torch.rand(n, generator=generator, dtype=dtype) * 2 - 1) * math.pi
    eps = torch.randn(n, generator=generator, dtype=dtype)
    return a, eps


def sample_rotation(
    e: torch.Tensor,
    stats: ElevationStats | None,
    generator: torch.Generator | None = None,
    use_elevation: bool = True,
    detach_correction: bool = False,
    azimuth: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> tuple[torch.Tensor, RotationDraw]:
    """Per-sample rotations ``R = Rot_e(mu + sigma*eps) @ Rot_a(a) @ Rot_e(e)^T``.

    Applied to a root-centered pose, the right factor undoes the predicted
    elevation (making the pose upright), the azimuth turns it about the
    vertical axis and the left factor tilts it to a freshly sampled
    elevation. With ``use_elevation=False`` the correction is dropped and the
    tilt is uniform in [-pi/9, pi/9].
    """
    e = e.reshape(-1)
    n = e.numel()
    if azimuth is None or eps is None:
        a_draw, n_draw = draw_noise(n, generator, e.dtype)
        azimuth = a_draw if azimuth is None else azimuth
        eps = n_draw if eps is None else eps
    Ra = rot_azimuth(azimuth)
    if not use_elevation:
        # reuse the normal draw as a uniform one so both modes consume the same stream
        u = torch.special.ndtr(eps) * 2 - 1
        tilt = u * PRIOR_ELEVATION
        R = rot_elevation(tilt) @ Ra
        return R, RotationDraw(azimuth, eps, tilt)
    if stats is None:
        raise ValueError("learned-elevation sampling needs ElevationStats")
    target = stats.mu + stats.sigma * eps
    e_corr = e.detach() if detach_correction else e
    R = rot_elevation(target) @ Ra @ rot_elevation(e_corr).transpose(-1, -2)
    return R, RotationDraw(azimuth, eps, target)
