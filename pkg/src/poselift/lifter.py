"""Residual MLP that lifts a 2D pose to per-joint depths plus a camera elevation."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .geometry import center_root as _center_root
from .geometry import unproject
from .numerics import clamp_min, leaky_relu

DEPTH = 10.0
MIN_DEPTH = 1.0


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h):
        return h + leaky_relu(self.fc2(leaky_relu(self.fc1(h))))


class LifterNet(nn.Module):
    """Shared input layer feeding a depth path and a parallel elevation path.

    Both output layers start at zero, so a fresh net predicts the flat pose
    at depth ``DEPTH`` with zero elevation.

    ``input_scale`` multiplies the 2D input before the first layer; it lets
    the net see unit-scale coordinates when the unprojected 2D pose is
    expressed at a smaller image scale.
    """

    def __init__(self, num_joints: int, width: int = 1024, n_blocks: int = 3, input_scale: float = 1.0):
        super().__init__()
        self.num_joints = num_joints
        self.width = width
        self.input_scale = float(input_scale)
        self.inp = nn.Linear(2 * num_joints, width)
        self.depth_blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(n_blocks)])
        self.depth_out = nn.Linear(width, num_joints)
        self.elev_blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(n_blocks)])
        self.elev_out = nn.Linear(width, 1)
        for layer in (self.depth_out, self.elev_out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = leaky_relu(self.inp(x * self.input_scale))
        d = self.depth_out(self.depth_blocks(h))
        e = self.elev_out(self.elev_blocks(h))[..., 0]
        return d, e


@dataclass
class LiftOutput:
    d: torch.Tensor  # (..., J) depth offsets
    e: torch.Tensor  # (...) elevation, radians
    w: torch.Tensor  # (..., J) clipped depths
    y: torch.Tensor  # (..., 3J) camera-frame pose


def lift(x: torch.Tensor, net: LifterNet, depth: float = DEPTH, check: bool = False) -> LiftOutput:
    """Predict depths ``w = max(d + depth, 1)`` and unproject ``x`` with them."""
    d, e = net(x)
    if check and not (torch.isfinite(d).all() and torch.isfinite(e).all()):
        raise FloatingPointError("lifter produced non-finite activations")
    w = clamp_min(d + depth, MIN_DEPTH)
    return LiftOutput(d=d, e=e, w=w, y=unproject(x, w))


def center_root(y: torch.Tensor, root: int = 0) -> torch.Tensor:
    """Subtract the root joint from every joint."""
    return _center_root(y, root)
