"""Affine-coupling normalizing flow over pose-subspace coefficients."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .numerics import AdamConfig, NonFiniteGradient, adam_step, make_adam

log = logging.getLogger(__name__)

SCALE_CLAMP = 5.0
LOG_2PI = math.log(2 * math.pi)


class FlowDivergence(RuntimeError):
    """Raised when pretraining diverges; ``flow`` holds the last good state."""

    def __init__(self, msg: str, flow: "CouplingFlow", epoch: int):
        super().__init__(msg)
        self.flow = flow
        self.epoch = epoch


class NonFiniteFlow(FloatingPointError):
    pass


def _mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    net = nn.Sequential(
        nn.Linear(n_in, hidden), nn.ReLU(),
        nn.Linear(hidden, hidden), nn.ReLU(),
        nn.Linear(hidden, n_out),
    )
    nn.init.zeros_(net[-1].weight)
    nn.init.zeros_(net[-1].bias)
    return net


class CouplingBlock(nn.Module):
    """Permute, then ``v2 = exp(s(u1)) * u2 + t(u1)``, ``v1 = u1``."""

    def __init__(self, dim: int, hidden: int, perm: torch.Tensor):
        super().__init__()
        if sorted(perm.tolist()) != list(range(dim)):
            raise ValueError("perm must be a permutation of range(dim)")
        self.dim = dim
        self.n1 = (dim + 1) // 2
        self.n2 = dim - self.n1
        self.register_buffer("perm", perm.clone().long())
        self.register_buffer("inv_perm", torch.argsort(perm).long())
        self.s_net = _mlp(self.n1, hidden, self.n2)
        self.t_net = _mlp(self.n1, hidden, self.n2)

    def _scale_shift(self, u1):
        s = self.s_net(u1)
        s = SCALE_CLAMP * torch.tanh(s / SCALE_CLAMP)
        return s, self.t_net(u1)

    def forward(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        u = u[..., self.perm]
        u1, u2 = u[..., : self.n1], u[..., self.n1:]
        s, t = self._scale_shift(u1)
        v2 = torch.exp(s) * u2 + t
        return torch.cat([u1, v2], dim=-1), s.sum(-1)

    def inverse(self, v: torch.Tensor) -> torch.Tensor:
        v1, v2 = v[..., : self.n1], v[..., self.n1:]
        s, t = self._scale_shift(v1)
        u2 = (v2 - t) * torch.exp(-s)
        return torch.cat([v1, u2], dim=-1)[..., self.inv_perm]


class CouplingFlow(nn.Module):
    """Stack of coupling blocks mapping coefficients to a standard normal."""

    def __init__(self, dim: int, n_blocks: int = 8, hidden: int = 1024, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.hidden = hidden
        g = torch.Generator().manual_seed(seed)
        perms = [torch.randperm(dim, generator=g) for _ in range(n_blocks)]
        # hidden-layer init is drawn from the same seed so flows are reproducible
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.blocks = nn.ModuleList(CouplingBlock(dim, hidden, p) for p in perms)

    def forward(self, c: torch.Tensor, check: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        z = c
        logdet = torch.zeros(c.shape[:-1], dtype=c.dtype)
        for i, block in enumerate(self.blocks):
            z, ld = block(z)
            if check and not (torch.isfinite(z).all() and torch.isfinite(ld).all()):
                raise NonFiniteFlow(f"non-finite output in coupling block {i}")
            logdet = logdet + ld
        return z, logdet

    def inverse(self, z: torch.Tensor) -> torch.Tensor:
        c = z
        for block in reversed(self.blocks):
            c = block.inverse(c)
        return c

    def log_likelihood(self, c: torch.Tensor, check: bool = True) -> torch.Tensor:
        """Exact log-density per sample (batched over leading dims)."""
        z, logdet = self(c, check=check)
        return -0.5 * (z * z).sum(-1) - 0.5 * self.dim * LOG_2PI + logdet

    def nf_loss(self, c: torch.Tensor) -> torch.Tensor:
        return -self.log_likelihood(c).mean()

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        z = torch.randn(n, self.dim, generator=generator)
        with torch.no_grad():
            return self.inverse(z)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class FlowTrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-4
    lr_milestones: tuple[int, ...] = (10, 20, 30)
    lr_gamma: float = 0.1
    weight_decay: float = 1e-5
    decoupled_weight_decay: bool = False
    n_blocks: int = 8
    hidden: int = 1024
    seed: int = 0
    # an epoch whose mean NLL exceeds this counts as diverged; single-batch
    # spikes early in training are common and recover on their own
    diverge_threshold: float = 1e6


def flow_lr(epoch: int, base: float = 1e-4, milestones=(10, 20, 30), gamma: float = 0.1) -> float:
    """Staircase schedule: ``base`` divided by ``1/gamma`` once per milestone passed."""
    k = sum(1 for m in milestones if epoch >= m)
    return base / (1.0 / gamma) ** k


@dataclass
class FlowHistory:
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def pretrain_flow(
    coeffs,
    cfg: FlowTrainConfig,
    val_coeffs=None,
    flow: CouplingFlow | None = None,
) -> tuple[CouplingFlow, FlowHistory]:
    """Fit a flow to ``coeffs`` by minimizing the mean NLL with Adam.

    The last incomplete batch of each epoch is dropped. On divergence the
    flow is rolled back to the end of the last good epoch and FlowDivergence
    is raised carrying it.
    """
    dtype = torch.get_default_dtype()
    data = torch.as_tensor(np.asarray(coeffs), dtype=dtype)
    val = None if val_coeffs is None else torch.as_tensor(np.asarray(val_coeffs), dtype=dtype)
    n, dim = data.shape
    if flow is None:
        flow = CouplingFlow(dim, cfg.n_blocks, cfg.hidden, seed=cfg.seed)
    opt = make_adam(flow.parameters(), AdamConfig(
        lr=cfg.lr, weight_decay=cfg.weight_decay, decoupled_weight_decay=cfg.decoupled_weight_decay))
    named = list(flow.named_parameters())
    g = torch.Generator().manual_seed(cfg.seed + 1)
    bs = min(cfg.batch_size, n)
    hist = FlowHistory()
    good = copy.deepcopy(flow.state_dict())

    for epoch in range(cfg.epochs):
        lr = flow_lr(epoch, cfg.lr, cfg.lr_milestones, cfg.lr_gamma)
        for group in opt.param_groups:
            group["lr"] = lr
        order = torch.randperm(n, generator=g)
        total, count = 0.0, 0
        for start in range(0, n - bs + 1, bs):
            batch = data[order[start: start + bs]]
            opt.zero_grad(set_to_none=True)
            loss = flow.nf_loss(batch)
            lv = loss.item()
            if not math.isfinite(lv):
                flow.load_state_dict(good)
                raise FlowDivergence(f"flow NLL not finite in epoch {epoch}", flow, epoch)
            loss.backward()
            try:
                adam_step(opt, named)
            except NonFiniteGradient as exc:
                flow.load_state_dict(good)
                raise FlowDivergence(f"flow gradient not finite in epoch {epoch}: {exc}", flow, epoch) from exc
            total += lv * len(batch)
            count += len(batch)
        hist.lr.append(lr)
        hist.train_nll.append(total / max(count, 1))
        if hist.train_nll[-1] > cfg.diverge_threshold:
            flow.load_state_dict(good)
            raise FlowDivergence(f"flow NLL diverged ({hist.train_nll[-1]:.3g}) in epoch {epoch}", flow, epoch)
        if val is not None:
            with torch.no_grad():
                hist.val_nll.append(flow.nf_loss(val).item())
        good = copy.deepcopy(flow.state_dict())
        log.debug("flow epoch %d lr %.2e nll %.4f", epoch, lr, hist.train_nll[-1])
    return flow, hist
