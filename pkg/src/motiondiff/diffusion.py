"""DDPM machinery shared by every diffusion model in the package.

Steps are numbered 1..T as in the usual DDPM notation; table index ``t - 1``
holds the values for step ``t``. Noise predictors are called as
``net(x_t, t, cond)`` where ``t`` is a (B,) float tensor of step numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import NumericError, ParameterError


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"

    def table(self, name: str, t, like: torch.Tensor) -> torch.Tensor:
        """Schedule entries for steps ``t`` shaped to broadcast against ``like``."""
        values = torch.as_tensor(getattr(self, name), dtype=like.dtype, device=like.device)
        t = torch.as_tensor(t, device=like.device).long().reshape(-1)
        out = values[t - 1]
        return out.reshape(-1, *([1] * (like.dim() - 1)))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "kind": self.kind}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> DiffusionSchedule:
    if kind != "linear":
        raise ParameterError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(T, betas, alphas, np.cumprod(alphas), beta_start, beta_end, kind)


def _check_step(t, sched):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ParameterError(f"step must lie in [1, {sched.T}], got {t}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Forward marginal sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    if eps.shape != x0.shape:
        raise ParameterError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    _check_step(t, sched)
    abar = sched.table("alpha_bars", t, x0)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps


def _steps_tensor(t, batch, like):
    return torch.full((batch,), float(t), dtype=like.dtype, device=like.device)


def p_step(net, x_t: torch.Tensor, t: int, cond, sched: DiffusionSchedule,
           generator: torch.Generator | None = None) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with fixed variance sigma_t^2 = beta_t."""
    _check_step(t, sched)
    eps_hat = net(x_t, _steps_tensor(t, x_t.shape[0], x_t), cond)
    beta = float(sched.betas[t - 1])
    abar = float(sched.alpha_bars[t - 1])
    mean = (x_t - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(1.0 - beta)
    if t > 1:
        z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device=x_t.device)
        mean = mean + math.sqrt(beta) * z
    if not torch.isfinite(mean).all():
        raise NumericError(f"non-finite values in reverse step t={t}")
    return mean


def ddim_step(net, x_t, t: int, t_prev: int, cond, sched: DiffusionSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) jump from step ``t`` to ``t_prev`` (0 means clean)."""
    eps_hat = net(x_t, _steps_tensor(t, x_t.shape[0], x_t), cond)
    abar = float(sched.alpha_bars[t - 1])
    abar_prev = float(sched.alpha_bars[t_prev - 1]) if t_prev > 0 else 1.0
    x0 = (x_t - math.sqrt(1 - abar) * eps_hat) / math.sqrt(abar)
    out = math.sqrt(abar_prev) * x0 + math.sqrt(1 - abar_prev) * eps_hat
    if not torch.isfinite(out).all():
        raise NumericError(f"non-finite values in DDIM step t={t}")
    return out


def sample_loop(net, shape, sched: DiffusionSchedule, cond=None,
                generator: torch.Generator | None = None,
                project: Callable[[torch.Tensor], torch.Tensor] | None = None,
                ddim_stride: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Run the reverse chain from pure noise.

    ``project`` is applied to the initial noise and after every step; conditional
    models use it to re-impose clamped rows. ``ddim_stride`` switches to the
    deterministic strided sampler.
    """
    x = torch.randn(shape, generator=generator, dtype=dtype)
    if project is not None:
        x = project(x)
    with torch.no_grad():
        if ddim_stride:
            steps = list(range(sched.T, 0, -ddim_stride))
            for t, t_prev in zip(steps, steps[1:] + [0]):
                x = ddim_step(net, x, t, t_prev, cond, sched)
                if project is not None:
                    x = project(x)
        else:
            for t in range(sched.T, 0, -1):
                x = p_step(net, x, t, cond, sched, generator)
                if project is not None:
                    x = project(x)
    return x


def training_loss(net, x0: torch.Tensor, t, eps: torch.Tensor, cond, sched: DiffusionSchedule,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between ``eps`` and the prediction on ``q_sample(x0, t, eps)``.

    ``mask`` (broadcastable to x0) restricts the average to selected entries.
    """
    x_t = q_sample(x0, t, eps, sched)
    t = torch.as_tensor(t, dtype=x0.dtype).reshape(-1).expand(x0.shape[0])
    err = (eps - net(x_t, t, cond)) ** 2
    if mask is None:
        return err.mean()
    mask = mask.expand_as(err).to(err.dtype)
    return (err * mask).sum() / mask.sum()


def safe_std(x, axis=0) -> np.ndarray:
    """Standard deviation with (near-)zero entries replaced by 1."""
    s = np.asarray(x, dtype=np.float64).std(axis=axis)
    return np.where(s < 1e-6, 1.0, s)


def sample_steps(batch: int, sched: DiffusionSchedule, generator=None) -> torch.Tensor:
    return torch.randint(1, sched.T + 1, (batch,), generator=generator)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (B,) step numbers -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None].to(t.device)
    emb = torch.cat([torch.cos(args), torch.sin(args)], 1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], 1)
    return emb.to(t.dtype) if t.is_floating_point() else emb


class TimeMLP(nn.Module):
    def __init__(self, dim: int, out: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, out), nn.SiLU(), nn.Linear(out, out))

    def forward(self, t):
        return self.net(timestep_embedding(t, self.dim).to(self.net[0].weight.dtype))
