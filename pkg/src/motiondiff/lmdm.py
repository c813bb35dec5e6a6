"""Diffusion models over motion-code sequences.

Three variants share one temporal U-Net:

* ``clmdm`` diffuses only the residuals ``m_i = a_i - a_1``; the clean anchor
  ``a_1`` is added to every noised residual row and prepended as an extra
  timestep before the denoiser sees it.
* ``uncond`` is plain DDPM over the whole sequence.
* ``transition`` diffuses the interior of a short sequence whose first and
  last rows are held fixed.

Codes are float32. Residuals are kept in float64, which makes the
split/merge round trip exact whenever each code differs from the anchor by
less than 29 binary orders of magnitude (always true for codes of similar
scale).
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_state, save_module
from .diffusion import DiffusionSchedule, make_schedule, safe_std, sample_loop, sample_steps, training_loss
from .errors import ParameterError, TrainingDivergedError
from .nets import TemporalUNet

log = logging.getLogger(__name__)

VARIANTS = ("clmdm", "uncond", "transition")


@dataclass
class ResidualSequence:
    anchor: np.ndarray  # (..., N) float32
    residuals: np.ndarray  # (..., L - 1, N) float64


def split_sequence(a) -> ResidualSequence:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim < 2 or a.shape[-2] < 2:
        raise ParameterError(f"need a sequence of at least 2 codes, got shape {a.shape}")
    anchor = a[..., 0, :].copy()
    residuals = a[..., 1:, :].astype(np.float64) - anchor[..., None, :].astype(np.float64)
    return ResidualSequence(anchor, residuals)


def merge(anchor, residuals) -> np.ndarray:
    """Rebuild ``[anchor, anchor + m_2, ..., anchor + m_L]``; row 0 is a copy of ``anchor``."""
    anchor = np.asarray(anchor, dtype=np.float32)
    residuals = np.asarray(residuals)
    if residuals.ndim < 2 or residuals.shape[-1] != anchor.shape[-1] \
            or residuals.shape[:-2] != anchor.shape[:-1]:
        raise ParameterError(f"anchor {anchor.shape} and residuals {residuals.shape} do not agree")
    L = residuals.shape[-2] + 1
    out = np.empty(anchor.shape[:-1] + (L, anchor.shape[-1]), dtype=np.float32)
    out[..., 0, :] = anchor
    out[..., 1:, :] = (anchor[..., None, :].astype(np.float64) + residuals).astype(np.float32)
    return out


def reanchor(codes, new_anchor) -> ResidualSequence:
    """Keep the residuals of ``codes`` and swap in a new anchor."""
    parts = split_sequence(codes)
    new_anchor = np.asarray(new_anchor, dtype=np.float32)
    if new_anchor.shape != parts.anchor.shape:
        raise ParameterError(f"anchor shape {new_anchor.shape} != {parts.anchor.shape}")
    return ResidualSequence(new_anchor.copy(), parts.residuals)


def lmc_condition(m_t, anchor):
    """Denoiser input ``[anchor ; m_t + anchor]`` for (..., L-1, N) residuals and (..., N) anchors."""
    if m_t.shape[-1] != anchor.shape[-1] or m_t.shape[:-2] != anchor.shape[:-1]:
        raise ParameterError(f"residuals {tuple(m_t.shape)} and anchor {tuple(anchor.shape)} do not agree")
    if torch.is_tensor(m_t):
        a = anchor.unsqueeze(-2)
        return torch.cat([a, m_t + a], dim=-2)
    a = np.asarray(anchor)[..., None, :]
    return np.concatenate([a, np.asarray(m_t) + a], axis=-2)


@dataclass
class LMDMConfig:
    L: int = 64
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 1e-4
    steps: int = 50000
    batch_size: int = 64
    base_channels: int = 64
    T_trans: int = 16
    seed: int = 0
    log_every: int = 100


class MotionDiffusion(nn.Module):
    """Temporal denoiser plus the per-dimension normalisation statistics of its training codes."""

    def __init__(self, variant: str = "clmdm", N: int = 20, L: int = 64, base: int = 64,
                 mults=(1, 2, 2), schedule: dict | None = None):
        super().__init__()
        if variant not in VARIANTS:
            raise ParameterError(f"unknown variant {variant!r}")
        self.variant, self.N, self.L = variant, N, L
        self.net = TemporalUNet(N, base, mults)
        self.schedule = make_schedule(**(schedule or {}))
        self.register_buffer("code_mean", torch.zeros(N))
        self.register_buffer("code_std", torch.ones(N))
        self.register_buffer("res_std", torch.ones(N))

    def hparams(self):
        return {"variant": self.variant, "N": self.N, "L": self.L, "base": self.net.base,
                "mults": list(self.net.mults), "schedule": self.schedule.to_dict()}

    def set_stats(self, sequences: np.ndarray):
        flat = sequences.reshape(-1, self.N)
        res = sequences[:, 1:self.L] - sequences[:, :1]
        self.code_mean.copy_(torch.from_numpy(flat.mean(0)))
        self.code_std.copy_(torch.from_numpy(safe_std(flat, 0)))
        self.res_std.copy_(torch.from_numpy(safe_std(res.reshape(-1, self.N), 0)))

    def norm_codes(self, a: torch.Tensor) -> torch.Tensor:
        return (a - self.code_mean) / self.code_std

    def eps(self, x_t, t, cond):
        """Noise prediction for the rows that are actually diffused.

        The net predicts a correction to ``sqrt(1 - abar_t) * x_t``, the exact
        answer for unit-Gaussian data, so the prediction keeps the right scale
        at high noise levels even when the net is small or briefly trained.
        """
        base = (1 - self.schedule.table("alpha_bars", t, x_t)).sqrt() * x_t
        if self.variant == "clmdm":
            return base + self.net(lmc_condition(x_t, cond), t)[:, 1:]
        if self.variant == "transition":
            start, target = cond
            return base + self.net(torch.cat([start[:, None], x_t, target[:, None]], 1), t)[:, 1:-1]
        return base + self.net(x_t, t)

    def split_batch(self, window: torch.Tensor):
        """Clean diffusion target and condition for a batch of code windows."""
        if self.variant == "clmdm":
            return (window[:, 1:] - window[:, :1]) / self.res_std, self.norm_codes(window[:, 0])
        x = self.norm_codes(window)
        if self.variant == "transition":
            return x[:, 1:-1], (x[:, 0], x[:, -1])
        return x, None

    def loss(self, window: torch.Tensor, generator=None) -> torch.Tensor:
        x0, cond = self.split_batch(window)
        t = sample_steps(x0.shape[0], self.schedule, generator)
        eps = torch.randn(x0.shape, generator=generator)
        return training_loss(self.eps, x0, t, eps, cond, self.schedule)


def _check_dataset(sequences, N=None) -> np.ndarray:
    sequences = np.asarray(sequences, dtype=np.float32)
    if sequences.ndim != 3 or len(sequences) == 0:
        raise ParameterError(f"code dataset must be a non-empty (n, L, N) array, got {sequences.shape}")
    if N is not None and sequences.shape[2] != N:
        raise ParameterError(f"code dimension {sequences.shape[2]} != {N}")
    if not np.all(np.isfinite(sequences)):
        raise ParameterError("code dataset contains non-finite values")
    return sequences


def _train(model: MotionDiffusion, sequences: np.ndarray, window: int, config: LMDMConfig, on_log=None):
    n, Ls, N = sequences.shape
    if Ls < window:
        raise ParameterError(f"sequences of length {Ls} are shorter than the window {window}")
    data = torch.from_numpy(sequences)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history, start, running = [], time.time(), 0.0
    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        off = torch.randint(0, Ls - window + 1, (config.batch_size,), generator=gen)
        batch = data[idx[:, None], off[:, None] + torch.arange(window)[None]]
        loss = model.loss(batch, gen)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"{model.variant} loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        running += loss.item()
        if step % config.log_every == 0 or step == config.steps:
            k = step % config.log_every or config.log_every
            rec = {"step": step, "loss": running / k, "lr": config.lr, "wallclock": time.time() - start}
            running = 0.0
            history.append(rec)
            log.info("%s %s", model.variant, rec)
            if on_log:
                on_log(rec)
    model.eval()
    model.history = history
    return model


def _build(variant, sequences, config, L):
    model = MotionDiffusion(variant, sequences.shape[2], L, config.base_channels,
                            schedule={"T": config.T, "beta_start": config.beta_start,
                                      "beta_end": config.beta_end})
    model.set_stats(sequences)
    return model


def train_clmdm(code_dataset, config: LMDMConfig | None = None, on_log=None) -> MotionDiffusion:
    config = config or LMDMConfig()
    seqs = _check_dataset(code_dataset)
    return _train(_build("clmdm", seqs, config, config.L), seqs, config.L, config, on_log)


def train_lmdm_unconditional(code_dataset, config: LMDMConfig | None = None, on_log=None) -> MotionDiffusion:
    config = config or LMDMConfig()
    seqs = _check_dataset(code_dataset)
    return _train(_build("uncond", seqs, config, config.L), seqs, config.L, config, on_log)


def train_transition_dm(code_dataset, config: LMDMConfig | None = None, on_log=None) -> MotionDiffusion:
    config = config or LMDMConfig()
    if config.T_trans < 3:
        raise ParameterError(f"T_trans must be >= 3, got {config.T_trans}")
    seqs = _check_dataset(code_dataset)
    return _train(_build("transition", seqs, config, config.T_trans), seqs, config.T_trans, config, on_log)


def as_generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(0 if rng is None else int(rng))


def _codes_tensor(model, codes, name):
    codes = np.asarray(codes, dtype=np.float32)
    if codes.shape[-1] != model.N:
        raise ParameterError(f"{name} dimension {codes.shape[-1]} != model N={model.N}")
    if not np.all(np.isfinite(codes)):
        raise ParameterError(f"{name} contains non-finite values")
    return codes


def sample_clmdm(model: MotionDiffusion, anchor, L: int | None = None,
                 sched: DiffusionSchedule | None = None, rng=None,
                 ddim_stride: int | None = None) -> np.ndarray:
    """Sample ``L`` codes starting at ``anchor``; row 0 of the result is ``anchor`` itself.

    ``anchor`` may be (N,) or a batch (B, N); the result is (L, N) or (B, L, N).
    """
    if model.variant != "clmdm":
        raise ParameterError(f"expected a clmdm model, got {model.variant!r}")
    anchor = _codes_tensor(model, anchor, "anchor")
    single = anchor.ndim == 1
    anchors = anchor[None] if single else anchor
    L = model.L if L is None else L
    if L < 2:
        raise ParameterError(f"L must be >= 2, got {L}")
    sched = sched or model.schedule
    with torch.no_grad():
        cond = model.norm_codes(torch.from_numpy(anchors))
        m = sample_loop(model.eps, (len(anchors), L - 1, model.N), sched, cond,
                        as_generator(rng), ddim_stride=ddim_stride)
        residuals = m.double() * model.res_std.double()
    out = merge(anchors, residuals.numpy())
    return out[0] if single else out


def sample_lmdm_unconditional(model: MotionDiffusion, L: int | None = None,
                              sched: DiffusionSchedule | None = None, rng=None,
                              n: int | None = None, ddim_stride: int | None = None) -> np.ndarray:
    if model.variant != "uncond":
        raise ParameterError(f"expected an uncond model, got {model.variant!r}")
    L = model.L if L is None else L
    with torch.no_grad():
        x = sample_loop(model.eps, (n or 1, L, model.N), model.schedule if sched is None else sched,
                        None, as_generator(rng), ddim_stride=ddim_stride)
        a = (x * model.code_std + model.code_mean).numpy().astype(np.float32)
    return a[0] if n is None else a


def sample_transition(model: MotionDiffusion, start, target, T_trans: int | None = None,
                      sched: DiffusionSchedule | None = None, rng=None,
                      ddim_stride: int | None = None) -> np.ndarray:
    """(T_trans, N) codes bridging ``start`` to ``target``; both endpoints are copied exactly."""
    if model.variant != "transition":
        raise ParameterError(f"expected a transition model, got {model.variant!r}")
    start = _codes_tensor(model, start, "start").reshape(model.N)
    target = _codes_tensor(model, target, "target").reshape(model.N)
    T_trans = model.L if T_trans is None else T_trans
    if T_trans < 3:
        raise ParameterError(f"T_trans must be >= 3, got {T_trans}")
    with torch.no_grad():
        cond = (model.norm_codes(torch.from_numpy(start)[None]),
                model.norm_codes(torch.from_numpy(target)[None]))
        x = sample_loop(model.eps, (1, T_trans - 2, model.N), model.schedule if sched is None else sched,
                        cond, as_generator(rng), ddim_stride=ddim_stride)
        interior = (x[0] * model.code_std + model.code_mean).numpy().astype(np.float32)
    out = np.empty((T_trans, model.N), dtype=np.float32)
    out[0] = start
    out[1:-1] = interior
    out[-1] = target
    return out


def save_lmdm(model: MotionDiffusion, directory, config=None):
    extra = {"history": getattr(model, "history", [])}
    return save_module(directory, "lmdm", model, model.hparams(), config, extra)


def load_lmdm(directory) -> MotionDiffusion:
    manifest, state = load_state(directory, "lmdm")
    h = manifest["hparams"]
    model = MotionDiffusion(h["variant"], h["N"], h["L"], h["base"], h["mults"], h["schedule"])
    model.load_state_dict(state)
    return model.eval()


def config_dict(config: LMDMConfig) -> dict:
    return asdict(config)
