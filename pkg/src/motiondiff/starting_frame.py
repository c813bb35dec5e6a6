"""Starting frame x1 and starting code alpha1.

Either take an existing image and encode it, or sample alpha1 from a
frame-wise code DM and synthesize x1 with an image DDPM conditioned on it.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import animator as anim
from .checkpoint import load_state, save_module
from .data import load_frame
from .diffusion import make_schedule, safe_std, sample_loop, sample_steps, training_loss
from .errors import ParameterError, TrainingDivergedError
from .lmdm import as_generator
from .nets import ImageUNet, MLPDenoiser

log = logging.getLogger(__name__)


@dataclass
class SimpleDMConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 1e-3
    steps: int = 8000
    batch_size: int = 256
    hidden: int = 256
    ema_decay: float = 0.999
    seed: int = 0
    log_every: int = 100


@dataclass
class CDDPMConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 2e-4
    steps: int = 20000
    batch_size: int = 16
    base_channels: int = 32
    ema_decay: float = 0.999
    seed: int = 0
    log_every: int = 100


class SimpleDM(nn.Module):
    """MLP denoiser over single motion codes, in per-dimension z-scored units."""

    def __init__(self, N: int = 20, hidden: int = 256, schedule: dict | None = None):
        super().__init__()
        self.N = N
        self.net = MLPDenoiser(N, hidden)
        self.schedule = make_schedule(**(schedule or {}))
        self.register_buffer("code_mean", torch.zeros(N))
        self.register_buffer("code_std", torch.ones(N))

    def hparams(self):
        return {"N": self.N, "hidden": self.net.hidden, "schedule": self.schedule.to_dict()}

    def eps(self, x_t, t, cond=None):
        return self.net(x_t, t)


class CDDPM(nn.Module):
    """Image DDPM on [-1, 1]-scaled frames, conditioned on a z-scored motion code."""

    def __init__(self, H: int = 64, W: int = 64, C: int = 3, N: int = 20, base: int = 32,
                 schedule: dict | None = None):
        super().__init__()
        self.H, self.W, self.C, self.N = H, W, C, N
        self.net = ImageUNet(C, base, (1, 2, 2), cond_dim=N)
        self.schedule = make_schedule(**(schedule or {}))
        self.register_buffer("code_mean", torch.zeros(N))
        self.register_buffer("code_std", torch.ones(N))

    def hparams(self):
        return {"H": self.H, "W": self.W, "C": self.C, "N": self.N, "base": self.net.base,
                "schedule": self.schedule.to_dict()}

    def eps(self, x_t, t, cond):
        return self.net(x_t, t, cond)


def _fit(model, batch_fn, lr, steps, seed, log_every, name, on_log=None, ema_decay=0.0):
    """Adam with cosine learning-rate decay; optionally swaps in an EMA of the weights at the end."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps, eta_min=lr * 0.05)
    ema = torch.optim.swa_utils.AveragedModel(
        model, multi_avg_fn=torch.optim.swa_utils.get_ema_multi_avg_fn(ema_decay)) if ema_decay else None
    history, start, running = [], time.time(), 0.0
    model.train()
    for step in range(1, steps + 1):
        x0, cond = batch_fn(gen)
        t = sample_steps(x0.shape[0], model.schedule, gen)
        eps = torch.randn(x0.shape, generator=gen)
        loss = training_loss(model.eps, x0, t, eps, cond, model.schedule)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"{name} loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec_lr = sched.get_last_lr()[0]
        sched.step()
        if ema is not None:
            ema.update_parameters(model)
        running += loss.item()
        if step % log_every == 0 or step == steps:
            k = step % log_every or log_every
            rec = {"step": step, "loss": running / k, "lr": rec_lr, "wallclock": time.time() - start}
            running = 0.0
            history.append(rec)
            log.info("%s %s", name, rec)
            if on_log:
                on_log(rec)
    if ema is not None:
        model.load_state_dict(ema.module.state_dict())
    model.eval()
    model.history = history
    return model


def train_simple_dm(all_codes, config: SimpleDMConfig | None = None, on_log=None) -> SimpleDM:
    config = config or SimpleDMConfig()
    codes = np.asarray(all_codes, dtype=np.float32)
    codes = codes.reshape(-1, codes.shape[-1]) if codes.size else codes
    if codes.size == 0:
        raise ParameterError("empty code corpus")
    model = SimpleDM(codes.shape[1], config.hidden,
                     {"T": config.T, "beta_start": config.beta_start, "beta_end": config.beta_end})
    model.code_mean.copy_(torch.from_numpy(codes.mean(0)))
    model.code_std.copy_(torch.from_numpy(safe_std(codes, 0)))
    data = (torch.from_numpy(codes) - model.code_mean) / model.code_std

    def batch(gen):
        return data[torch.randint(0, len(data), (config.batch_size,), generator=gen)], None

    return _fit(model, batch, config.lr, config.steps, config.seed, config.log_every, "simple_dm", on_log,
                config.ema_decay)


def sample_alpha1(model: SimpleDM, sched=None, rng=None, n: int | None = None,
                  ddim_stride: int | None = None) -> np.ndarray:
    """One code (N,) or ``n`` codes (n, N) drawn from the frame-wise code prior."""
    with torch.no_grad():
        x = sample_loop(model.eps, (n or 1, model.N), sched or model.schedule, None,
                        as_generator(rng), ddim_stride=ddim_stride)
        codes = (x * model.code_std + model.code_mean).numpy().astype(np.float32)
    return codes[0] if n is None else codes


def train_cddpm(frames, codes, config: CDDPMConfig | None = None, on_log=None) -> CDDPM:
    """Fit the image DDPM on (frame, code) pairs; codes (M, N).

    Frames are (M, H, W, C), either float in [0, 1] or uint8; uint8 input is
    kept as bytes and scaled per batch.
    """
    config = config or CDDPMConfig()
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = frames.astype(np.float32)
    codes = np.asarray(codes, dtype=np.float32)
    if frames.ndim != 4 or len(frames) == 0 or len(frames) != len(codes):
        raise ParameterError(f"need matching (M, H, W, C) frames and (M, N) codes, got {frames.shape}, {codes.shape}")
    M, H, W, C = frames.shape
    model = CDDPM(H, W, C, codes.shape[1], config.base_channels,
                  {"T": config.T, "beta_start": config.beta_start, "beta_end": config.beta_end})
    model.code_mean.copy_(torch.from_numpy(codes.mean(0)))
    model.code_std.copy_(torch.from_numpy(safe_std(codes, 0)))
    images = torch.from_numpy(frames).permute(0, 3, 1, 2)
    scale = 255.0 if frames.dtype == np.uint8 else 1.0
    conds = (torch.from_numpy(codes) - model.code_mean) / model.code_std

    def batch(gen):
        idx = torch.randint(0, M, (config.batch_size,), generator=gen)
        return images[idx].float() / scale * 2 - 1, conds[idx]

    return _fit(model, batch, config.lr, config.steps, config.seed, config.log_every, "cddpm", on_log,
                config.ema_decay)


def sample_frame(model: CDDPM, alpha1, sched=None, rng=None, ddim_stride: int | None = None) -> np.ndarray:
    """Synthesize an (H, W, C) frame in [0, 1] for the motion code ``alpha1``."""
    alpha1 = np.asarray(alpha1, dtype=np.float32).reshape(-1)
    if alpha1.shape[0] != model.N or not np.all(np.isfinite(alpha1)):
        raise ParameterError(f"alpha1 must be a finite length-{model.N} vector")
    with torch.no_grad():
        cond = (torch.from_numpy(alpha1)[None] - model.code_mean) / model.code_std
        x = sample_loop(model.eps, (1, model.C, model.H, model.W), sched or model.schedule, cond,
                        as_generator(rng), ddim_stride=ddim_stride)
    frame = ((x[0].permute(1, 2, 0) + 1) / 2).clamp(0, 1)
    return frame.numpy().astype(np.float32)


def from_image(model: anim.AnimatorModel, path) -> tuple[np.ndarray, np.ndarray]:
    """Load an image at the animator's resolution and return it with its motion code."""
    frame = load_frame(path, model.C)
    if frame.shape != (model.H, model.W, model.C):
        raise ParameterError(f"image {path} has shape {frame.shape}, expected ({model.H}, {model.W}, {model.C})")
    return frame, anim.encode(model, frame)


def save_simple_dm(model: SimpleDM, directory, config=None):
    return save_module(directory, "simple_dm", model, model.hparams(), config,
                       {"history": getattr(model, "history", [])})


def load_simple_dm(directory) -> SimpleDM:
    manifest, state = load_state(directory, "simple_dm")
    h = manifest["hparams"]
    model = SimpleDM(h["N"], h["hidden"], h["schedule"])
    model.load_state_dict(state)
    return model.eval()


def save_cddpm(model: CDDPM, directory, config=None):
    return save_module(directory, "cddpm", model, model.hparams(), config,
                       {"history": getattr(model, "history", [])})


def load_cddpm(directory) -> CDDPM:
    manifest, state = load_state(directory, "cddpm")
    h = manifest["hparams"]
    model = CDDPM(h["H"], h["W"], h["C"], h["N"], h["base"], h["schedule"])
    model.load_state_dict(state)
    return model.eval()
