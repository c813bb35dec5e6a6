"""Flow-based image animator.

An encoder maps a frame to a motion code. The generator turns a source frame
plus a target code into a dense flow field and an inpainting mask. The source
is backward-warped by the flow and blended with a small refiner by the mask.
Training reconstructs a driving frame from a source frame of the same video.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_state, save_module
from .data import Video
from .errors import ParameterError, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass
class FlowField:
    displacement: np.ndarray  # (H, W, 2) pixels, (dx, dy)
    mask: np.ndarray  # (H, W) in [0, 1]


def warp_tensor(img: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp: ``out[p] = img[p + disp[p]]`` with border clamping.

    img: (B, C, H, W); disp: (B, 2, H, W) in pixels, channel 0 = dx, 1 = dy.
    Integer displacements reproduce shifted pixels exactly.
    """
    B, C, H, W = img.shape
    if disp.shape != (B, 2, H, W):
        raise ParameterError(f"flow shape {tuple(disp.shape)} does not match image {tuple(img.shape)}")
    ys = torch.arange(H, dtype=disp.dtype, device=disp.device).view(1, H, 1)
    xs = torch.arange(W, dtype=disp.dtype, device=disp.device).view(1, 1, W)
    x = (xs + disp[:, 0]).clamp(0, W - 1)
    y = (ys + disp[:, 1]).clamp(0, H - 1)
    x0f = torch.floor(x.detach())
    y0f = torch.floor(y.detach())
    wx = (x - x0f).unsqueeze(1)
    wy = (y - y0f).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    flat = img.reshape(B, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).view(B, 1, H * W).expand(B, C, H * W)
        return flat.gather(2, idx).view(B, C, H, W)

    return (gather(y0, x0) * (1 - wx) * (1 - wy) + gather(y0, x1) * wx * (1 - wy)
            + gather(y1, x0) * (1 - wx) * wy + gather(y1, x1) * wx * wy)


def _coords(B, H, W, like):
    ys = torch.linspace(-1.0, 1.0, H, dtype=like.dtype, device=like.device)
    xs = torch.linspace(-1.0, 1.0, W, dtype=like.dtype, device=like.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy]).expand(B, 2, H, W)


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2))


class AnimatorModel(nn.Module):
    def __init__(self, N: int = 20, H: int = 64, W: int = 64, C: int = 3, width: int = 32,
                 flow_scale: float | None = None):
        super().__init__()
        if H % 4 or W % 4:
            raise ParameterError(f"resolution must be divisible by 4, got {H}x{W}")
        self.N, self.H, self.W, self.C, self.width = N, H, W, C, width
        # largest displacement the generator can emit, in pixels
        self.flow_scale = float(flow_scale if flow_scale is not None else min(H, W) / 2)
        w = width
        self.encoder = nn.Sequential(
            _conv(C + 2, w, 2), _conv(w, 2 * w, 2), _conv(2 * w, 2 * w, 2), _conv(2 * w, 2 * w, 2),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(), nn.Linear(2 * w * 16, N),
        )
        self.source_net = nn.Sequential(_conv(C + 2, w, 2), _conv(w, 2 * w, 2))
        self.generator = nn.Sequential(
            _conv(2 * w + 2 + 2 * N, 2 * w), _conv(2 * w, 2 * w),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False), _conv(2 * w, w),
        )
        self.flow_head = nn.Conv2d(w, 3, 3, 1, 1)
        nn.init.zeros_(self.flow_head.weight)
        with torch.no_grad():
            self.flow_head.bias.copy_(torch.tensor([0.0, 0.0, 2.0]))
        wi = max(w // 2, 8)
        self.inpainter = nn.Sequential(
            _conv(2 * C + 1, wi), _conv(wi, wi), nn.Conv2d(wi, C, 3, 1, 1), nn.Sigmoid(),
        )

    def hparams(self) -> dict:
        return {"N": self.N, "H": self.H, "W": self.W, "C": self.C, "width": self.width,
                "flow_scale": self.flow_scale}

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) frames -> (B, N) codes."""
        return self.encoder(torch.cat([x, _coords(x.shape[0], self.H, self.W, x)], 1))

    def flow(self, source: torch.Tensor, code: torch.Tensor, source_code: torch.Tensor | None = None):
        """Displacement (B, 2, H, W) in pixels and mask (B, 1, H, W)."""
        B = source.shape[0]
        if source_code is None:
            source_code = self.encode(source)
        feats = self.source_net(torch.cat([source, _coords(B, self.H, self.W, source)], 1))
        h, w = feats.shape[-2:]
        codes = torch.cat([code, source_code], 1)[:, :, None, None].expand(B, 2 * self.N, h, w)
        out = self.flow_head(self.generator(torch.cat([feats, _coords(B, h, w, feats), codes], 1)))
        # flow and mask logits are predicted at half resolution; both are smooth
        out = F.interpolate(out, size=(self.H, self.W), mode="bilinear", align_corners=False)
        return torch.tanh(out[:, :2]) * self.flow_scale, torch.sigmoid(out[:, 2:])

    def inpaint(self, warped, mask, source):
        refined = self.inpainter(torch.cat([warped, source, mask], 1))
        return mask * warped + (1 - mask) * refined

    def forward(self, source: torch.Tensor, code: torch.Tensor):
        disp, mask = self.flow(source, code)
        warped = warp_tensor(source, disp)
        return self.inpaint(warped, mask, source), warped, disp, mask


# ---------------------------------------------------------------- numpy API

def _frame_tensor(model: AnimatorModel, frame) -> torch.Tensor:
    frame = np.asarray(frame, dtype=np.float32)
    if frame.shape != (model.H, model.W, model.C):
        raise ParameterError(
            f"frame shape {frame.shape} does not match model ({model.H}, {model.W}, {model.C})")
    return torch.from_numpy(frame).permute(2, 0, 1).unsqueeze(0).to(_param_dtype(model))


def _param_dtype(model):
    return next(model.parameters()).dtype


def _to_frame(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float32)


def _check_code(model, code) -> torch.Tensor:
    code = np.asarray(code, dtype=np.float32)
    if code.shape[-1] != model.N:
        raise ParameterError(f"code dimension {code.shape[-1]} != model N={model.N}")
    if not np.all(np.isfinite(code)):
        raise ParameterError("motion code contains non-finite values")
    return torch.from_numpy(code).to(_param_dtype(model))


@torch.no_grad()
def encode(model: AnimatorModel, frame) -> np.ndarray:
    return model.encode(_frame_tensor(model, frame))[0].cpu().numpy().astype(np.float32)


@torch.no_grad()
def encode_video(model: AnimatorModel, video: Video, batch_size: int = 1) -> np.ndarray:
    """Motion codes of every frame, shape (L, N).

    The default encodes frame by frame so that row i equals ``encode(frames[i])``
    bit for bit; larger batches are faster but convolution kernels may then
    round differently.
    """
    frames = video.frames
    if frames.shape[1:] != (model.H, model.W, model.C):
        raise ParameterError(
            f"video resolution {frames.shape[1:]} does not match model ({model.H}, {model.W}, {model.C})")
    out = []
    for i in range(0, len(frames), batch_size):
        x = torch.from_numpy(frames[i:i + batch_size]).permute(0, 3, 1, 2).to(_param_dtype(model))
        out.append(model.encode(x))
    return torch.cat(out).cpu().numpy().astype(np.float32)


@torch.no_grad()
def decode_flow(model: AnimatorModel, source, target_code) -> FlowField:
    code = _check_code(model, target_code).reshape(1, model.N)
    disp, mask = model.flow(_frame_tensor(model, source), code)
    return FlowField(disp[0].permute(1, 2, 0).cpu().numpy().astype(np.float32),
                     mask[0, 0].cpu().numpy().astype(np.float32))


def warp(frame, flow: FlowField) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    disp = np.asarray(flow.displacement, dtype=np.float32)
    if frame.ndim != 3 or disp.shape != frame.shape[:2] + (2,):
        raise ParameterError(f"flow shape {disp.shape} does not match frame {frame.shape}")
    img = torch.from_numpy(frame).permute(2, 0, 1).unsqueeze(0)
    d = torch.from_numpy(disp).permute(2, 0, 1).unsqueeze(0)
    return _to_frame(warp_tensor(img, d))


@torch.no_grad()
def inpaint(model: AnimatorModel, warped, mask, source) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != (model.H, model.W):
        raise ParameterError(f"mask shape {mask.shape} != ({model.H}, {model.W})")
    m = torch.from_numpy(mask)[None, None].to(_param_dtype(model))
    return _to_frame(model.inpaint(_frame_tensor(model, warped), m, _frame_tensor(model, source)))


@torch.no_grad()
def animate(model: AnimatorModel, x1, codes, batch_size: int = 64, fps: float = 25.0) -> Video:
    """Render one frame per motion code by warping and inpainting ``x1``."""
    codes = _check_code(model, codes)
    if codes.ndim != 2 or codes.shape[0] < 1:
        raise ParameterError("codes must be a non-empty (L, N) array")
    src = _frame_tensor(model, x1)
    src_code = model.encode(src)
    out = []
    for i in range(0, codes.shape[0], batch_size):
        c = codes[i:i + batch_size]
        s = src.expand(c.shape[0], -1, -1, -1)
        disp, mask = model.flow(s, c, src_code.expand(c.shape[0], -1))
        out.append(model.inpaint(warp_tensor(s, disp), mask, s))
    frames = torch.cat(out).permute(0, 2, 3, 1).cpu().numpy()
    return Video(np.clip(frames, 0.0, 1.0), fps=fps)


# ---------------------------------------------------------------- training

@dataclass
class AnimatorConfig:
    N: int = 20
    width: int = 32
    steps: int = 20000
    batch_size: int = 32
    lr: float = 2e-4
    coarse_scales: tuple[int, ...] = (2, 4, 8)
    # fraction of training over which the source/driving frame gap grows to the full clip
    curriculum: float = 0.5
    seed: int = 0
    log_every: int = 100


def _image_gradients(x):
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def reconstruction_loss(model: AnimatorModel, source, driving, coarse_scales=(2, 4, 8)):
    """L1 pixel + L1 image-gradient loss of the driving-frame reconstruction.

    Coarse terms warp average-pooled copies of the source with the pooled flow,
    which widens the basin of the bilinear sampler for large displacements.
    """
    code = model.encode(driving)
    disp, mask = model.flow(source, code)
    warped = warp_tensor(source, disp)
    out = model.inpaint(warped, mask, source)
    gx, gy = _image_gradients(out)
    tx, ty = _image_gradients(driving)
    loss = F.l1_loss(out, driving) + F.l1_loss(gx, tx) + F.l1_loss(gy, ty)
    for s in coarse_scales:
        coarse = warp_tensor(F.avg_pool2d(source, s), F.avg_pool2d(disp, s) / s)
        loss = loss + F.l1_loss(coarse, F.avg_pool2d(driving, s))
    return loss


class FramePool:
    """Training frames held as uint8, (n_videos, L, C, H, W)."""

    def __init__(self, dataset):
        first = dataset[0]
        L, H, W, C = first.frames.shape
        self.data = torch.empty((len(dataset), L, C, H, W), dtype=torch.uint8)
        for i in range(len(dataset)):
            v = first if i == 0 else dataset[i]
            if v.frames.shape != (L, H, W, C):
                raise ParameterError(f"video {i} has shape {v.frames.shape}, expected {(L, H, W, C)}")
            self.data[i] = torch.from_numpy(
                np.round(v.frames * 255).astype(np.uint8)).permute(0, 3, 1, 2)
        self.shape = (L, H, W, C)

    def pairs(self, batch_size, gen: torch.Generator, max_gap: int | None = None):
        n, L = self.data.shape[:2]
        vid = torch.randint(0, n, (batch_size,), generator=gen)
        i = torch.randint(0, L, (batch_size,), generator=gen)
        if max_gap is None or max_gap >= L - 1:
            j = torch.randint(0, L, (batch_size,), generator=gen)
        else:
            j = (i + torch.randint(-max_gap, max_gap + 1, (batch_size,), generator=gen)).clamp(0, L - 1)
        return self.data[vid, i].float() / 255.0, self.data[vid, j].float() / 255.0


def _max_gap(step, config, L):
    if config.curriculum <= 0:
        return None
    frac = min(1.0, step / (config.curriculum * config.steps))
    return max(1, int(round(frac * (L - 1))))


def train_animator(dataset, config: AnimatorConfig | None = None, on_log=None,
                   model: AnimatorModel | None = None) -> tuple[AnimatorModel, list[dict]]:
    """Self-supervised training on (source, driving) pairs drawn from one video.

    Returns the model and the logged history of ``{step, loss, lr, wallclock}``.
    """
    config = config or AnimatorConfig()
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    torch.manual_seed(config.seed)
    pool = FramePool(dataset)
    L, H, W, C = pool.shape
    if model is None:
        model = AnimatorModel(config.N, H, W, C, config.width)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    history, start, running = [], time.time(), 0.0
    model.train()
    for step in range(1, config.steps + 1):
        src, drv = pool.pairs(config.batch_size, gen, _max_gap(step, config, L))
        loss = reconstruction_loss(model, src, drv, config.coarse_scales)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"animator loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        running += loss.item()
        if step % config.log_every == 0 or step == config.steps:
            n = step % config.log_every or config.log_every
            rec = {"step": step, "loss": running / n, "lr": config.lr,
                   "wallclock": time.time() - start}
            running = 0.0
            history.append(rec)
            log.info("animator %s", rec)
            if on_log:
                on_log(rec)
    model.eval()
    return model, history


def config_dict(config: AnimatorConfig) -> dict:
    d = asdict(config)
    d["coarse_scales"] = list(d["coarse_scales"])
    return d


def save_animator(model: AnimatorModel, directory, config=None):
    return save_module(directory, "animator", model, model.hparams(), config)


def load_animator(directory) -> AnimatorModel:
    manifest, state = load_state(directory, "animator")
    model = AnimatorModel(**manifest["hparams"])
    model.load_state_dict(state)
    return model.eval()
