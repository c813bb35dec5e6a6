"""Synthetic sprite videos and frame-directory video I/O.

Each video shows one textured sprite moving over a flat background. Motion
(trajectory) and appearance (shape, colours, texture) come from two separate
seeds so either can be swapped while the other stays fixed.
"""
from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline

from .errors import ParameterError, VideoIOError

TRAJECTORY_KINDS = ("sinusoid-sum", "spline", "articulated-swing")
FRAME_PATTERN = "frame_{:05d}.png"


@dataclass
class Video:
    """Frames stacked as an (L, H, W, C) float32 array with values in [0, 1]."""

    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4:
            raise ParameterError(f"frames must be (L, H, W, C), got shape {frames.shape}")
        if frames.shape[3] not in (1, 3):
            raise ParameterError(f"channel count must be 1 or 3, got {frames.shape[3]}")
        if frames.shape[0] < 1:
            raise ParameterError("video has no frames")
        self.frames = frames

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]


@dataclass(frozen=True)
class SpriteMotionParams:
    trajectory_kind: str = "sinusoid-sum"
    amplitude: float = 10.0
    n_harmonics: int = 2
    seed: int = 0

    def validate(self, height: int, width: int) -> None:
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise ParameterError(f"unknown trajectory_kind {self.trajectory_kind!r}")
        if not 1 <= self.n_harmonics <= 4:
            raise ParameterError(f"n_harmonics must be in [1, 4], got {self.n_harmonics}")
        if not 0 <= self.amplitude < min(height, width) / 4:
            raise ParameterError(
                f"amplitude must be in [0, {min(height, width) / 4}) px, got {self.amplitude}"
            )


@dataclass(frozen=True)
class Appearance:
    shape: str  # "box" or "ellipse"
    half_extent: tuple[float, float]
    background: tuple[float, ...]
    base: tuple[float, ...]
    contrast: tuple[float, ...]
    wavenumber: tuple[float, float]
    limb_color: tuple[float, ...]


def _check_dims(height: int, width: int, channels: int) -> None:
    if height < 16 or width < 16:
        raise ParameterError(f"frames must be at least 16x16, got {height}x{width}")
    if channels not in (1, 3):
        raise ParameterError(f"channels must be 1 or 3, got {channels}")


def sample_appearance(seed: int, height: int, width: int, channels: int) -> Appearance:
    rng = np.random.default_rng([seed, 1])
    m = min(height, width)
    bg = rng.uniform(0.1, 0.9, size=channels)
    # push the sprite base colour at least 0.3 away from the background in every channel
    direction = np.where(bg < 0.5, 1.0, -1.0)
    base = np.clip(bg + direction * rng.uniform(0.3, 0.55, size=channels), 0.0, 1.0)
    contrast = direction * rng.uniform(0.05, 0.15, size=channels)
    limb = np.clip(bg + direction * rng.uniform(0.3, 0.55, size=channels), 0.0, 1.0)
    return Appearance(
        shape=str(rng.choice(["box", "ellipse"])),
        half_extent=(float(rng.uniform(m / 10, m / 6)), float(rng.uniform(m / 10, m / 6))),
        background=tuple(bg.tolist()),
        base=tuple(base.tolist()),
        contrast=tuple(contrast.tolist()),
        wavenumber=(float(rng.uniform(0.3, 1.2)), float(rng.uniform(0.3, 1.2))),
        limb_color=tuple(limb.tolist()),
    )


def _sinusoid_offsets(rng, length, amplitude, n_harmonics):
    t = np.arange(length, dtype=np.float64)
    out = np.zeros((length, 2))
    for axis in range(2):
        weights = rng.dirichlet(np.ones(n_harmonics))
        periods = rng.uniform(24.0, 96.0, size=n_harmonics)
        phases = rng.uniform(0.0, 2 * np.pi, size=n_harmonics)
        for a, p, ph in zip(amplitude * weights, periods, phases):
            out[:, axis] += a * np.sin(2 * np.pi * t / p + ph)
    return out


def _spline_offsets(rng, length, amplitude):
    knots_t = np.arange(0, length + 16, 16, dtype=np.float64)
    knots = rng.uniform(-amplitude, amplitude, size=(len(knots_t), 2))
    curve = CubicSpline(knots_t, knots, bc_type="natural")(np.arange(length, dtype=np.float64))
    return np.clip(curve, -amplitude, amplitude)


def sprite_trajectory(params: SpriteMotionParams, length: int, height: int, width: int):
    """Per-frame sprite centre (x, y) in pixels and limb angle in radians.

    Pixel (row i, column j) has its centre at (x=j, y=i).
    """
    params.validate(height, width)
    rng = np.random.default_rng([params.seed, 0])
    centre = np.array([(width - 1) / 2, (height - 1) / 2])
    if params.trajectory_kind == "spline":
        offsets = _spline_offsets(rng, length, params.amplitude)
    elif params.trajectory_kind == "sinusoid-sum":
        offsets = _sinusoid_offsets(rng, length, params.amplitude, params.n_harmonics)
    else:
        # the body only travels half the amplitude so the limb stays in frame
        offsets = _sinusoid_offsets(rng, length, 0.5 * params.amplitude, params.n_harmonics)
    angles = np.zeros(length)
    if params.trajectory_kind == "articulated-swing":
        rest = rng.uniform(-0.5, 0.5)
        swing = rng.uniform(0.3, 1.0)
        period = rng.uniform(16.0, 48.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        angles = rest + swing * np.sin(2 * np.pi * np.arange(length) / period + phase)
    return centre + offsets, angles


def _box_sdf(u, v, hx, hy):
    qx = np.abs(u) - hx
    qy = np.abs(v) - hy
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    return outside + np.minimum(np.maximum(qx, qy), 0.0)


def _ellipse_sdf(u, v, hx, hy):
    return (np.hypot(u / hx, v / hy) - 1.0) * min(hx, hy)


def render_sprite_video(
    params: SpriteMotionParams,
    length: int,
    height: int = 64,
    width: int = 64,
    channels: int = 3,
    appearance_seed: int | None = None,
    fps: float = 25.0,
) -> Video:
    """Render one video. ``appearance_seed`` defaults to the motion seed."""
    _check_dims(height, width, channels)
    if length < 1:
        raise ParameterError(f"length must be >= 1, got {length}")
    look = sample_appearance(params.seed if appearance_seed is None else appearance_seed,
                             height, width, channels)
    centres, angles = sprite_trajectory(params, length, height, width)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    u = xs[None] - centres[:, 0, None, None]
    v = ys[None] - centres[:, 1, None, None]
    hx, hy = look.half_extent
    sdf = _box_sdf if look.shape == "box" else _ellipse_sdf
    alpha = np.clip(0.5 - sdf(u, v, hx, hy), 0.0, 1.0)[..., None]
    kx, ky = look.wavenumber
    pattern = (np.cos(kx * u) * np.cos(ky * v))[..., None]
    colour = np.asarray(look.base) + np.asarray(look.contrast) * pattern
    bg = np.asarray(look.background)
    frames = bg * (1.0 - alpha) + colour * alpha

    if params.trajectory_kind == "articulated-swing":
        m = min(height, width)
        limb_len = m / 8
        limb_half = m / 32
        # pivot on the top edge of the body; angle 0 points straight up
        pu = u
        pv = v + hy
        ca = np.cos(angles)[:, None, None]
        sa = np.sin(angles)[:, None, None]
        along = -(pv * ca) + pu * sa
        across = pu * ca + pv * sa
        limb_alpha = np.clip(0.5 - _box_sdf(across, along - limb_len / 2, limb_half, limb_len / 2),
                             0.0, 1.0)[..., None]
        frames = frames * (1.0 - limb_alpha) + np.asarray(look.limb_color) * limb_alpha

    return Video(np.clip(frames, 0.0, 1.0).astype(np.float32), fps=fps)


def _derive_seeds(seed: int, n: int) -> list[tuple[int, int]]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [tuple(int(s) for s in c.generate_state(2)) for c in children]


class SpriteDataset(Sequence):
    """Lazily rendered collection of sprite videos.

    Videos are rendered on access; indexing the same item twice gives identical
    arrays. ``motion[i]`` and ``appearance_seeds[i]`` fully describe video ``i``.
    """

    def __init__(self, motion, appearance_seeds, length, height, width, channels, fps=25.0):
        self.motion = list(motion)
        self.appearance_seeds = list(appearance_seeds)
        self.length = length
        self.height = height
        self.width = width
        self.channels = channels
        self.fps = fps

    def __len__(self):
        return len(self.motion)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        return render_sprite_video(self.motion[idx], self.length, self.height, self.width,
                                   self.channels, self.appearance_seeds[idx], self.fps)

    def subset(self, indices) -> SpriteDataset:
        return SpriteDataset([self.motion[i] for i in indices],
                             [self.appearance_seeds[i] for i in indices],
                             self.length, self.height, self.width, self.channels, self.fps)


def make_sprite_dataset(
    n_videos: int,
    length: int,
    height: int,
    width: int,
    params: SpriteMotionParams,
    channels: int = 3,
    fps: float = 25.0,
) -> SpriteDataset:
    """Build a deterministic dataset of ``n_videos`` sprite clips.

    ``params.seed`` is the dataset seed; every video gets its own motion seed and
    an independent appearance seed derived from it.
    """
    if n_videos < 1:
        raise ParameterError(f"n_videos must be >= 1, got {n_videos}")
    if length < 2:
        raise ParameterError(f"length must be >= 2, got {length}")
    _check_dims(height, width, channels)
    params.validate(height, width)
    seeds = _derive_seeds(params.seed, n_videos)
    motion = [SpriteMotionParams(params.trajectory_kind, params.amplitude, params.n_harmonics, m)
              for m, _ in seeds]
    return SpriteDataset(motion, [a for _, a in seeds], length, height, width, channels, fps)


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frame(frame: np.ndarray, path) -> None:
    data = _to_uint8(frame)
    if data.shape[-1] == 1:
        Image.fromarray(data[..., 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def load_frame(path, channels: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if channels is None:
                channels = 1 if img.mode in ("L", "I", "I;16", "1") else 3
            img = img.convert("L" if channels == 1 else "RGB")
            data = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise VideoIOError(f"cannot read image {path}: {exc}") from exc
    if data.ndim == 2:
        data = data[..., None]
    return data


def save_video(video: Video, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.frames):
        save_frame(frame, directory / FRAME_PATTERN.format(i))
    L, H, W, C = video.frames.shape
    meta = {"fps": video.fps, "L": L, "H": H, "W": W, "C": C}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))


def load_video(directory) -> Video:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise VideoIOError(f"{directory}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        L, H, W, C = (int(meta[k]) for k in ("L", "H", "W", "C"))
    except (ValueError, KeyError) as exc:
        raise VideoIOError(f"{directory}: corrupt meta.json ({exc})") from exc

    frames, bad = [], []
    for i in range(L):
        path = directory / FRAME_PATTERN.format(i)
        try:
            frame = load_frame(path, C)
        except VideoIOError:
            bad.append(i)
            continue
        if frame.shape != (H, W, C):
            bad.append(i)
            continue
        frames.append(frame)
    if bad:
        raise VideoIOError(f"{directory}: missing or corrupt frames at indices {bad}")
    if not frames:
        raise VideoIOError(f"{directory}: no frames")
    return Video(np.stack(frames), fps=float(meta.get("fps", 25.0)))


def save_dataset(dataset: SpriteDataset, root) -> Path:
    """Write every video as a frame directory plus a ``dataset.json`` manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(dataset)):
        name = f"video_{i:05d}"
        save_video(dataset[i], root / name)
        entries.append({"dir": name, "motion": asdict(dataset.motion[i]),
                        "appearance_seed": dataset.appearance_seeds[i]})
    manifest = {
        "length": dataset.length, "height": dataset.height, "width": dataset.width,
        "channels": dataset.channels, "fps": dataset.fps, "videos": entries,
    }
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return root


@dataclass
class FrameDirDataset(Sequence):
    """Videos listed in a ``dataset.json`` manifest, loaded on access."""

    root: Path
    dirs: list[str]
    length: int
    height: int
    width: int
    channels: int
    motion: list[SpriteMotionParams] = field(default_factory=list)

    def __len__(self):
        return len(self.dirs)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        return load_video(self.root / self.dirs[idx])

    def subset(self, indices) -> FrameDirDataset:
        return FrameDirDataset(self.root, [self.dirs[i] for i in indices], self.length,
                               self.height, self.width, self.channels,
                               [self.motion[i] for i in indices] if self.motion else [])


def load_dataset(root) -> FrameDirDataset:
    root = Path(root)
    path = root / "dataset.json"
    if not path.is_file():
        raise VideoIOError(f"{root}: missing dataset.json")
    manifest = json.loads(path.read_text())
    return FrameDirDataset(
        root=root,
        dirs=[v["dir"] for v in manifest["videos"]],
        length=manifest["length"], height=manifest["height"], width=manifest["width"],
        channels=manifest["channels"],
        motion=[SpriteMotionParams(**v["motion"]) for v in manifest["videos"]],
    )


def split_indices(n: int, val_fraction: float, seed: int = 0) -> tuple[list[int], list[int]]:
    """Deterministic train/validation split over ``range(n)``."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if n > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), n - 1)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())

