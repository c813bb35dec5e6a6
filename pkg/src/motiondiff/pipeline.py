"""End-to-end synthesis: starting frame, motion codes, then warp-and-inpaint.

Every entry point is a pure function of (models, inputs, seed). A seed is
expanded into independent streams for the starting code, the starting frame,
the chunk sampler and the transition sampler, so enabling transitions never
perturbs the chunks that would have been drawn without them.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import animator as anim
from . import lmdm
from . import starting_frame as sf
from .data import Video
from .errors import ConfigurationError, NumericError, ParameterError

STREAMS = ("alpha1", "frame", "motion", "transition")


def seed_streams(seed: int) -> dict[str, int]:
    """Independent 63-bit seeds for each random stage of one generation call."""
    state = np.random.SeedSequence(int(seed)).generate_state(len(STREAMS), dtype=np.uint64)
    return {name: int(s >> np.uint64(1)) for name, s in zip(STREAMS, state)}


@dataclass
class Models:
    animator: anim.AnimatorModel
    clmdm: lmdm.MotionDiffusion
    simple_dm: sf.SimpleDM | None = None
    cddpm: sf.CDDPM | None = None
    transition: lmdm.MotionDiffusion | None = None

    def check(self) -> "Models":
        """Raise ConfigurationError naming the first field on which two checkpoints disagree."""
        expected = {"clmdm": "clmdm", "transition": "transition"}
        for name, variant in expected.items():
            m = getattr(self, name)
            if m is not None and m.variant != variant:
                raise ConfigurationError(f"variant mismatch: {name} checkpoint holds a {m.variant!r} model")
        ref = self.animator
        for name in ("clmdm", "simple_dm", "cddpm", "transition"):
            m = getattr(self, name)
            if m is not None and m.N != ref.N:
                raise ConfigurationError(f"N mismatch: animator has N={ref.N}, {name} has N={m.N}")
        if self.cddpm is not None:
            for f in ("H", "W", "C"):
                a, b = getattr(ref, f), getattr(self.cddpm, f)
                if a != b:
                    raise ConfigurationError(f"{f} mismatch: animator has {f}={a}, cddpm has {f}={b}")
        return self

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ConfigurationError(f"missing model: {name}")

    @classmethod
    def load(cls, animator, clmdm, simple_dm=None, cddpm=None, transition=None) -> "Models":
        return cls(
            anim.load_animator(animator),
            lmdm.load_lmdm(clmdm),
            sf.load_simple_dm(simple_dm) if simple_dm else None,
            sf.load_cddpm(cddpm) if cddpm else None,
            lmdm.load_lmdm(transition) if transition else None,
        ).check()


@dataclass
class RolloutState:
    last_code: np.ndarray
    chunk_index: int = 0
    chunk_mean_history: list = field(default_factory=list)
    rng_state: object = None

    def push(self, chunk: np.ndarray):
        self.last_code = chunk[-1].copy()
        self.chunk_mean_history.append(chunk.astype(np.float64).mean(0))
        self.chunk_index += 1


@dataclass
class RolloutResult:
    codes: np.ndarray
    anchors: list
    transitions: list  # (start_row, chunk_index) per inserted segment
    state: RolloutState

    def record(self) -> dict:
        return {"anchors": [a.tolist() for a in self.anchors],
                "transitions": [{"start_row": r, "after_chunk": k} for r, k in self.transitions],
                "n_codes": int(len(self.codes))}


def _cosine(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def detect_loop(state: RolloutState, window: int = 2, threshold: float = 0.98, center=None) -> bool:
    """True when the last ``window`` chunk means are pairwise-consecutively similar.

    Each of the ``window - 1`` cosine similarities between neighbouring chunk
    means must exceed ``threshold``. ``center`` (usually the corpus code mean)
    is subtracted first so that a shared offset does not make every pair look alike.
    """
    if window < 2:
        raise ParameterError(f"window must be >= 2, got {window}")
    hist = state.chunk_mean_history
    if len(hist) < window:
        return False
    means = [np.asarray(h, dtype=np.float64) for h in hist[-window:]]
    if center is not None:
        means = [m - np.asarray(center, dtype=np.float64) for m in means]
    return all(_cosine(a, b) > threshold for a, b in zip(means, means[1:]))


def _check_chunk(chunk, k):
    if not np.all(np.isfinite(chunk)):
        raise NumericError(f"non-finite motion codes in chunk {k}")


def rollout_codes(models: Models, alpha1, n_chunks: int, chunk_len: int, seed: int,
                  with_transitions: bool = False, window: int = 2, threshold: float = 0.98,
                  T_trans: int | None = None, ddim_stride: int | None = None) -> RolloutResult:
    """Autoregressive chunked sampling; each chunk is anchored at the previous chunk's last code.

    Output length is ``1 + n_chunks * (chunk_len - 1)`` plus ``T_trans - 1`` per
    inserted transition.
    """
    if n_chunks < 1:
        raise ParameterError(f"n_chunks must be >= 1, got {n_chunks}")
    if chunk_len < 2:
        raise ParameterError(f"chunk_len must be >= 2, got {chunk_len}")
    if with_transitions:
        models.require("transition", "simple_dm")
    streams = seed_streams(seed)
    gen = torch.Generator().manual_seed(streams["motion"])
    trans_gen = torch.Generator().manual_seed(streams["transition"])
    anchor = np.asarray(alpha1, dtype=np.float32).reshape(-1)
    state = RolloutState(anchor.copy(), rng_state=gen.get_state())
    center = models.clmdm.code_mean.numpy()
    pieces, anchors, transitions = [anchor[None]], [], []
    n_rows = 1
    for k in range(n_chunks):
        anchors.append(anchor.copy())
        chunk = lmdm.sample_clmdm(models.clmdm, anchor, chunk_len, rng=gen, ddim_stride=ddim_stride)
        _check_chunk(chunk, k)
        pieces.append(chunk[1:])
        n_rows += chunk_len - 1
        state.push(chunk)
        state.rng_state = gen.get_state()
        anchor = state.last_code
        if with_transitions and k < n_chunks - 1 and detect_loop(state, window, threshold, center):
            target = sf.sample_alpha1(models.simple_dm, rng=trans_gen)
            seg = lmdm.sample_transition(models.transition, anchor, target, T_trans, rng=trans_gen,
                                         ddim_stride=ddim_stride)
            _check_chunk(seg, k)
            transitions.append((n_rows - 1, k))
            pieces.append(seg[1:])
            n_rows += len(seg) - 1
            anchor = seg[-1].copy()
            state.last_code = anchor.copy()
    return RolloutResult(np.concatenate(pieces, 0), anchors, transitions, state)


def rollout(models: Models, x1, alpha1, n_chunks: int, chunk_len: int, seed: int, **kw) -> Video:
    res = rollout_codes(models, alpha1, n_chunks, chunk_len, seed, **kw)
    return anim.animate(models.animator, x1, res.codes)


def rollout_with_transitions(models: Models, x1, alpha1, n_chunks: int, chunk_len: int, seed: int,
                             window: int = 2, threshold: float = 0.98, T_trans: int | None = None,
                             **kw) -> Video:
    res = rollout_codes(models, alpha1, n_chunks, chunk_len, seed, with_transitions=True,
                        window=window, threshold=threshold, T_trans=T_trans, **kw)
    return anim.animate(models.animator, x1, res.codes)


def motion_codes(models: Models, alpha1, n_frames: int, seed: int, **kw) -> RolloutResult:
    """``n_frames`` codes from ``alpha1``: one chunk of the model length, truncated, or a rollout."""
    if n_frames < 1:
        raise ParameterError(f"n_frames must be >= 1, got {n_frames}")
    L = models.clmdm.L
    n_chunks = max(1, math.ceil((n_frames - 1) / (L - 1)))
    res = rollout_codes(models, alpha1, n_chunks, L, seed, **kw)
    res.codes = res.codes[:n_frames]
    return res


def starting_point(models: Models, seed: int, ddim_stride: int | None = None):
    """Sample (x1, alpha1) from the code prior and the code-conditioned frame model."""
    models.require("simple_dm", "cddpm")
    streams = seed_streams(seed)
    alpha1 = sf.sample_alpha1(models.simple_dm, rng=streams["alpha1"], ddim_stride=ddim_stride)
    x1 = sf.sample_frame(models.cddpm, alpha1, rng=streams["frame"], ddim_stride=ddim_stride)
    return x1, alpha1


def generate_unconditional(models: Models, n_frames: int, seed: int, ddim_stride: int | None = None,
                           details: bool = False):
    if n_frames < 1:
        raise ParameterError(f"n_frames must be >= 1, got {n_frames}")
    models.check()
    x1, alpha1 = starting_point(models, seed, ddim_stride)
    res = motion_codes(models, alpha1, n_frames, seed, ddim_stride=ddim_stride)
    video = anim.animate(models.animator, x1, res.codes)
    return (video, x1, res) if details else video


def generate_conditional(models: Models, image_path, n_frames: int, seed: int,
                         ddim_stride: int | None = None, details: bool = False):
    if n_frames < 1:
        raise ParameterError(f"n_frames must be >= 1, got {n_frames}")
    models.check()
    x1, alpha1 = sf.from_image(models.animator, image_path)
    res = motion_codes(models, alpha1, n_frames, seed, ddim_stride=ddim_stride)
    video = anim.animate(models.animator, x1, res.codes)
    return (video, x1, res) if details else video


def reanchored_codes(models: Models, codes, new_x1) -> lmdm.ResidualSequence:
    frame = np.asarray(new_x1, dtype=np.float32)
    a = models.animator
    if frame.shape != (a.H, a.W, a.C):
        raise ParameterError(f"new_x1 has shape {frame.shape}, expected ({a.H}, {a.W}, {a.C})")
    return lmdm.reanchor(codes, anim.encode(a, frame))


def edit_appearance(models: Models, codes, new_x1) -> Video:
    """Replay the motion residuals of ``codes`` on a different starting frame."""
    parts = reanchored_codes(models, codes, new_x1)
    return anim.animate(models.animator, new_x1, lmdm.merge(parts.anchor, parts.residuals))


def write_run_record(directory, record: dict) -> Path:
    path = Path(directory) / "run.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, default=_jsonable))
    return path


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)
