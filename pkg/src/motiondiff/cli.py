"""Command-line entry point.

Every command reads one validated config. Trained artifacts live under
``<runs>/<hash>/<stage>/``, where the hash covers only the training-relevant
sections, so sampling settings can change without invalidating checkpoints.
Training stages that already have a checkpoint are skipped unless ``--force``.

Exit status: 0 on success, 1 for invalid configs or inputs, 2 when a stage
this command depends on has not been run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import animator as anim
from . import config as cfg
from . import data, lmdm, metrics, pipeline
from . import starting_frame as sf
from .checkpoint import config_hash, load_code_dataset, save_code_dataset
from .errors import ConfigurationError, ParameterError, VideoIOError

log = logging.getLogger("motiondiff")

# stage name -> (directory, marker file, command that produces it)
STAGES = {
    "data": ("data", "dataset.json", "make-data"),
    "animator": ("animator", "manifest.json", "train-animator"),
    "codes": ("codes", "manifest.json", "encode-codes"),
    "lmdm_clmdm": ("lmdm_clmdm", "manifest.json", "train-lmdm --variant clmdm"),
    "lmdm_uncond": ("lmdm_uncond", "manifest.json", "train-lmdm --variant uncond"),
    "lmdm_transition": ("lmdm_transition", "manifest.json", "train-lmdm --variant transition"),
    "simple_dm": ("simple_dm", "manifest.json", "train-simple-dm"),
    "cddpm": ("cddpm", "manifest.json", "train-cddpm"),
}
CDDPM_FRAMES_PER_VIDEO = 8


class MissingStage(Exception):
    def __init__(self, stage):
        self.stage = stage
        super().__init__(f"missing dependency: stage '{stage}' has not been run "
                         f"(run `motiondiff {STAGES[stage][2]}` first)")


class Run:
    """Resolved config plus the run directory layout."""

    def __init__(self, config: dict, force: bool = False):
        self.config = config
        self.force = force
        self.root = cfg.run_dir(config)
        self.seed = config["seed"]

    def stage_dir(self, stage: str) -> Path:
        if stage == "data" and self.config["paths"].get("data"):
            return Path(self.config["paths"]["data"])
        return self.root / STAGES[stage][0]

    def done(self, stage: str) -> bool:
        return (self.stage_dir(stage) / STAGES[stage][1]).is_file()

    def need(self, *stages):
        for s in stages:
            if not self.done(s):
                raise MissingStage(s)

    def skip(self, stage: str) -> bool:
        if self.done(stage) and not self.force:
            print(f"{stage}: already complete at {self.stage_dir(stage)} (use --force to redo)")
            return True
        return False

    def dataset(self):
        self.need("data")
        return data.load_dataset(self.stage_dir("data"))

    def split(self, n):
        return data.split_indices(n, self.config["data"]["val_fraction"], self.seed)

    def logger(self, stage: str):
        path = self.stage_dir(stage) / "log.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")

        def on_log(rec):
            with path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
        return on_log

    def output_dir(self, verb: str, params: dict) -> Path:
        return self.root / verb / config_hash(params)

    def models(self, *optional):
        self.need("animator", "lmdm_clmdm")
        opt = {name: self.stage_dir(stage) if self.done(stage) else None
               for name, stage in (("simple_dm", "simple_dm"), ("cddpm", "cddpm"),
                                   ("transition", "lmdm_transition"))}
        for name in optional:
            if opt[name] is None:
                raise MissingStage({"transition": "lmdm_transition"}.get(name, name))
        return pipeline.Models.load(self.stage_dir("animator"), self.stage_dir("lmdm_clmdm"), **opt)


def _dataclass_config(cls, section: dict, seed: int):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    if "coarse_scales" in kw:
        kw["coarse_scales"] = tuple(kw["coarse_scales"])
    return cls(**kw, seed=seed)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=pipeline._jsonable))


# ---------------------------------------------------------------- commands

def cmd_init_config(run: Run | None, args) -> int:
    config = cfg.preset(args.preset)
    cfg.save_config(config, args.output)
    print(f"wrote {args.preset} config to {args.output}")
    return 0


def cmd_make_data(run: Run, args) -> int:
    if run.config["paths"].get("data"):
        print(f"data: using existing dataset at {run.stage_dir('data')}")
        return 0
    if run.skip("data"):
        return 0
    d = run.config["data"]
    params = data.SpriteMotionParams(d["trajectory_kind"], d["amplitude"], d["n_harmonics"], run.seed)
    ds = data.make_sprite_dataset(d["n_videos"], d["length"], d["height"], d["width"], params,
                                  d["channels"], d["fps"])
    data.save_dataset(ds, run.stage_dir("data"))
    print(f"data: wrote {len(ds)} videos to {run.stage_dir('data')}")
    return 0


def cmd_train_animator(run: Run, args) -> int:
    ds = run.dataset()
    if run.skip("animator"):
        return 0
    train_idx, _ = run.split(len(ds))
    config = _dataclass_config(anim.AnimatorConfig, run.config["animator"], run.seed)
    torch.manual_seed(run.seed)
    model, history = anim.train_animator(ds.subset(train_idx), config, run.logger("animator"))
    anim.save_animator(model, run.stage_dir("animator"), anim.config_dict(config))
    print(f"animator: final loss {history[-1]['loss']:.5f}, saved to {run.stage_dir('animator')}")
    return 0


def cmd_encode_codes(run: Run, args) -> int:
    run.need("animator")
    ds = run.dataset()
    if run.skip("codes"):
        return 0
    model = anim.load_animator(run.stage_dir("animator"))
    seqs = np.stack([anim.encode_video(model, ds[i]) for i in range(len(ds))])
    train_idx, val_idx = run.split(len(ds))
    save_code_dataset(run.stage_dir("codes"), seqs, {"train": train_idx, "val": val_idx})
    print(f"codes: encoded {len(ds)} videos -> {seqs.shape}")
    return 0


def _train_codes(run: Run):
    run.need("codes")
    seqs, manifest = load_code_dataset(run.stage_dir("codes"))
    return seqs[manifest["extra"]["train"]]


def cmd_train_lmdm(run: Run, args) -> int:
    stage = f"lmdm_{args.variant}"
    seqs = _train_codes(run)
    if run.skip(stage):
        return 0
    config = _dataclass_config(lmdm.LMDMConfig, run.config["lmdm"], run.seed)
    train = {"clmdm": lmdm.train_clmdm, "uncond": lmdm.train_lmdm_unconditional,
             "transition": lmdm.train_transition_dm}[args.variant]
    torch.manual_seed(run.seed)
    model = train(seqs, config, run.logger(stage))
    lmdm.save_lmdm(model, run.stage_dir(stage), lmdm.config_dict(config))
    print(f"{stage}: final loss {model.history[-1]['loss']:.5f}")
    return 0


def cmd_train_simple_dm(run: Run, args) -> int:
    seqs = _train_codes(run)
    if run.skip("simple_dm"):
        return 0
    config = _dataclass_config(sf.SimpleDMConfig, run.config["simple_dm"], run.seed)
    model = sf.train_simple_dm(seqs.reshape(-1, seqs.shape[-1]), config, run.logger("simple_dm"))
    sf.save_simple_dm(model, run.stage_dir("simple_dm"), vars(config))
    print(f"simple_dm: final loss {model.history[-1]['loss']:.5f}")
    return 0


def cmd_train_cddpm(run: Run, args) -> int:
    run.need("codes")
    ds = run.dataset()
    if run.skip("cddpm"):
        return 0
    seqs, manifest = load_code_dataset(run.stage_dir("codes"))
    L = seqs.shape[1]
    rows = np.linspace(0, L - 1, min(CDDPM_FRAMES_PER_VIDEO, L)).round().astype(int)
    frames, codes = [], []
    for i in manifest["extra"]["train"]:
        v = ds[i].frames[rows]
        frames.append(np.round(v * 255).astype(np.uint8))
        codes.append(seqs[i, rows])
    config = _dataclass_config(sf.CDDPMConfig, run.config["cddpm"], run.seed)
    model = sf.train_cddpm(np.concatenate(frames), np.concatenate(codes), config, run.logger("cddpm"))
    sf.save_cddpm(model, run.stage_dir("cddpm"), vars(config))
    print(f"cddpm: final loss {model.history[-1]['loss']:.5f}")
    return 0


def _default_image(run: Run, out: Path, which: int = 0) -> Path:
    """First frame of a validation video, written next to the outputs."""
    ds = run.dataset()
    _, val_idx = run.split(len(ds))
    idx = val_idx[which % len(val_idx)] if val_idx else which % len(ds)
    path = out / f"input_{which}.png"
    out.mkdir(parents=True, exist_ok=True)
    data.save_frame(ds[idx].frames[0], path)
    return path


def _checkpoints(run: Run) -> dict:
    return {s: str(run.stage_dir(s)) for s in STAGES if s != "data" and run.done(s)}


def cmd_sample(run: Run, args) -> int:
    s = run.config["sampling"]
    n_frames = args.n_frames or s["n_frames"]
    n_videos = args.n_videos or s["n_videos"]
    models = run.models(*(("simple_dm", "cddpm") if args.mode == "uncond" else ()))
    params = {"mode": args.mode, "n_frames": n_frames, "n_videos": n_videos, "seed": run.seed,
              "ddim_stride": s["ddim_stride"], "image": args.image}
    out = run.output_dir("samples", params)
    image = Path(args.image) if args.image else (_default_image(run, out) if args.mode == "cond" else None)
    record = {"command": "sample", **params, "config_hash": cfg.run_hash(run.config),
              "checkpoints": _checkpoints(run), "videos": []}
    for k in range(n_videos):
        seed = run.seed * 100003 + k
        if args.mode == "uncond":
            video, x1, res = pipeline.generate_unconditional(models, n_frames, seed, s["ddim_stride"], details=True)
        else:
            video, x1, res = pipeline.generate_conditional(models, image, n_frames, seed, s["ddim_stride"], details=True)
        vdir = out / f"video_{k:05d}"
        data.save_video(video, vdir)
        record["videos"].append({"dir": vdir.name, "seed": seed, **res.record()})
    pipeline.write_run_record(out, record)
    print(f"sample: wrote {n_videos} videos to {out}")
    return 0


def cmd_rollout(run: Run, args) -> int:
    s = run.config["sampling"]
    n_chunks = args.n_chunks or s["n_chunks"]
    chunk_len = args.chunk_len or s["chunk_len"]
    needed = ("transition", "simple_dm") if args.with_transitions else ()
    if not args.image:
        needed += ("simple_dm", "cddpm")
    models = run.models(*needed)
    params = {"n_chunks": n_chunks, "chunk_len": chunk_len, "seed": run.seed, "image": args.image,
              "with_transitions": args.with_transitions, "window": s["window"],
              "threshold": s["threshold"], "ddim_stride": s["ddim_stride"]}
    out = run.output_dir("rollout", params)
    if args.image:
        x1, alpha1 = sf.from_image(models.animator, args.image)
    else:
        x1, alpha1 = pipeline.starting_point(models, run.seed, s["ddim_stride"])
    res = pipeline.rollout_codes(models, alpha1, n_chunks, chunk_len, run.seed,
                                 with_transitions=args.with_transitions, window=s["window"],
                                 threshold=s["threshold"], ddim_stride=s["ddim_stride"])
    video = anim.animate(models.animator, x1, res.codes)
    data.save_video(video, out / "video")
    data.save_frame(x1, out / "x1.png")
    pipeline.write_run_record(out, {"command": "rollout", **params, "config_hash": cfg.run_hash(run.config),
                                    "checkpoints": _checkpoints(run), "alpha1": alpha1, **res.record()})
    print(f"rollout: {len(video)} frames, {len(res.transitions)} transitions, written to {out}")
    return 0


def cmd_edit(run: Run, args) -> int:
    run.need("animator")
    params = {"source": args.source, "image": args.image, "seed": run.seed}
    out = run.output_dir("edit", params)
    if args.source:
        source = data.load_video(args.source)
    else:
        ds = run.dataset()
        _, val_idx = run.split(len(ds))
        source = ds[val_idx[0] if val_idx else 0]
    image = Path(args.image) if args.image else _default_image(run, out, which=1)
    model = anim.load_animator(run.stage_dir("animator"))
    models = pipeline.Models(model, None)
    codes = anim.encode_video(model, source)
    new_x1 = data.load_frame(image, model.C)
    parts = pipeline.reanchored_codes(models, codes, new_x1)
    video = pipeline.edit_appearance(models, codes, new_x1)
    data.save_video(video, out / "video")
    residuals_equal = bool(np.array_equal(parts.residuals, lmdm.split_sequence(codes).residuals))
    pipeline.write_run_record(out, {"command": "edit", **params, "checkpoints": _checkpoints(run),
                                    "new_anchor": parts.anchor, "residuals_identical": residuals_equal})
    print(f"edit: {len(video)} frames written to {out} (residuals identical: {residuals_equal})")
    return 0


def _animator_psnr(model, videos, n_pairs, seed):
    rng = np.random.default_rng(seed)
    vals, base = [], []
    for _ in range(n_pairs):
        v = videos[rng.integers(len(videos))]
        i, j = rng.integers(len(v.frames), size=2)
        rec = anim.animate(model, v.frames[i], anim.encode(model, v.frames[j])[None]).frames[0]
        vals.append(min(metrics.psnr(rec, v.frames[j]), 100.0))
        base.append(min(metrics.psnr(v.frames[i], v.frames[j]), 100.0))
    return float(np.mean(vals)), float(np.mean(base))


def _video_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("meta.json"))


def cmd_eval(run: Run, args) -> int:
    run.need("animator")
    ds = run.dataset()
    e = run.config["eval"]
    _, val_idx = run.split(len(ds))
    val = [ds[i] for i in (val_idx or range(len(ds)))]
    model = anim.load_animator(run.stage_dir("animator"))
    params = {"videos": args.videos, "seed": run.seed, **e}
    out = run.output_dir("eval", params)
    rec, base = _animator_psnr(model, val, e["n_pairs"], run.seed)
    entries = [
        {"name": "animator_psnr", "value": rec, "clips": e["n_pairs"], "seed": run.seed,
         "extractor_id": "pixels"},
        {"name": "copy_source_psnr", "value": base, "clips": e["n_pairs"], "seed": run.seed,
         "extractor_id": "pixels"},
    ]
    gen_root = Path(args.videos) if args.videos else run.root / "samples"
    gen = [data.load_video(p.parent) for p in _video_dirs(gen_root)] if gen_root.is_dir() else []
    gen = [v for v in gen if len(v) >= 2]
    clip = e["clip_len"]
    real_feats = metrics.clip_features(val, clip)
    entries.append({"name": "acd_real", "value": float(np.mean([metrics.acd(v.frames[:clip]) for v in val])),
                    "clips": len(val), "seed": run.seed})
    if gen:
        gen_feats = metrics.clip_features(gen, clip)
        kd, clipped = metrics.kernel_distance(gen_feats, real_feats, details=True)
        entries += [
            {"name": "acd_generated", "value": float(np.mean([metrics.acd(v.frames[:clip]) for v in gen])),
             "clips": len(gen), "seed": run.seed},
            {"name": "toy_frechet", "value": metrics.frechet_distance(gen_feats, real_feats),
             "clips": len(gen), "seed": run.seed},
            {"name": "toy_kernel", "value": kd, "clips": len(gen), "seed": run.seed,
             **({"note": "negative estimate clipped to 0"} if clipped else {})},
        ]
    else:
        print(f"eval: no generated videos under {gen_root}; reporting animator metrics only")
    path = metrics.write_metrics(out, entries)
    for entry in entries:
        print(f"{entry['name']}: {entry['value']:.4f}")
    print(f"eval: wrote {path}")
    return 0


COMMANDS = {
    "make-data": cmd_make_data,
    "train-animator": cmd_train_animator,
    "encode-codes": cmd_encode_codes,
    "train-lmdm": cmd_train_lmdm,
    "train-simple-dm": cmd_train_simple_dm,
    "train-cddpm": cmd_train_cddpm,
    "sample": cmd_sample,
    "rollout": cmd_rollout,
    "edit": cmd_edit,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: the chosen preset)")
    common.add_argument("--preset", choices=cfg.PRESETS, default="default",
                        help="built-in config used when --config is not given")
    common.add_argument("--runs", help="override paths.runs")
    common.add_argument("--force", action="store_true", help="redo training stages that already finished")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")

    p = argparse.ArgumentParser(prog="motiondiff", description="Motion-code diffusion video synthesis.")
    sub = p.add_subparsers(dest="command", required=True)
    init = sub.add_parser("init-config", help="write a preset config to a file")
    init.add_argument("--preset", choices=cfg.PRESETS, default="default")
    init.add_argument("-o", "--output", required=True)

    sub.add_parser("make-data", parents=[common], help="render the sprite dataset")
    sub.add_parser("train-animator", parents=[common], help="train the image animator")
    sub.add_parser("encode-codes", parents=[common], help="encode every video into motion codes")
    t = sub.add_parser("train-lmdm", parents=[common], help="train a motion-code diffusion model")
    t.add_argument("--variant", choices=lmdm.VARIANTS, required=True)
    sub.add_parser("train-simple-dm", parents=[common], help="train the starting-code prior")
    sub.add_parser("train-cddpm", parents=[common], help="train the code-conditioned frame DDPM")
    s = sub.add_parser("sample", parents=[common], help="generate videos")
    s.add_argument("--mode", choices=("uncond", "cond"), required=True)
    s.add_argument("--image", help="starting frame for --mode cond (default: a validation frame)")
    s.add_argument("--n-frames", type=int)
    s.add_argument("--n-videos", type=int)
    r = sub.add_parser("rollout", parents=[common], help="long autoregressive generation")
    r.add_argument("--with-transitions", action="store_true", help="escape detected loops with the transition DM")
    r.add_argument("--image", help="starting frame (default: sampled)")
    r.add_argument("--n-chunks", type=int)
    r.add_argument("--chunk-len", type=int)
    ed = sub.add_parser("edit", parents=[common], help="replay a video's motion on a new starting frame")
    ed.add_argument("--source", help="frame-directory video supplying the motion (default: a validation video)")
    ed.add_argument("--image", help="new starting frame (default: a different validation frame)")
    ev = sub.add_parser("eval", parents=[common], help="compute metrics and write metrics.json")
    ev.add_argument("--videos", help="directory of generated frame-directory videos (default: run samples)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "init-config":
        return cmd_init_config(None, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        config = cfg.load_config(args.config, args.preset)
        if args.runs:
            config["paths"]["runs"] = args.runs
        run = Run(config, args.force)
        for positive in ("n_frames", "n_videos", "n_chunks"):
            if getattr(args, positive, None) is not None and getattr(args, positive) < 1:
                raise ConfigurationError(f"invalid arguments:\n  {positive}: must be >= 1")
        if getattr(args, "chunk_len", None) is not None and args.chunk_len < 2:
            raise ConfigurationError("invalid arguments:\n  chunk_len: must be >= 2")
        run.root.mkdir(parents=True, exist_ok=True)
        cfg.save_config(config, run.root / "config.json")
        return COMMANDS[args.command](run, args)
    except MissingStage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, ParameterError, VideoIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
