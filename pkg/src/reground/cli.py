"""Command-line entry point: ``reground <subcommand>``.

Subcommands: gen-data, train, sample, sweep, drop-boxes, report, pipeline.
Every command writes ``resolved_config.json`` next to its outputs. Outputs
default to ``$REGROUND_OUTPUT_ROOT`` (or ``./runs``) when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, read_tensors, save_checkpoint
from .config import DataConfig, RunConfig, SweepConfig, load_config, replace_path, to_dict, write_resolved
from .data import SceneRecord, TensorDataset, make_scenes, read_dataset, save_png, scene_seeds, write_dataset
from .diffusion import train_base, train_gsa
from .errors import ConfigError, ReGroundError
from .evaluation import (
    EvalScene,
    detect_shapes,
    drop_boxes,
    headline_deltas,
    read_tradeoff_csv,
    spatial_score,
    sweep,
    textual_score,
    write_details_csv,
    write_tradeoff_csv,
)
from .grounding import LayoutSpec
from .plotting import image_grid, plot_compare, plot_loss, plot_tradeoff
from .scenes import generate_scene
from .seeding import derive_seed
from .wiring import ScheduleConfig, WiringMode, is_grounding_param

log = logging.getLogger("reground")
OUTPUT_ENV = "REGROUND_OUTPUT_ROOT"
CKPT_NAME = "checkpoint.safetensors"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _out_dir(arg, default_name: str) -> Path:
    out = Path(arg) if arg else output_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ckpt_path(p) -> Path:
    p = Path(p)
    return p / CKPT_NAME if p.is_dir() else p


def _override(cfg, dotted: str, value):
    return cfg if value is None else replace_path(cfg, dotted, value)


# ---------------------------------------------------------------- gen-data


def certify(records: list[SceneRecord], quantized: bool = True) -> dict:
    """Score every clean render with the oracles; both scores must be 1.0."""
    from .data import to_uint8

    failures = []
    for i, r in enumerate(records):
        img = to_uint8(r.scene.image) / 255.0 if quantized else r.scene.image
        regions = detect_shapes(img)
        sp = spatial_score(img, r.layout, regions=regions)
        tx = textual_score(img, r.prompt, regions=regions)
        if sp != 1.0 or tx != 1.0:
            failures.append({"index": i, "seed": r.seed, "spatial": sp, "textual": tx})
    return {"checked": len(records), "failures": failures}


def gen_data(cfg: DataConfig, out: Path) -> dict:
    records = make_scenes(scene_seeds(cfg.root_seed, cfg.n, cfg.split), cfg.scene)
    resolved = to_dict(cfg)
    manifest = write_dataset(out, records, resolved)
    write_resolved(out / "resolved_config.json", {"command": "gen-data", "data": resolved})
    if cfg.certify:
        report = certify(records)
        (out / "certification.json").write_text(json.dumps(report, indent=1))
        if report["failures"]:
            raise ReGroundError(f"oracle certification failed on {len(report['failures'])} scenes")
        log.info("certified %d scenes: spatial = textual = 1.0", report["checked"])
    return manifest


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config).data
    cfg = _override(cfg, "n", args.n)
    cfg = _override(cfg, "root_seed", args.seed)
    if args.no_certify:
        cfg = replace_path(cfg, "certify", False)
    out = _out_dir(args.out, "data")
    manifest = gen_data(cfg, out)
    print(f"wrote {manifest['count']} scenes to {out} (config hash {manifest['config_hash'][:12]})")
    return 0


# ---------------------------------------------------------------- train


def _write_curve(path: Path, rows, header=("step", "loss")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for step, loss in rows:
            w.writerow((step, f"{loss:.8f}"))


def train(phase: str, cfg: RunConfig, data_dir: Path, out: Path, base: Path | None = None) -> Path:
    if phase not in ("base", "gsa"):
        raise ConfigError(f"phase must be 'base' or 'gsa', got {phase!r}")
    if not (Path(data_dir) / "manifest.json").exists():
        raise ConfigError(f"data: no dataset manifest in {data_dir}")
    data = TensorDataset.from_records(read_dataset(data_dir))
    resolved = {"command": "train", "phase": phase, "data_dir": str(data_dir), "model": to_dict(cfg.train.model)}
    t0 = time.time()
    if phase == "base":
        tcfg = cfg.train.base
        result = train_base(data, cfg.train.model, tcfg)
    else:
        if base is None:
            raise ConfigError("base: phase 'gsa' needs --base pointing at a base checkpoint")
        base_path = _ckpt_path(base)
        if not base_path.exists():
            raise ConfigError(f"base: checkpoint {base_path} does not exist")
        base_net = load_checkpoint(base_path)
        if base_net.grounded:
            raise ConfigError(f"base: {base_path} already contains grounding modules")
        tcfg = cfg.train.gsa
        result = train_gsa(base_net, data, tcfg)
        resolved["base_checkpoint"] = str(base_path)
    ckpt = save_checkpoint(result.net, out / CKPT_NAME, {"phase": phase})
    if phase == "gsa":
        # freezing contract, checked on the bytes written to disk
        before, after = read_tensors(base_path), read_tensors(ckpt)
        changed = [k for k, v in before.items() if v.tobytes() != after[k].tobytes()]
        if changed or any(not is_grounding_param(k) for k in set(after) - set(before)):
            raise ReGroundError(f"frozen base tensors changed: {changed}")
        resolved["base_tensors_identical"] = True
        resolved["base_checksum"] = result.base_checksum
    resolved["train"] = to_dict(tcfg)
    resolved["seconds"] = round(time.time() - t0, 1)
    _write_curve(out / "loss.csv", result.losses)
    _write_curve(out / "heldout.csv", result.heldout)
    plot_loss(result.losses, out / "loss.png", result.heldout)
    write_resolved(out / "resolved_config.json", resolved)
    return ckpt


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    section = f"train.{args.phase}" if args.phase in ("base", "gsa") else "train.base"
    cfg = _override(cfg, f"{section}.steps", args.steps)
    cfg = _override(cfg, f"{section}.seed", args.seed)
    out = _out_dir(args.out, f"train_{args.phase}")
    ckpt = train(args.phase, cfg, Path(args.data), out, args.base)
    print(f"wrote {ckpt}")
    return 0


# ---------------------------------------------------------------- sample


def _parse_gamma(value) -> float:
    try:
        g = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"gamma: not a number: {value!r}") from None
    if not 0.0 <= g <= 1.0:
        raise ConfigError(f"gamma: must lie in [0, 1], got {g}")
    return g


def _load_scene(args) -> tuple[str, SceneRecord]:
    """Scene from ``--data``/``--index``, else generated from ``--scene-seed`` with the config's scene settings."""
    if args.data is not None:
        records = read_dataset(args.data)
        if not 0 <= args.index < len(records):
            raise ConfigError(f"index: {args.index} outside dataset of {len(records)} scenes")
        return f"scene{args.index:06d}", records[args.index]
    seed = args.scene_seed if args.scene_seed is not None else 0
    scene_cfg = load_config(args.config).data.scene
    return f"seed{seed}", SceneRecord(seed, *generate_scene(seed, scene_cfg))


def cmd_sample(args) -> int:
    gamma = _parse_gamma(args.gamma)
    mode = WiringMode.parse(args.mode)
    if args.steps < 1:
        raise ConfigError("steps: must be >= 1")
    ckpt = _ckpt_path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint: {ckpt} does not exist")
    net = load_checkpoint(ckpt)
    name, rec = _load_scene(args)
    if rec.scene.image.shape[0] != net.config.image_size:
        raise ConfigError(f"image_size: scene is {rec.scene.image.shape[0]} px but the checkpoint expects "
                          f"{net.config.image_size} px (pass --config with matching data.scene settings)")
    layout = rec.layout
    if args.layout:
        layout = LayoutSpec.from_json(Path(args.layout).read_text())
    out = _out_dir(args.out, "samples")
    schedule = ScheduleConfig(gamma, args.steps)
    from .diffusion import sample

    modes = list(WiringMode) if args.compare else [mode]
    if not net.grounded:
        modes = [WiringMode.BASELINE]
    images, written = [], []
    for m in modes:
        img = sample(net, rec.prompt, layout, schedule, m, args.seed)
        path = out / f"{name}_{m.value}_{gamma:g}_{args.seed}.png"
        save_png(path, img)
        images.append(img)
        written.append(path)
    if args.compare:
        stem = f"{name}_compare_{gamma:g}_{args.seed}"
        save_png(out / f"{stem}.png", image_grid([rec.scene.image] + images))
        plot_compare([rec.scene.image] + images, ["reference"] + [m.value for m in modes], out / f"{stem}_fig.png",
                     " ".join(rec.prompt.words()[1:-1]))
        written.append(out / f"{stem}.png")
    write_resolved(out / "resolved_config.json", {
        "command": "sample", "checkpoint": str(ckpt), "gamma": gamma, "steps": args.steps, "seed": args.seed,
        "modes": [m.value for m in modes], "scene": name, "prompt": rec.prompt.words(),
        "layout": layout.to_records(),
    })
    for p in written:
        print(p)
    return 0


# ---------------------------------------------------------------- sweep


def eval_scenes(cfg: SweepConfig) -> list[EvalScene]:
    records = make_scenes(scene_seeds(cfg.eval_seed, cfg.n_scenes, "eval"), cfg.scene)
    scenes = []
    for i, r in enumerate(records):
        layout = r.layout
        if cfg.dropped:
            layout = drop_boxes(layout, derive_seed(cfg.eval_seed, "drop", i), cfg.drop_fraction)
        scenes.append(EvalScene(r.prompt, layout, derive_seed(cfg.eval_seed, "noise", i), f"eval{i:04d}"))
    return scenes


def run_sweep(cfg: SweepConfig, ckpt: Path, out: Path, details: bool = False) -> dict:
    net = load_checkpoint(ckpt)
    seed_set = f"eval{cfg.eval_seed}-n{cfg.n_scenes}" + ("-drop" if cfg.dropped else "")
    rows = [] if details else None
    t0 = time.time()
    points = sweep(net, eval_scenes(cfg), cfg.gammas, cfg.modes, cfg.sampler_steps, seed_set,
                   cfg.iou_threshold, cfg.batch_size, cfg.jobs, rows)
    write_tradeoff_csv(points, out / "tradeoff.csv")
    if details:
        write_details_csv(rows, out / "per_scene.csv")
    title = "box-dropped layouts" if cfg.dropped else "full layouts"
    plot_tradeoff(points, out / "tradeoff.png", title)
    summary = {"headline": headline_deltas(points, 1.0), "seconds": round(time.time() - t0, 1)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_resolved(out / "resolved_config.json", {"command": "sweep", "checkpoint": str(ckpt), "sweep": to_dict(cfg)})
    return summary


def cmd_sweep(args) -> int:
    cfg = load_config(args.config).sweep
    if args.gammas is not None:
        cfg = replace_path(cfg, "gammas", tuple(_parse_gamma(g) for g in args.gammas))
    else:
        for g in cfg.gammas:
            _parse_gamma(g)
    if args.modes is not None:
        cfg = replace_path(cfg, "modes", tuple(WiringMode.parse(m).value for m in args.modes))
    cfg = _override(cfg, "n_scenes", args.n_scenes)
    cfg = _override(cfg, "eval_seed", args.eval_seed)
    cfg = _override(cfg, "sampler_steps", args.steps)
    cfg = _override(cfg, "jobs", args.jobs)
    if args.dropped:
        cfg = replace_path(cfg, "dropped", True)
    ckpt = _ckpt_path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint: {ckpt} does not exist")
    out = _out_dir(args.out, "sweep")
    summary = run_sweep(cfg, ckpt, out, args.details)
    print((out / "tradeoff.csv").read_text(), end="")
    h = summary["headline"]
    if h:
        print(f"textual gain of parallel over sequential at gamma=1.0: {h['textual_gain']:+.6f}")
        print(f"spatial drop of parallel vs sequential at gamma=1.0:   {h['spatial_drop']:+.6f}"
              f" ({100 * h['spatial_drop_relative']:+.2f}% relative)")
    return 0


# ---------------------------------------------------------------- drop-boxes, report, pipeline


def cmd_drop_boxes(args) -> int:
    if args.layout:
        layout = LayoutSpec.from_json(Path(args.layout).read_text())
    else:
        _, rec = _load_scene(args)
        layout = rec.layout
    if not 0.0 <= args.fraction <= 1.0:
        raise ConfigError("fraction: must lie in [0, 1]")
    dropped = drop_boxes(layout, args.seed, args.fraction)
    text = dropped.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    points = read_tradeoff_csv(args.csv)
    out = Path(args.out) if args.out else Path(args.csv).with_suffix(".png")
    plot_tradeoff(points, out, args.title)
    print(out)
    return 0


def pipeline(cfg: RunConfig, out: Path) -> dict:
    """gen-data, both training phases, then full and box-dropped sweeps."""
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.time()
    gen_data(cfg.data, out / "data")
    timings["gen_data"] = time.time() - t0
    t = time.time()
    train("base", cfg, out / "data", out / "base")
    timings["train_base"] = time.time() - t
    t = time.time()
    train("gsa", cfg, out / "data", out / "gsa", out / "base")
    timings["train_gsa"] = time.time() - t
    t = time.time()
    (out / "sweep").mkdir(exist_ok=True)
    run_sweep(cfg.sweep, out / "gsa" / CKPT_NAME, out / "sweep")
    timings["sweep"] = time.time() - t
    t = time.time()
    (out / "sweep_drop").mkdir(exist_ok=True)
    run_sweep(dataclasses.replace(cfg.sweep, dropped=True), out / "gsa" / CKPT_NAME, out / "sweep_drop")
    timings["sweep_drop"] = time.time() - t
    timings = {k: round(v, 1) for k, v in timings.items()}
    write_resolved(out / "resolved_config.json", {"command": "pipeline", "config": to_dict(cfg), "seconds": timings})
    return timings


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.out, "pipeline")
    timings = pipeline(cfg, out)
    print(json.dumps(timings))
    print((out / "sweep" / "tradeoff.csv").read_text(), end="")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reground", description="Gated self-attention rewiring on a toy diffusion benchmark")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--config", type=Path)
    g.add_argument("--out")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--no-certify", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the base model or the GSA adapter")
    t.add_argument("--phase", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--base", help="base run directory or checkpoint (phase gsa)")
    t.add_argument("--config", type=Path)
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample images for one scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mode", default="sequential")
    s.add_argument("--gamma", default="1.0")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--out")
    s.add_argument("--data", help="dataset directory to take the scene from")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--scene-seed", type=int)
    s.add_argument("--layout", help="layout JSON overriding the scene's boxes")
    s.add_argument("--compare", action="store_true", help="also sample all four modes and write a grid")
    s.add_argument("--config", type=Path, help="run config; its data.scene settings apply to --scene-seed")
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("sweep", help="gamma x mode trade-off sweep")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--config", type=Path)
    w.add_argument("--out")
    w.add_argument("--gammas", nargs="+")
    w.add_argument("--modes", nargs="+")
    w.add_argument("--n-scenes", type=int)
    w.add_argument("--eval-seed", type=int)
    w.add_argument("--steps", type=int)
    w.add_argument("--jobs", type=int)
    w.add_argument("--dropped", action="store_true", help="drop boxes of half the categories per scene")
    w.add_argument("--details", action="store_true", help="also write per-scene scores")
    w.set_defaults(func=cmd_sweep)

    d = sub.add_parser("drop-boxes", help="apply the category box-drop transform to a layout")
    d.add_argument("--layout")
    d.add_argument("--data")
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--scene-seed", type=int)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--fraction", type=float, default=0.5)
    d.add_argument("--out")
    d.add_argument("--config", type=Path, help="run config; its data.scene settings apply to --scene-seed")
    d.set_defaults(func=cmd_drop_boxes)

    r = sub.add_parser("report", help="render the trade-off figure from a sweep CSV")
    r.add_argument("--csv", required=True, type=Path)
    r.add_argument("--out")
    r.add_argument("--title")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("pipeline", help="gen-data + train base + train gsa + sweeps")
    a.add_argument("--config", type=Path)
    a.add_argument("--out")
    a.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ReGroundError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
