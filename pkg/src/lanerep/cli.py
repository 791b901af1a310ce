"""``lanerep`` command line: one subcommand per pipeline stage.

All commands share ``--config`` (YAML run config) and ``--root`` (run
directory; the config's relative paths resolve against it). Failures exit
nonzero with a single ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import config as C
from . import dataset as D
from . import generator as G
from . import pipeline as P
from . import training as T
from .checkpoint import CheckpointError
from .errors import ConfigurationError

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 1


def _log(row) -> None:
    print(json.dumps({k: (round(v, 6) if isinstance(v, float) else v) for k, v in row.items()}), flush=True)


def _context(args):
    cfg = C.load(args.config, dict(args.set or []))
    return cfg, P.layout(args.root, cfg)


def _dataset(paths, args) -> D.LaneDataset:
    src = Path(args.dataset) if getattr(args, "dataset", None) else paths["lanes"]
    if not D.dataset_exists(src):
        raise FileNotFoundError(f"no preprocessed dataset at {src}")
    return D.load_dataset(src)


def _encoder(paths, args):
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) else paths["checkpoints"] / "joint.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    return T.load_state(ckpt)


def cmd_scenegen(args) -> int:
    cfg, paths = _context(args)
    out = Path(args.out) if args.out else paths["scene"]
    scene = P.run_scenegen(cfg, out)
    print(f"scene: {len(scene.cameras)} cameras, {len(scene.lanes)} lanes, {len(scene.tracklets)} tracklets -> {out}")
    return 0


def cmd_preprocess(args) -> int:
    _, paths = _context(args)
    src = Path(args.scene) if args.scene else paths["scene"]
    out = Path(args.out) if args.out else paths["lanes"]
    ds = P.run_preprocess(src, out)
    rep = ds.assignment
    print(f"dataset: {len(ds.records)} lanes, {rep.assigned} tracklets assigned, {rep.discarded} discarded -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg, paths = _context(args)
    if args.epochs is not None:
        cfg = C.load(args.config, dict(args.set or []) | {"train.epochs": args.epochs})
    ds = _dataset(paths, args)
    out = Path(args.checkpoint_dir) if args.checkpoint_dir else paths["checkpoints"]
    stage1 = None
    if args.regime == "two_stage_frozen":
        stage1 = P.run_train(cfg, ds, "contrastive_only", out, log=_log)
    state = P.run_train(cfg, ds, args.regime, out, stage1=stage1, log=_log)
    print(f"trained {args.regime} for {state.epoch} epochs -> {out / (args.regime + '.ckpt')}")
    return 0


def cmd_eval_loco(args) -> int:
    cfg, paths = _context(args)
    ds = _dataset(paths, args)
    encoders = {}
    names = args.regimes or [r for r in cfg.eval.regimes if r != "two_stage_frozen"]
    for regime in names:
        enc, _, header = T.load_state(paths["checkpoints"] / f"{regime}.ckpt")
        encoders[header["config"]["regime"]] = enc
    res = P.run_eval_loco(cfg, ds, encoders, paths["eval"] / "loco.json")
    mode = "geometry_dropped" if args.geometry_dropped else "with_geometry"
    for key, m in sorted(res["summary"].items()):
        if key.endswith(mode) or key.endswith("stats"):
            print(f"{key}: rank_mae={m['rank_mae']:.4f} edge_f1={m['edge_f1']:.4f} sim={m['mean_similarity']:.4f}")
    return 0


def cmd_eval_anomaly(args) -> int:
    cfg, paths = _context(args)
    ds = _dataset(paths, args)
    enc, det, _ = _encoder(paths, args)
    frames = args.window_frames or list(cfg.eval.window_sweep)
    res = P.run_eval_anomaly(cfg, ds, enc, det, frames=frames, out_path=paths["eval"] / "anomaly.json")
    for n, m in res["summary"].items():
        print(f"{n} frames: auroc={m['auroc']:.4f} precision={m['youden_precision']:.4f} recall={m['youden_recall']:.4f} f1={m['youden_f1']:.4f}")
    return 0


def cmd_train_generator(args) -> int:
    cfg, paths = _context(args)
    ds = _dataset(paths, args)
    enc, _, _ = _encoder(paths, args)
    for variant in args.variant or [cfg.eval.generation_conditioning]:
        P.run_train_generator(cfg, ds, enc, variant, paths["checkpoints"], log=_log)
        print(f"generator ({variant}) -> {paths['checkpoints'] / f'generator_{variant}.ckpt'}")
    return 0


def _specs_from_file(path, ds: D.LaneDataset, Z) -> list[G.GenerationSpec]:
    """Entries ``{group_id, spec_role[, reference_id]}``; the reference defaults as in evaluation."""
    entries = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or []
    if not isinstance(entries, list):
        raise ConfigurationError(f"{path}: expected a list of specs")
    by_id = {r.lane_id: i for i, r in enumerate(ds.records)}
    groups: dict[str, list] = {}
    for r in ds.records:
        groups.setdefault(r.group_id, []).append(r)
    specs = []
    for k, e in enumerate(entries):
        unknown = set(e) - {"group_id", "spec_role", "reference_id"}
        if unknown:
            raise ConfigurationError(f"spec {k}: unknown keys {sorted(unknown)}")
        lanes = groups.get(e.get("group_id"))
        if lanes is None:
            raise ConfigurationError(f"spec {k}: unknown group {e.get('group_id')!r}")
        role = e.get("spec_role")
        if role not in G.SPEC_ROLES:
            raise ConfigurationError(f"spec {k}: spec_role must be one of {G.SPEC_ROLES}")
        ref_id = e.get("reference_id")
        ref = ds.records[by_id[ref_id]] if ref_id in by_id else G.reference_for(role, lanes, ds.records, lanes[0].camera_id)
        if ref is None:
            raise ConfigurationError(f"spec {k}: no reference lane with role {role}")
        desc = D.fused_descriptor(ref.lane_stats, ref.role_vector)
        specs.append(G.GenerationSpec(np.asarray(Z[by_id[ref.lane_id]]), G.group_anchor(lanes), role, lanes[0].group_id, desc, ref.lane_id))
    return specs


def cmd_generate(args) -> int:
    cfg, paths = _context(args)
    ds = _dataset(paths, args)
    enc, _, _ = _encoder(paths, args)
    variant = args.variant or cfg.eval.generation_conditioning
    den, stored = P.load_denoiser(Path(args.generator) if args.generator else paths["checkpoints"] / f"generator_{variant}.ckpt")
    specs = None
    if args.spec_file:
        specs = _specs_from_file(args.spec_file, ds, P.conditioning_embeddings(enc, ds, cfg, stored))
    out = Path(args.out) if args.out else paths["candidates"] / stored
    cands, specs, _ = P.run_generate(cfg, ds, enc, den, stored, out, specs=specs)
    print(f"{len(cands)} candidates for {len(specs)} specs -> {out}")
    return 0


def cmd_report(args) -> int:
    cfg, paths = _context(args)
    out = P.build_report(args.root, cfg, Path(args.out) if args.out else None)
    print(f"report -> {out}")
    return 0


def cmd_run(args) -> int:
    cfg, paths = _context(args)
    res = P.run_all(cfg, args.root, log=_log if args.verbose else None)
    print(f"report -> {res['report']}")
    return 0


def _pair(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected KEY=VALUE")
    k, v = text.split("=", 1)
    return k, yaml.safe_load(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanerep", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults apply when omitted)")
    common.add_argument("--root", default=".", help="run directory (default: current directory)")
    common.add_argument("--set", action="append", type=_pair, metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=10")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scenegen", parents=[common], help="generate the synthetic scene")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_scenegen)

    s = sub.add_parser("preprocess", parents=[common], help="assign tracklets and build lane records")
    s.add_argument("--scene")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train one regime")
    s.add_argument("--regime", choices=[r for r in T.REGIMES if r != "traj_stats_baseline"], default="joint")
    s.add_argument("--epochs", type=int)
    s.add_argument("--dataset")
    s.add_argument("--checkpoint-dir")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval-loco", parents=[common], help="leave-one-camera-out matching")
    s.add_argument("--dataset")
    s.add_argument("--regimes", nargs="*")
    s.add_argument("--geometry-dropped", action="store_true", help="print the geometry-dropped query results")
    s.set_defaults(fn=cmd_eval_loco)

    s = sub.add_parser("eval-anomaly", parents=[common], help="window-level anomaly detection")
    s.add_argument("--dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--window-frames", type=int, action="append", help="window length in frames; repeat for a sweep")
    s.set_defaults(fn=cmd_eval_anomaly)

    s = sub.add_parser("train-generator", parents=[common], help="train the conditional denoiser")
    s.add_argument("--dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--variant", choices=C.CONDITIONING, action="append")
    s.set_defaults(fn=cmd_train_generator)

    s = sub.add_parser("generate", parents=[common], help="sample candidate lane geometries")
    s.add_argument("--dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--generator")
    s.add_argument("--variant", choices=C.CONDITIONING)
    s.add_argument("--spec-file", help="YAML list of {group_id, spec_role[, reference_id]}")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("report", parents=[common], help="assemble the report directory")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("run", parents=[common], help="every stage in order")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001  one-line report for scripts
        kind, code = _classify(e)
        print(f"error: {kind}: {' '.join(str(e).split())}", file=sys.stderr)
        return code


def _classify(e: Exception) -> tuple[str, int]:
    if isinstance(e, ConfigurationError):
        return "config", EXIT_CONFIG
    if isinstance(e, CheckpointError):
        return "checkpoint", EXIT_INPUT
    if isinstance(e, (FileNotFoundError, NotADirectoryError)):
        return "missing", EXIT_INPUT
    return type(e).__name__, EXIT_RUNTIME

if __name__ == "__main__":
    sys.exit(main())
