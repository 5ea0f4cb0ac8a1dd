"""Command line: ``gmmtrack {synth,train-forest,track,eval,gradcheck}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, InvalidInputError, NonFiniteError

log = logging.getLogger("gmmtrack")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args.set or [])


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg: RunConfig) -> int:
    from .evaluation import write_annotations
    from .io import SequenceManifest, write_color_png, write_depth_png, write_trajectory
    from .workflows import build_models, make_sequence, sequence_annotations

    scene, kin = build_models(cfg)
    seq = make_sequence(cfg, scene, kin)
    out = _out(cfg)
    (out / "frames").mkdir(exist_ok=True)
    files = []
    for k, fr in enumerate(seq.frames):
        c, d = f"frames/color_{k:05d}.png", f"frames/depth_{k:05d}.png"
        write_color_png(out / c, fr.color)
        write_depth_png(out / d, fr.depth)
        files.append((c, d))
    write_annotations(out / "annotations.csv", sequence_annotations(seq))
    write_trajectory(out / "ground_truth.csv", seq.poses, seq.landmarks)
    SequenceManifest(out, seq.intrinsics, files, [float(k) for k in range(len(files))],
                     "annotations.csv", seq.poses[0]).save(out / "manifest.json")
    log.info("wrote %d frames to %s", len(files), out)
    return 0


def cmd_train_forest(cfg: RunConfig) -> int:
    from .workflows import build_models, train_forest_bank

    scene, kin = build_models(cfg)
    out = Path(cfg.paths.forests) if cfg.paths.forests else _out(cfg) / "forests"
    bank, report = train_forest_bank(cfg, scene, kin, log=log.info)
    bank.save(out)
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    log.info("forests written to %s", out)
    return 0


def cmd_track(cfg: RunConfig) -> int:
    from .classify import ForestBank
    from .io import load_manifest, write_trajectory
    from .optimizer import Tracker, track_sequence
    from .workflows import build_models, tracker_config

    if not cfg.paths.manifest:
        raise ConfigError("paths.manifest is required for tracking")
    if not cfg.paths.forests:
        raise ConfigError("paths.forests is required for tracking")
    manifest = load_manifest(cfg.paths.manifest)
    bank = ForestBank.load(cfg.paths.forests)
    scene, kin = build_models(cfg)
    init = cfg.optimizer.init_pose if cfg.optimizer.init_pose is not None else manifest.init_pose
    if init is None:
        raise ConfigError("no initial pose: set optimizer.init_pose or provide init_pose in the manifest")
    tracker = Tracker(scene, kin, bank, tracker_config(cfg))
    poses, landmarks, diags = track_sequence(tracker, iter(manifest), np.asarray(init, float),
                                             manifest.intrinsics)
    out = _out(cfg)
    write_trajectory(out / "trajectory.csv", poses, landmarks)
    stages = ["segment", "viewpoint", "classify", "cluster", "visibility", "optimize", "select", "commit",
              "total"]
    terms = ["e_a", "e_s", "e_p", "e_t", "e_c", "e_o"]
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "proposal", "e_val_align", "e_val_label", "leaves", "contacts", "viewpoint", "warning"]
                   + terms + [f"ms_{s}" for s in stages])
        for d in diags:
            w.writerow([d.frame_index, d.proposal, f"{d.e_val[0]:.6g}", f"{d.e_val[1]:.6g}", d.n_leaves,
                        d.n_contacts, d.viewpoint, d.warning or ""]
                       + [f"{d.energies.get(t, float('nan')):.6g}" for t in terms]
                       + [f"{d.timings_ms.get(s, float('nan')):.3f}" for s in stages])
    log.info("tracked %d frames", len(poses))
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .evaluation import average_error, consistency_curve, load_annotations, write_curve_csv, write_error_csv
    from .io import read_trajectory

    if not cfg.paths.predictions or not cfg.paths.annotations:
        raise ConfigError("paths.predictions and paths.annotations are required for eval")
    frames, _, landmarks = read_trajectory(cfg.paths.predictions)
    if landmarks is None:
        raise InvalidInputError("prediction file carries no landmark columns")
    truth = load_annotations(cfg.paths.annotations)
    report = average_error(landmarks, truth, frames)
    out = _out(cfg)
    write_error_csv(out / "errors.csv", report)
    th, frac = consistency_curve(report.per_frame)
    write_curve_csv(out / "consistency.csv", th, frac)
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    print(json.dumps(report.as_dict(), sort_keys=True))
    return 0


def cmd_gradcheck(cfg: RunConfig, states: int = 100) -> int:
    from .gradcheck import run_gradcheck
    from .workflows import build_models

    scene, kin = build_models(cfg)
    results = run_gradcheck(scene, kin, states=states, seed=cfg.seed)
    ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.term:8s} worst relative error {r.worst_relative:.3e} "
              f"over {r.states} states (tolerance {r.tolerance:g})")
        ok &= r.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmmtrack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("synth", "render a synthetic sequence with ground truth"),
                           ("train-forest", "train the two-layer forests on synthetic data"),
                           ("track", "track a recorded sequence"),
                           ("eval", "score predicted landmarks against annotations"),
                           ("gradcheck", "compare analytic gradients with finite differences")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="JSON or YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set weights.w_o=0")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
        if name == "gradcheck":
            sp.add_argument("--states", type=int, default=100)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = _config(args)
        if args.threads is not None:
            cfg = apply_overrides(cfg, [f"optimizer.threads={args.threads}"])
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train-forest":
            return cmd_train_forest(cfg)
        if args.command == "track":
            return cmd_track(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_gradcheck(cfg, args.states)
    except (ConfigError, InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
