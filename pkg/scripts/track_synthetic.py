"""Track a synthetic trajectory end to end and print the landmark error and stage timings.

usage: python3 scripts/track_synthetic.py FORESTS [--trajectory grasp] [--length 100] [--data-only]
"""

import argparse
import json

import numpy as np

from gmmtrack.classify import ForestBank
from gmmtrack.config import RunConfig, apply_overrides
from gmmtrack.energy import TermSwitches
from gmmtrack.evaluation import average_error
from gmmtrack.optimizer import Tracker, track_sequence
from gmmtrack.workflows import build_models, make_sequence, sequence_annotations, sequence_frames, tracker_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("forests")
    ap.add_argument("--trajectory", default="grasp")
    ap.add_argument("--length", type=int, default=100)
    ap.add_argument("--data-only", action="store_true", help="alignment term only")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    cfg = apply_overrides(RunConfig(), [f"synth.trajectory=\"{args.trajectory}\"", f"synth.length={args.length}"]
                          + args.set)
    scene, kin = build_models(cfg)
    seq = make_sequence(cfg, scene, kin)
    tc = tracker_config(cfg)
    if args.data_only:
        from dataclasses import replace

        tc = replace(tc, switches=TermSwitches.data_only())
    tracker = Tracker(scene, kin, ForestBank.load(args.forests), tc)
    _, landmarks, diags = track_sequence(tracker, sequence_frames(seq), seq.poses[0], seq.intrinsics)
    report = average_error(landmarks, sequence_annotations(seq))
    stages = sorted(diags[0].timings_ms)
    timing = {s: float(np.mean([d.timings_ms[s] for d in diags[1:]])) for s in stages}
    print(json.dumps({"report": report.as_dict(), "mean_ms": timing,
                      "label_proposal_rate": float(np.mean([d.proposal == 1 for d in diags]))}, indent=1))


if __name__ == "__main__":
    main()
