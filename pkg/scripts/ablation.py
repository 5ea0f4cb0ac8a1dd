"""Track one synthetic trajectory with energy terms switched off one at a time.

usage: python3 scripts/ablation.py FORESTS [--trajectory occlusion] [--length 100]
"""

import argparse
from dataclasses import replace

import numpy as np

from gmmtrack.classify import ForestBank
from gmmtrack.config import RunConfig, apply_overrides
from gmmtrack.energy import TermSwitches
from gmmtrack.evaluation import average_error
from gmmtrack.optimizer import Tracker, track_sequence
from gmmtrack.workflows import build_models, make_sequence, sequence_annotations, sequence_frames, tracker_config

SETTINGS = {
    "all terms": TermSwitches(),
    "no E_s": TermSwitches(e_s=False),
    "no E_c": TermSwitches(e_c=False),
    "no E_o": TermSwitches(e_o=False),
    "no E_c, E_o": TermSwitches(e_c=False, e_o=False),
    "data term only": TermSwitches.data_only(),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("forests")
    ap.add_argument("--trajectory", default="occlusion")
    ap.add_argument("--length", type=int, default=100)
    args = ap.parse_args()
    cfg = apply_overrides(RunConfig(), [f'synth.trajectory="{args.trajectory}"', f"synth.length={args.length}"])
    scene, kin = build_models(cfg)
    seq = make_sequence(cfg, scene, kin)
    truth = sequence_annotations(seq)
    bank = ForestBank.load(args.forests)
    print(f"{'setting':16s} {'E':>10s} {'tips':>10s} {'object':>10s} {'label wins':>10s} {'contacts':>8s}")
    for name, sw in SETTINGS.items():
        tracker = Tracker(scene, kin, bank, replace(tracker_config(cfg), switches=sw))
        _, lm, diags = track_sequence(tracker, sequence_frames(seq), seq.poses[0], seq.intrinsics)
        r = average_error(lm, truth)
        wins = np.mean([d.proposal == 1 for d in diags])
        contacts = max(d.n_contacts for d in diags)
        print(f"{name:16s} {r.combined:10.4f} {r.fingertips:10.4f} {r.object:10.4f} {wins:10.2f} {contacts:8d}")


if __name__ == "__main__":
    main()
