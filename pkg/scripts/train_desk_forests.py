"""Train the desk-scale forest bank (2000 layer-1 images, 1000 per viewpoint for layer 2).

usage: python3 scripts/train_desk_forests.py OUT_DIR [--pixels N] [--seed S]
"""

import argparse
import json
import time
from pathlib import Path

from gmmtrack.config import RunConfig, apply_overrides
from gmmtrack.workflows import build_models, train_forest_bank


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--pixels", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    overrides = [f"seed={args.seed}"]
    if args.pixels:
        overrides.append(f"forest.pixels_per_image={args.pixels}")
    cfg = apply_overrides(RunConfig(), overrides)
    scene, kin = build_models(cfg)
    t0 = time.perf_counter()
    bank, report = train_forest_bank(cfg, scene, kin, log=lambda m: print(f"[{time.perf_counter() - t0:7.1f}s] {m}",
                                                                          flush=True))
    out = Path(args.out)
    bank.save(out)
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
