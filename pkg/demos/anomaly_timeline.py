"""Walkthrough: flag corrupted traffic windows on one lane.

    python3 demos/anomaly_timeline.py [--epochs 30]
    python3 demos/anomaly_timeline.py --root RUN_DIR

Trains the joint regime on the smoke-profile scene (or loads the dataset and
joint checkpoint of a finished ``lanerep run``), injects speed
reductions, trajectory dropouts and lateral deviations into random windows,
then prints the per-window anomaly probability of the most corrupted lane
before and after injection.
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from lanerep import anomaly as A
from lanerep import config as C
from lanerep import dataset as D
from lanerep import pipeline as P
from lanerep import scenegen as S
from lanerep import training as T

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--root", help="finished run directory to reuse")
    args = ap.parse_args()
    torch.set_num_threads(1)
    if args.root:
        paths = P.layout(args.root)
        ds = D.load_dataset(paths["lanes"])
        encoder, detector, _ = T.load_state(paths["checkpoints"] / "joint.ckpt")
    else:
        cfg = C.load(SMOKE, {"train.epochs": args.epochs})
        ds = D.build_dataset(S.generate_scene(cfg.scene))
        state = T.train(ds, cfg.train, "joint", cfg.encoder, cfg.detector)
        encoder, detector = state.encoder.eval(), state.detector.eval()

    rng = np.random.default_rng(5)
    cap = float(ds.config.get("count_cap", D.COUNT_CAP))
    corrupted = A.evaluation_corruption(ds.records, range(12), rng, cap, probability=0.15)
    idx = max(range(len(ds.records)), key=lambda i: sum(w.anomaly_label for w in corrupted[i].windows))
    clean, bad = ds.records[idx], corrupted[idx]
    tl = A.score_timeline(encoder, detector, clean, bad)
    print(f"lane {clean.lane_id} ({clean.role_class}), camera {clean.camera_id}")
    print("window  injected  p(clean)  p(corrupted)")
    for w, y, pc, pa in zip(tl["window"], tl["injected"], tl["clean_prob"], tl["corrupted_prob"]):
        bar = "#" * int(round(20 * pa))
        print(f"{w:>6}  {'yes' if y else '-':>8}  {pc:7.3f}  {pa:7.3f} {bar}")


if __name__ == "__main__":
    main()
