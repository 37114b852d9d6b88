"""Inference latency of the desk and tiny presets for n = 1..7."""
import argparse
import json
from pathlib import Path

from vitlr.cli import main

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="runs/bench")
ap.add_argument("--reps", type=int, default=10)
args = ap.parse_args()
out = Path(args.out)
for preset in ("desk", "tiny"):
    for n in range(1, 8):
        path = out / f"{preset}_n{n}.json"
        main(["bench", "--model-config", preset, "--model-set", f"n={n}", "--reps",
              str(args.reps), "--out", str(path)])
        res = json.loads(path.read_text())
        print(f"{preset} n={n}: {res['fps']:.2f} fps")
