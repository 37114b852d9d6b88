"""Frames-n and distance sweeps: one model per n in 1..7, then per-bucket CSVs."""
import argparse
from pathlib import Path

from vitlr.cli import main

ROOT = Path(__file__).resolve().parents[1]

ap = argparse.ArgumentParser()
ap.add_argument("--work", default="runs/sweeps")
ap.add_argument("--count", type=int, default=200)
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--max-n", type=int, default=7)
args = ap.parse_args()
work = Path(args.work)
data = work / "data"
main(["gen-data", "--profile", "scenario-sweep", "--count", str(args.count),
      "--height", "64", "--width", "128", "--out", str(data)])
ckpts, paths = [], {}
for n in range(1, args.max_n + 1):
    run = work / f"n{n}"
    main(["train", "--config", str(ROOT / "configs/easy.cfg"), "--data", str(data / "train"),
          "--steps", str(args.steps), "--model-set", f"n={n}", "--out", str(run)])
    paths[n] = str(run / "checkpoint.vtlr")
    ckpts += ["--checkpoint", paths[n]]
main(["eval", *ckpts, "--data", str(data / "test"), "--bucket", "frames-n",
      "--out", str(work / "frames_n.csv")])
# distance buckets for the n=3 model (or the largest n trained)
main(["eval", "--checkpoint", paths[min(3, args.max_n)], "--data", str(data / "test"),
      "--bucket", "distance",
      "--out", str(work / "distance.csv")])
