"""Generate the easy dataset, train the tiny model with configs/easy.cfg and report test mAP."""
import argparse
import time
from pathlib import Path

from vitlr.cli import main

ROOT = Path(__file__).resolve().parents[1]

ap = argparse.ArgumentParser()
ap.add_argument("--work", default="runs/easy")
ap.add_argument("--seed", type=int, default=11)
args = ap.parse_args()
work = Path(args.work)
t0 = time.perf_counter()
# 285 clips split 70/10/20 leaves 200 for training
main(["gen-data", "--profile", "easy", "--count", "285", "--seed", str(args.seed),
      "--height", "64", "--width", "128", "--out", str(work / "data")])
main(["train", "--config", str(ROOT / "configs/easy.cfg"), "--data", str(work / "data/train"),
      "--out", str(work / "run")])
main(["eval", "--checkpoint", str(work / "run/checkpoint.vtlr"), "--data", str(work / "data/test"),
      "--out", str(work / "eval.csv")])
print(f"total {(time.perf_counter() - t0) / 60:.1f} min")
