"""Train n=3 and n=1 models with the same recipe on mixed data and compare
recall on occlusion-tagged test clips."""
import argparse
import csv
from pathlib import Path

from vitlr.cli import main

ROOT = Path(__file__).resolve().parents[1]

ap = argparse.ArgumentParser()
ap.add_argument("--work", default="runs/occlusion")
ap.add_argument("--seed", type=int, default=5)
ap.add_argument("--count", type=int, default=600)
args = ap.parse_args()
work = Path(args.work)
data = work / "data"
main(["gen-data", "--profile", "mixed", "--count", str(args.count), "--seed", str(args.seed),
      "--height", "64", "--width", "128", "--out", str(data)])
recall = {}
for n in (3, 1):
    run = work / f"n{n}"
    main(["train", "--config", str(ROOT / "configs/easy.cfg"), "--data", str(data / "train"),
          "--model-set", f"n={n}", "--out", str(run)])
    main(["eval", "--checkpoint", str(run / "checkpoint.vtlr"), "--data", str(data / "test"),
          "--bucket", "scenario", "--out", str(run / "scenario.csv")])
    rows = {r["bucket"]: r for r in csv.DictReader(open(run / "scenario.csv"))}
    recall[n] = float(rows["occlusion"]["recall"])
print(f"occlusion recall: n=3 {recall[3]:.3f}  n=1 {recall[1]:.3f}  "
      f"gap {100 * (recall[3] - recall[1]):+.1f} points")
