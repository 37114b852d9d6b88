"""Command-line entry point: ``vitlr <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every subcommand
that knows where its output goes writes a ``run_manifest.json`` there,
on success and on failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import config as _config

log = logging.getLogger("vitlr")

PROFILES = ("easy", "mixed", "scenario-sweep", "egolane")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name not in skip:
            p.add_argument(_flag(f.name), dest=f.name, default=None, metavar=f.name.upper(),
                           help=f"(default {f.default})")


def _dataclass_from_args(cls, args, file_key: str | None = None, skip=()):
    base = None
    path = getattr(args, file_key, None) if file_key else None
    if path:
        base = _config.load(cls, path)
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(cls)
              if f.name not in skip and getattr(args, f.name, None) is not None}
    return _config.from_kv(cls, values, base)


def _kv_list(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    from .train import TrainConfig

    p = _Parser(prog="vitlr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vitlr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--profile", choices=PROFILES, default="easy")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=8, help="frames per clip")
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--width", type=int, default=256)
    g.add_argument("--queries", type=int, default=16, help="upper bound on lights per clip")
    g.add_argument("--max-lights", type=int, default=3)

    t = sub.add_parser("train", help="train a model from scratch")
    t.add_argument("--config", help="TrainConfig key=value file; flags override it")
    _add_dataclass_flags(t, TrainConfig)
    t.add_argument("--model-set", action="append", metavar="KEY=VALUE",
                   help="override one model config key (repeatable)")

    i = sub.add_parser("infer", help="run a checkpoint on frames")
    i.add_argument("--checkpoint", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--frames", help="comma-separated PPM paths, oldest first")
    src.add_argument("--clip", help="clip directory; one record per frame with a full window")
    i.add_argument("--out", help="JSON lines file (default: stdout)")

    e = sub.add_parser("eval", help="mAP / P / R / F1 per bucket")
    e.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path; repeat for --bucket frames-n")
    e.add_argument("--data", required=True)
    e.add_argument("--bucket", choices=("none", "distance", "scenario", "frames-n"),
                   default="none")
    e.add_argument("--out", required=True, help="CSV path")

    el = sub.add_parser("egolane", help="ego-lane state per frame from poses and the map light")
    el.add_argument("--data", required=True, help="clip directory or dataset")
    det = el.add_mutually_exclusive_group(required=True)
    det.add_argument("--checkpoint")
    det.add_argument("--oracle", action="store_true", help="use ground-truth boxes")
    el.add_argument("--radius", type=float, default=None)
    el.add_argument("--window", type=int, default=1, help="frames per step for --oracle")
    for k in ("fx", "fy", "cx", "cy"):
        el.add_argument(f"--{k}", type=float, default=None)
    el.add_argument("--out", required=True, help="directory for <clip>.jsonl files")

    b = sub.add_parser("bench", help="single-clip inference latency")
    src = b.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--model-config", default=None, help="preset name or key=value file")
    b.add_argument("--model-set", action="append", metavar="KEY=VALUE")
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="JSON report path")

    lg = sub.add_parser("lint-graph", help="check layers against the NPU operator set")
    src = lg.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--model-config", default=None)
    lg.add_argument("--model-set", action="append", metavar="KEY=VALUE")
    lg.add_argument("--out", help="JSON report path")
    return p


# ---------------------------------------------------------------------------
# manifest

@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None
    version: str = __version__
    started: float = 0.0
    finished: float = 0.0
    status: str = "running"
    error: str | None = None

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, default=str) + "\n")


def _manifest_path(args) -> Path | None:
    out = getattr(args, "out", None)
    if not out:
        return None
    p = Path(out)
    if args.command in ("gen-data", "train", "egolane"):
        return p / "run_manifest.json"
    return p.with_name(p.name + ".manifest.json")


# ---------------------------------------------------------------------------
# subcommands

def _model_config(spec: str | None, sets) -> "ModelConfig":
    from .model import ModelConfig
    from .train import resolve_model_config

    cfg = resolve_model_config(spec) if spec else ModelConfig()
    values = _kv_list(sets)
    return _config.from_kv(ModelConfig, values, cfg) if values else cfg


def cmd_gen_data(args, man: RunManifest):
    if args.count < 10:
        raise UsageError("--count must be >= 10")
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    man.config = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    man.seed = args.seed
    if args.profile == "egolane":
        root = _gen_egolane(args)
    else:
        from .synth import generate_dataset

        root = generate_dataset(args.out, args.profile, args.count, args.seed, args.frames,
                                args.height, args.width, args.queries, args.max_lights)
    print(f"wrote {args.count} clips to {root}")


def _gen_egolane(args) -> Path:
    from .egolane import egolane_clip
    from .synth import INDEX, SplitMix64, split_counts, write_clip

    root = Path(args.out)
    rng = SplitMix64(args.seed)
    n_train, n_valid, _ = split_counts(args.count)
    index = {"train": [], "valid": [], "test": []}
    for i in range(args.count):
        frames, ann, _ = egolane_clip(rng.next_u64() & 0xFFFFFFFF, args.frames, args.height,
                                      args.width)
        split = "train" if i < n_train else ("valid" if i < n_train + n_valid else "test")
        rel = f"{split}/clip_{i:05d}"
        write_clip(root / rel, frames, ann)
        index[split].append(rel)
    (root / INDEX).write_text(json.dumps(index, indent=1))
    return root


def cmd_train(args, man: RunManifest):
    from .train import TrainConfig, train

    try:
        cfg = _dataclass_from_args(TrainConfig, args, "config")
        model_cfg = _model_config(cfg.model_config, args.model_set)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    if not cfg.data:
        raise UsageError("--data is required")
    args.out = cfg.out
    man.config = {"train": dataclasses.asdict(cfg), "model": dataclasses.asdict(model_cfg)}
    man.seed = cfg.seed
    res = train(cfg, model_cfg)
    last = res.losses[-1]
    print(f"trained {cfg.steps} steps in {res.seconds:.1f}s, final loss {last[3]:.4f}; "
          f"checkpoint {res.checkpoint}")


def _read_frames(paths: list[str]) -> np.ndarray:
    from .synth import read_ppm

    return np.stack([read_ppm(p) for p in paths])


def cmd_infer(args, man: RunManifest):
    from .metrics import decode
    from .model import model_forward
    from .synth import load_clip
    from .train import clip_window, load_model

    man.config = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    model = load_model(args.checkpoint)
    n = model.cfg.n
    if args.frames is not None:
        paths = [s for s in args.frames.split(",") if s]
        if len(paths) != n:
            raise UsageError(f"expected {n} frames, got {len(paths)}")
        frames = _read_frames(paths)
        ends = [n - 1]
    else:
        frames, _ = load_clip(args.clip)
        if len(frames) < n:
            raise UsageError(f"expected at least {n} frames, got {len(frames)}")
        ends = list(range(n - 1, len(frames)))
    if frames.shape[1:3] != (model.cfg.h, model.cfg.w):
        raise UsageError(f"frames are {frames.shape[1]}x{frames.shape[2]}, model expects "
                         f"{model.cfg.h}x{model.cfg.w}")
    lines = []
    for t in ends:
        pred = model_forward(model, clip_window(frames, t, n))
        boxes = [{"cx": d.box.cx, "cy": d.box.cy, "w": d.box.w, "h": d.box.h,
                  "state": d.state, "conf": d.confidence} for d in decode(pred, 0, t)]
        lines.append(json.dumps({"frame": t, "boxes": boxes}))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args, man: RunManifest):
    from .metrics import bucket_eval, evaluate_model, summarize, write_reports_csv
    from .train import load_clips, load_model

    man.config = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    if args.bucket != "frames-n" and len(args.checkpoint) > 1:
        raise UsageError("several checkpoints are only accepted with --bucket frames-n")
    models = [load_model(c) for c in args.checkpoint]
    clips = load_clips(args.data)
    if args.bucket == "none":
        reports = [evaluate_model(models[0], clips, "all")]
    elif args.bucket == "frames-n":
        labelled = {}
        for path, m in zip(args.checkpoint, models):
            key = f"n={m.cfg.n}"
            if key in labelled:
                raise UsageError(f"two checkpoints with {key}")
            labelled[key] = m
        reports = bucket_eval(dict(sorted(labelled.items(), key=lambda kv: int(kv[0][2:]))),
                              clips, "frames-n")
    else:
        reports = bucket_eval(models[0], clips, args.bucket)
    write_reports_csv(reports, args.out)
    print(summarize(reports))


def cmd_egolane(args, man: RunManifest):
    from .egolane import (DEFAULT_RADIUS, CameraModel, MapLight, OracleDetector,
                          egolane_pipeline, records_to_jsonl)
    from .synth import load_clip, resolve_clips
    from .train import load_model

    radius = DEFAULT_RADIUS if args.radius is None else args.radius
    if radius <= 0:
        raise UsageError("--radius must be > 0")
    man.config = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    model = load_model(args.checkpoint) if args.checkpoint else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    done = 0
    for d in resolve_clips(args.data):
        frames, ann = load_clip(d)
        if ann.poses is None or ann.map_light is None:
            log.warning("%s: no poses or map light, skipped", d)
            continue
        h, w = frames.shape[1:3]
        base = CameraModel.for_image(w, h)
        cam = CameraModel(args.fx or base.fx, args.fy or base.fy,
                          base.cx if args.cx is None else args.cx,
                          base.cy if args.cy is None else args.cy, w, h)
        detector = model if model is not None else OracleDetector(ann, args.window)
        recs = egolane_pipeline(detector, frames, ann.poses, MapLight.from_manifest(ann.map_light),
                                cam, radius)
        (out / f"{Path(d).name}.jsonl").write_text(records_to_jsonl(recs))
        done += 1
    print(f"wrote ego-lane records for {done} clip(s) to {out}")


def _bench_model(args):
    from .train import load_model

    if args.checkpoint:
        return load_model(args.checkpoint)
    from .model import ViTLRModel

    return ViTLRModel(_model_config(args.model_config or "desk", args.model_set))


def cmd_bench(args, man: RunManifest):
    from .metrics import fps_bench

    if args.reps < 3:
        raise UsageError("--reps must be >= 3")
    man.config = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    man.seed = args.seed
    model = _bench_model(args)
    c = model.cfg
    rng = np.random.default_rng(args.seed)
    clips = [rng.random((c.n, c.c, c.h, c.w), dtype=np.float32) for _ in range(3)]
    res = fps_bench(model, clips, args.warmup, args.reps)
    res["model"] = dataclasses.asdict(c)
    text = json.dumps(res, indent=1, default=str)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(f"median {res['median_s'] * 1e3:.1f} ms  p10 {res['p10_s'] * 1e3:.1f}  "
          f"p90 {res['p90_s'] * 1e3:.1f}  fps {res['fps']:.2f}")


def cmd_lint(args, man: RunManifest):
    from .model import lint_graph

    man.config = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    model = _bench_model(args)
    rep = lint_graph(model)
    print(rep.render())
    if args.out:
        doc = {"operators": len(rep.entries), "warnings": len(rep.warnings),
               "unsupported": rep.count("unsupported operator"),
               "kernel_preference": rep.count("preference violation"),
               "entries": [dataclasses.asdict(e) for e in rep.entries]}
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "egolane": cmd_egolane, "bench": cmd_bench,
            "lint-graph": cmd_lint}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        sys.stderr.write(parser.format_help())
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    man = RunManifest(args.command, {}, getattr(args, "seed", None), started=time.time())
    code = 0
    try:
        COMMANDS[args.command](args, man)
        man.status = "ok"
    except UsageError as exc:
        sys.stderr.write(f"vitlr {args.command}: {exc}\n")
        man.status, man.error, code = "usage-error", str(exc), 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        if args.verbose:
            traceback.print_exc()
        sys.stderr.write(f"vitlr {args.command}: error: {exc}\n")
        man.status, man.error, code = "failed", f"{type(exc).__name__}: {exc}", 2
    man.finished = time.time()
    path = _manifest_path(args)
    if path is not None:
        try:
            man.write(path)
        except OSError as exc:
            sys.stderr.write(f"vitlr: could not write run manifest: {exc}\n")
            code = code or 2
    return code


if __name__ == "__main__":
    sys.exit(main())
