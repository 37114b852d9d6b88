"""Adam optimization over synthetic clips and the binary checkpoint format."""
from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import config as _config
from . import tensor as T
from .loss import Box, LossConfig, batch_loss
from .model import PRESETS, ModelConfig, ViTLRModel, model_forward
from .synth import load_clip, resolve_clips
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"VTLR"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0          # global-norm clip; 0 disables
    warmup_steps: int = 0           # linear lr ramp; keeps early matching local
    seed: int = 0
    data: str = ""                  # dataset root or split directory
    model_config: str = "tiny"      # preset name or key=value file
    out: str = "run"
    log_interval: int = 50
    checkpoint_every: int = 0       # 0: only the final checkpoint
    window: str = "random"          # random | last: which n-frame window of a clip to train on
    hflip: float = 0.0              # probability of mirroring a training window left-right
    shift: int = 0                  # max random translation in pixels (lights stay in frame)
    ciou_weight: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    match_class_weight: float = 1.0
    match_box_weight: float = 2.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not 0 <= self.hflip <= 1:
            raise ValueError("hflip must lie in [0, 1]")
        if self.shift < 0:
            raise ValueError("shift must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.window not in ("random", "last"):
            raise ValueError("window must be 'random' or 'last'")

    def loss_config(self) -> LossConfig:
        return LossConfig(ciou_weight=self.ciou_weight, alpha=self.focal_alpha,
                          gamma=self.focal_gamma, match_class_weight=self.match_class_weight,
                          match_box_weight=self.match_box_weight)


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return _config.load(TrainConfig, path, base)


def resolve_model_config(spec: str) -> ModelConfig:
    if spec in PRESETS:
        return PRESETS[spec]
    return _config.load(ModelConfig, spec)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "OptimState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict[str, Tensor], OptimState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    keys = set(params)
    for other, label in ((set(grads), "grads"), (set(state.m), "state")):
        if other != keys:
            diff = sorted(keys ^ other)
            raise KeyError(f"{label} keys differ from params at {diff[0]!r}")
    t = state.step + 1
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[k] = Tensor(p.data - update, name=p.name)
        new_m[k] = m.astype(state.m[k].dtype)
        new_v[k] = v.astype(state.v[k].dtype)
    return new_params, OptimState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# checkpoints

def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"tensor name too long: {name[:40]}...")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(params: Mapping[str, np.ndarray | Tensor], path) -> Path:
    """Write tensors as: b"VTLR", u32 version, u32 count, then per tensor
    u16 name length, UTF-8 name, u8 rank, u32 extents, float32 LE data."""
    p = Path(path)
    blobs = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        blobs.append(_tensor_record(name, arr))
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(b"".join(blobs))
    tmp.replace(p)
    return p


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = data[pos: pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a VTLR checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        try:
            name = take(nlen, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: tensor {i} name is not valid UTF-8") from None
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        numel = math.prod(shape)
        arr = np.frombuffer(take(4 * numel, f"{name} data"), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after {count} tensors")
    return out


def checkpoint_size(tensors: Mapping[str, np.ndarray]) -> int:
    return 12 + sum(2 + len(k.encode()) + 1 + 4 * np.ndim(v) + 4 * np.size(v)
                    for k, v in tensors.items())


def save_model(model: ViTLRModel, path) -> Path:
    p = save_checkpoint(model.state(), path)
    _config.save(model.cfg, str(p) + ".cfg")
    return p


def load_model(path, cfg: ModelConfig | None = None) -> ViTLRModel:
    """Rebuild a model from a checkpoint and its ``.cfg`` sidecar."""
    if cfg is None:
        side = Path(str(path) + ".cfg")
        if not side.is_file():
            raise FileNotFoundError(f"{side} not found; pass the model config explicitly")
        cfg = _config.load(ModelConfig, side)
    model = ViTLRModel(cfg)
    model.load_state(load_checkpoint(path))
    return model.eval()


# ---------------------------------------------------------------------------
# data

@dataclass
class ClipData:
    frames: np.ndarray          # uint8 [T, h, w, 3]
    ann: object
    path: str = ""


def load_clips(path) -> list[ClipData]:
    out = []
    for d in resolve_clips(path):
        frames, ann = load_clip(d)
        out.append(ClipData(frames, ann, str(d)))
    return out


def clip_window(frames: np.ndarray, end: int, n: int) -> np.ndarray:
    """Frames end-n+1..end as float NCHW in [0, 1]: [n, 3, h, w]."""
    win = frames[end - n + 1: end + 1]
    return win.transpose(0, 3, 1, 2).astype(np.float32) / 255.0


def training_sample(clip: ClipData, end: int, n: int, flip: bool = False,
                    offset: tuple[int, int] = (0, 0)):
    """Input window and targets, optionally mirrored about the vertical axis
    and translated by ``offset`` = (dy, dx) pixels with edge replication."""
    x = clip_window(clip.frames, end, n)
    gts = clip.ann.targets(end)
    if flip:
        w = x.shape[-1]
        x = x[..., ::-1].copy()
        gts = [(Box(w - b.cx, b.cy, b.w, b.h), s) for b, s in gts]
    dy, dx = offset
    if dy or dx:
        h, w = x.shape[-2:]
        pad = ((0, 0), (0, 0), (max(dy, 0), max(-dy, 0)), (max(dx, 0), max(-dx, 0)))
        x = np.pad(x, pad, mode="edge")[..., max(-dy, 0): max(-dy, 0) + h,
                                         max(-dx, 0): max(-dx, 0) + w].copy()
        gts = [(Box(b.cx + dx, b.cy + dy, b.w, b.h), s) for b, s in gts]
    return x, gts


def _draw_shift(rng, gts, shape, limit: int) -> tuple[int, int]:
    if limit == 0:
        return 0, 0
    h, w = shape
    lo_x, hi_x, lo_y, hi_y = -limit, limit, -limit, limit
    for b, _ in gts:
        x0, y0, x1, y1 = b.corners()
        lo_x, hi_x = max(lo_x, math.ceil(-x0)), min(hi_x, math.floor(w - x1))
        lo_y, hi_y = max(lo_y, math.ceil(-y0)), min(hi_y, math.floor(h - y1))
    dx = int(rng.integers(lo_x, hi_x + 1)) if lo_x <= hi_x else 0
    dy = int(rng.integers(lo_y, hi_y + 1)) if lo_y <= hi_y else 0
    return dy, dx


def _batches(clips: list[ClipData], cfg: TrainConfig, n: int):
    rng = np.random.default_rng(cfg.seed)
    size = min(cfg.batch_size, len(clips))
    while True:
        order = rng.permutation(len(clips))
        for start in range(0, len(order) - size + 1, size):
            items = []
            for i in order[start: start + size]:
                c = clips[i]
                last = len(c.frames) - 1
                end = last if cfg.window == "last" else int(rng.integers(n - 1, last + 1))
                flip = cfg.hflip > 0 and rng.random() < cfg.hflip
                offset = _draw_shift(rng, c.ann.targets(end), c.frames.shape[1:3], cfg.shift)
                items.append((c, end, flip, offset))
            yield items


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: ViTLRModel
    losses: list[tuple[int, float, float, float]]
    checkpoint: Path
    seconds: float


class DivergenceError(RuntimeError):
    pass


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm:
        return grads
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}


def lr_at(cfg: TrainConfig, step: int) -> float:
    if step >= cfg.warmup_steps:
        return cfg.lr
    return cfg.lr * step / cfg.warmup_steps


def train(cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          clips: list[ClipData] | None = None) -> TrainResult:
    """Train from scratch; writes ``loss.csv`` and checkpoints under ``cfg.out``."""
    t0 = time.perf_counter()
    model_cfg = model_cfg or resolve_model_config(cfg.model_config)
    if clips is None:
        clips = load_clips(cfg.data)
    n = model_cfg.n
    clips = [c for c in clips if len(c.frames) >= n]
    if not clips:
        raise ValueError(f"dataset {cfg.data!r} has no clips with >= {n} frames")
    shape = clips[0].frames.shape[1:3]
    if shape != (model_cfg.h, model_cfg.w):
        raise ValueError(f"dataset frames are {shape[0]}x{shape[1]} but the model expects "
                         f"{model_cfg.h}x{model_cfg.w}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ViTLRModel(model_cfg).train()
    state = OptimState.zeros_like(model.params)
    loss_cfg = cfg.loss_config()
    losses: list[tuple[int, float, float, float]] = []
    batches = _batches(clips, cfg, n)
    csv_path = out / "loss.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "focal", "ciou", "total"])
        for step in range(1, cfg.steps + 1):
            items = next(batches)
            samples = [training_sample(c, end, n, *aug) for c, end, *aug in items]
            x = np.stack([xs for xs, _ in samples])
            gts = [g for _, g in samples]
            try:
                with T.Tape() as tape:
                    pred = model_forward(model, x)
                    terms = batch_loss(pred, gts, loss_cfg)
                grads = T.backward(tape, terms.total, model.params)
            except T.NonFiniteError as exc:
                raise DivergenceError(f"non-finite value at step {step}: {exc}") from None
            total = terms.total.item()
            if not math.isfinite(total):
                raise DivergenceError(f"loss is {total} at step {step}")
            grads = _clip_grads(grads, cfg.grad_clip)
            model.params, state = adam_step(model.params, grads, state, lr_at(cfg, step),
                                            cfg.beta1, cfg.beta2, cfg.eps)
            row = (step, terms.focal, terms.ciou, total)
            losses.append(row)
            writer.writerow([step, f"{terms.focal:.9g}", f"{terms.ciou:.9g}", f"{total:.9g}"])
            if cfg.log_interval and step % cfg.log_interval == 0:
                recent = [r[3] for r in losses[-cfg.log_interval:]]
                log.info("step %d loss %.4f (focal %.4f ciou %.4f)", step,
                         sum(recent) / len(recent), terms.focal, terms.ciou)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
                save_model(model, out / f"checkpoint_{step:06d}.vtlr")
    model.eval()
    ckpt = save_model(model, out / "checkpoint.vtlr")
    return TrainResult(model, losses, ckpt, time.perf_counter() - t0)


def read_loss_log(path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["step", "focal", "ciou", "total"]:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in reader]


__all__ = ["TrainConfig", "OptimState", "adam_step", "save_checkpoint", "load_checkpoint",
           "checkpoint_size", "save_model", "load_model", "train", "lr_at", "training_sample", "TrainResult",
           "load_clips", "clip_window", "CheckpointError", "DivergenceError",
           "load_train_config", "resolve_model_config", "read_loss_log", "MAGIC",
           "FORMAT_VERSION"]
