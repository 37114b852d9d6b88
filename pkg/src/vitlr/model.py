"""The multi-frame traffic-light recognizer.

Pipeline for one clip of ``n`` frames (oldest first, current frame last)::

    frame_k --backbone--> (R_k, C_k) --concat--> projection --> map_k
    concat(map_1..map_n) + positional embedding --> encoder --> E
    learned query grid --decoder(E)--> query features --heads--> Prediction

Every layer is registered at construction time in ``model.layers`` so the
operator linter can walk the graph without running it.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import config as _config
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n: int = 3
    h: int = 128
    w: int = 256
    c: int = 3
    m: int = 16
    l: int = 4
    s: int = 3
    widths: tuple[int, ...] = (32, 64, 96)
    proj_width: int = 32
    query_width: int = 64
    mlp_ratio: int = 2
    encoder_depth: int = 2
    decoder_depth: int = 2
    encoder_kernel: int = 7
    sim_kernel: int = 3
    grid_h: int = 4
    grid_w: int = 4
    pos_embed: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        errs = []
        if self.n < 1:
            errs.append("n must be >= 1")
        if self.m < 1:
            errs.append("m must be >= 1")
        if self.l < 2:
            errs.append("l must be >= 2")
        for k in ("s", "encoder_kernel", "sim_kernel"):
            if getattr(self, k) % 2 == 0 or getattr(self, k) < 1:
                errs.append(f"{k} must be a positive odd integer")
        if len(self.widths) != 3 or min(self.widths) < 1:
            errs.append("widths must list three positive stage widths")
        elif self.widths[-1] % 2:
            errs.append("last backbone width must be even (split into R and C streams)")
        if self.query_width % 2:
            errs.append("query_width must be even (split into box and class halves)")
        if self.grid_h * self.grid_w != self.m:
            errs.append(f"grid {self.grid_h}x{self.grid_w} does not hold m={self.m} queries")
        if self.h % 8 or self.w % 8:
            errs.append("h and w must be multiples of 8 (three stride-2 stages)")
        elif (self.h // 8) % self.grid_h or (self.w // 8) % self.grid_w:
            errs.append(f"feature map {self.h // 8}x{self.w // 8} must be divisible by the "
                        f"query grid {self.grid_h}x{self.grid_w}")
        if errs:
            raise ValueError("invalid ModelConfig: " + "; ".join(errs))

    @property
    def feat_h(self) -> int:
        return self.h // 8

    @property
    def feat_w(self) -> int:
        return self.w // 8

    @property
    def fused_width(self) -> int:
        return self.n * self.proj_width

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "desk": ModelConfig(),
    "tiny": ModelConfig(h=64, w=128, widths=(16, 32, 48), proj_width=16, query_width=48,
                        m=32, encoder_depth=1, decoder_depth=2, grid_h=4, grid_w=8),
    "micro": ModelConfig(n=2, h=32, w=32, m=4, widths=(4, 6, 8), proj_width=4, query_width=8,
                         encoder_depth=1, decoder_depth=1, grid_h=2, grid_w=2),
}


def load_config(path, base: ModelConfig | None = None) -> ModelConfig:
    return _config.load(ModelConfig, path, base)


@dataclass
class Layer:
    name: str
    kind: str           # Conv2D, DepthwiseConv2D, BatchNormalization, LayerNorm, Dense
    kernel: int | None = None
    params: tuple[str, ...] = ()


@dataclass
class FeatureSet:
    """Per-frame regression and classification streams (same extents)."""
    reg: Tensor
    cls: Tensor


@dataclass
class Prediction:
    """Current-frame outputs for a batch of clips.

    ``boxes`` is [N, m, 4] holding (cx, cy, w, h) in pixels and ``scores``
    is [N, m, l+1] with the background class last.
    """
    boxes: Tensor
    scores: Tensor

    @property
    def batch(self) -> int:
        return self.boxes.shape[0]

    def centers(self, i: int = 0) -> np.ndarray:
        return self.boxes.data[i, :, :2].copy()

    def widths(self, i: int = 0) -> np.ndarray:
        return self.boxes.data[i, :, 2].copy()

    def heights(self, i: int = 0) -> np.ndarray:
        return self.boxes.data[i, :, 3].copy()

    def states(self, i: int = 0) -> np.ndarray:
        return self.scores.data[i].copy()


class ViTLRModel:
    """Configuration, parameters (``params``) and batchnorm buffers."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.layers: list[Layer] = []
        self.mode = "eval"
        self._rng = np.random.default_rng(cfg.seed)
        self._build()
        del self._rng

    # -- construction -----------------------------------------------------

    def _param(self, name: str, arr: np.ndarray) -> str:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = Tensor(arr.astype(np.float32), name=name)
        return name

    def _uniform(self, shape, fan_in: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return self._rng.uniform(-bound, bound, size=shape)

    def _conv(self, name, cin, cout, k, zero=False):
        w = np.zeros((cout, cin, k, k)) if zero else self._uniform((cout, cin, k, k), cin * k * k)
        self.layers.append(Layer(name, "Conv2D", k, (
            self._param(name + ".weight", w), self._param(name + ".bias", np.zeros(cout)))))

    def _dwconv(self, name, c, k):
        w = self._uniform((c, 1, k, k), k * k)
        self.layers.append(Layer(name, "DepthwiseConv2D", k, (
            self._param(name + ".weight", w), self._param(name + ".bias", np.zeros(c)))))

    def _bn(self, name, c):
        self.buffers[name + ".running_mean"] = np.zeros(c, np.float32)
        self.buffers[name + ".running_var"] = np.ones(c, np.float32)
        self.layers.append(Layer(name, "BatchNormalization", None, (
            self._param(name + ".gamma", np.ones(c)), self._param(name + ".beta", np.zeros(c)))))

    def _ln(self, name, c):
        self.layers.append(Layer(name, "LayerNorm", None, (
            self._param(name + ".gamma", np.ones(c)), self._param(name + ".beta", np.zeros(c)))))

    def _dense(self, name, din, dout, bias=None):
        b = np.zeros(dout) if bias is None else np.asarray(bias, dtype=float)
        self.layers.append(Layer(name, "Dense", None, (
            self._param(name + ".weight", self._uniform((dout, din), din)),
            self._param(name + ".bias", b))))

    def _convnext(self, name, c, k):
        self._dwconv(name + ".dw", c, k)
        self._ln(name + ".ln", c)
        self._conv(name + ".pw1", c, c * self.cfg.mlp_ratio, 1)
        self._conv(name + ".pw2", c * self.cfg.mlp_ratio, c, 1, zero=True)

    def _build(self):
        cfg = self.cfg
        cin = cfg.c
        for i, width in enumerate(cfg.widths):
            self._conv(f"backbone.stage{i}.conv", cin, width, 3)
            self._bn(f"backbone.stage{i}.bn", width)
            cin = width
        self._conv("backbone.split", cin, cin, 1)
        self._dwconv("proj.dw", cin, cfg.s)
        self._bn("proj.bn", cin)
        self._conv("proj.pw", cin, cfg.proj_width, 1)
        fused = cfg.fused_width
        if cfg.pos_embed:
            self._param("pos_embed", _sincos_embedding(fused, cfg.feat_h, cfg.feat_w)[None] * 0.5)
        for i in range(cfg.encoder_depth):
            self._convnext(f"encoder.block{i}", fused, cfg.encoder_kernel)
        cq = cfg.query_width
        self._param("queries", _query_init(cq, cfg.grid_h, cfg.grid_w)[None])
        for i in range(cfg.decoder_depth):
            p = f"decoder.layer{i}"
            self._convnext(p + ".sim", cq, cfg.sim_kernel)
            self._conv(p + ".cim.in_proj", fused, cq, 1)
            self._dwconv(p + ".cim.dw", cq, 3)
            self._conv(p + ".cim.out_proj", cq, cq, 1, zero=True)
            self._conv(p + ".ffn.fc1", cq, cq * cfg.mlp_ratio, 1)
            self._conv(p + ".ffn.fc2", cq * cfg.mlp_ratio, cq, 1, zero=True)
        half = cq // 2
        # start boxes near typical light extents instead of half the image
        size_bias = [0.0, 0.0, _logit(12 / cfg.w), _logit(24 / cfg.h)]
        self._dense("head.box", half, 4, bias=size_bias)
        self._dense("head.cls", half, cfg.l + 1)
        # each query starts centered on its own grid cell: channels 0/1 of the
        # query hold the logit of the cell center and feed cx/cy directly
        w = self.params["head.box.weight"].numpy() * 0.1
        w[:2] = 0.0
        w[0, 1] = w[1, 0] = 1.0
        self.params["head.box.weight"] = Tensor(w, name="head.box.weight")

    # -- helpers used by the forward functions -----------------------------

    def conv(self, name, x, stride=1, padding=None):
        w = self.params[name + ".weight"]
        k = w.shape[-1]
        pad = k // 2 if padding is None else padding
        return T.conv2d(x, w, self.params[name + ".bias"], stride, pad)

    def dwconv(self, name, x):
        w = self.params[name + ".weight"]
        return T.dwconv2d(x, w, self.params[name + ".bias"], 1, w.shape[-1] // 2)

    def bn(self, name, x):
        return T.batchnorm2d(x, self.params[name + ".gamma"], self.params[name + ".beta"],
                             self.buffers[name + ".running_mean"],
                             self.buffers[name + ".running_var"], 1e-5, self.mode, 0.1)

    def ln(self, name, x):
        return T.layernorm(x, self.params[name + ".gamma"], self.params[name + ".beta"], 1e-6)

    def dense(self, name, x):
        return T.dense(x, self.params[name + ".weight"], self.params[name + ".bias"])

    def convnext(self, name, x):
        y = self.dwconv(name + ".dw", x)
        y = self.ln(name + ".ln", y)
        y = T.relu(self.conv(name + ".pw1", y))
        return T.add(x, self.conv(name + ".pw2", y))

    def train(self) -> "ViTLRModel":
        self.mode = "train"
        return self

    def eval(self) -> "ViTLRModel":
        self.mode = "eval"
        return self

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers as plain arrays (checkpoint payload)."""
        out = {k: v.numpy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        if missing or extra:
            raise ValueError(f"checkpoint does not fit this config: missing {missing[:5]}, "
                             f"unexpected {extra[:5]}")
        for k in self.params:
            if state[k].shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {state[k].shape}, "
                                 f"model {self.params[k].shape}")
            self.params[k] = Tensor(state[k], name=k)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=np.float32)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def _sincos_embedding(c: int, h: int, w: int) -> np.ndarray:
    """2-D sine/cosine grid embedding, [c, h, w].

    Channels cycle through (sin y, sin x, cos y, cos x) with rising
    frequency, so any contiguous half of the channels sees both axes.
    """
    ys = ((np.arange(h) + 0.5) / h)[:, None].repeat(w, 1)
    xs = ((np.arange(w) + 0.5) / w)[None, :].repeat(h, 0)
    emb = np.zeros((c, h, w))
    for ch in range(c):
        freq = np.pi * (1 + ch // 4)
        grid = ys if ch % 2 == 0 else xs
        emb[ch] = np.sin(freq * grid) if ch % 4 < 2 else np.cos(freq * grid)
    return emb


def _query_init(c: int, gh: int, gw: int) -> np.ndarray:
    """Sine/cosine grid embedding whose first two channels are replaced by
    the logits of the cell-center coordinates (y, x)."""
    emb = _sincos_embedding(c, gh, gw)
    emb[0] = _logit_grid(gh)[:, None]
    emb[1] = _logit_grid(gw)[None, :]
    return emb


def _logit_grid(k: int) -> np.ndarray:
    u = (np.arange(k) + 0.5) / k
    return np.log(u / (1 - u))


# ---------------------------------------------------------------------------
# forward passes

def backbone_forward(model: ViTLRModel, frame: Tensor) -> FeatureSet:
    cfg = model.cfg
    if frame.ndim != 4 or frame.shape[1:] != (cfg.c, cfg.h, cfg.w):
        raise ValueError(f"frame must be [N,{cfg.c},{cfg.h},{cfg.w}], got {frame.shape}")
    x = frame
    for i in range(len(cfg.widths)):
        x = model.conv(f"backbone.stage{i}.conv", x, stride=2, padding=1)
        x = T.relu(model.bn(f"backbone.stage{i}.bn", x))
    x = model.conv("backbone.split", x)
    half = x.shape[1] // 2
    return FeatureSet(reg=T.take(x, np.arange(half), axis=1),
                      cls=T.take(x, np.arange(half, x.shape[1]), axis=1))


def conv_projection(model: ViTLRModel, features: Tensor) -> Tensor:
    """Depthwise s x s conv, batchnorm, pointwise conv; returns [N, Hf*Wf, Cp] tokens."""
    x = model.dwconv("proj.dw", features)
    x = model.bn("proj.bn", x)
    x = model.conv("proj.pw", x)
    return T.to_tokens(x)


def encoder_forward(model: ViTLRModel, fused_map: Tensor) -> Tensor:
    cfg = model.cfg
    if fused_map.shape[1] != cfg.fused_width:
        raise ValueError(f"encoder expects {cfg.fused_width} channels, got {fused_map.shape[1]}")
    x = fused_map
    for i in range(cfg.encoder_depth):
        x = model.convnext(f"encoder.block{i}", x)
    return x


def decoder_forward(model: ViTLRModel, encoded: Tensor, queries: Tensor) -> Tensor:
    """Self-interaction, cross-interaction and feed-forward per decoder layer.

    ``queries`` may carry batch 1 (shared learned queries); they are
    repeated to the batch of ``encoded``.
    """
    cfg = model.cfg
    if queries.shape[1] != cfg.query_width:
        raise ValueError(f"query width {queries.shape[1]} != configured {cfg.query_width}")
    gh, gw = queries.shape[2], queries.shape[3]
    hf, wf = encoded.shape[2], encoded.shape[3]
    q = queries
    if q.shape[0] != encoded.shape[0]:
        q = T.broadcast_batch(q, encoded.shape[0])
    for i in range(cfg.decoder_depth):
        p = f"decoder.layer{i}"
        q = model.convnext(p + ".sim", q)
        mem = model.conv(p + ".cim.in_proj", encoded)
        if mem.shape[1] != q.shape[1]:
            raise ValueError(f"projected encoder width {mem.shape[1]} != query width {q.shape[1]}")
        mixed = T.add(T.upsample_nearest(q, hf, wf), mem)
        mixed = model.dwconv(p + ".cim.dw", mixed)
        pooled = T.adaptive_avg_pool2d(mixed, gh, gw)
        q = T.add(q, model.conv(p + ".cim.out_proj", pooled))
        hidden = T.relu(model.conv(p + ".ffn.fc1", q))
        q = T.add(q, model.conv(p + ".ffn.fc2", hidden))
    return q


_BOX_EPS = 1e-4


def heads_forward(model: ViTLRModel, query_feats: Tensor) -> Prediction:
    cfg = model.cfg
    n, cq = query_feats.shape[0], query_feats.shape[1]
    m = query_feats.shape[2] * query_feats.shape[3]
    tokens = T.reshape(T.to_tokens(query_feats), (n * m, cq))
    half = cq // 2
    box_in = T.take(tokens, np.arange(half), axis=1)
    cls_in = T.take(tokens, np.arange(half, cq), axis=1)
    raw = T.sigmoid(model.dense("head.box", box_in))
    # keep sizes strictly positive even when the sigmoid saturates
    unit = T.add(T.scale(raw, 1 - 2 * _BOX_EPS), _BOX_EPS)
    extent = np.array([cfg.w, cfg.h, cfg.w, cfg.h], dtype=T.default_dtype())
    boxes = T.reshape(T.mul(unit, extent), (n, m, 4))
    scores = T.softmax(model.dense("head.cls", cls_in), axis=1)
    return Prediction(boxes=boxes, scores=T.reshape(scores, (n, m, cfg.l + 1)))


def _stack_clips(clips) -> Tensor:
    arr = np.asarray(clips, dtype=T.default_dtype())
    if arr.ndim == 4:  # single clip [n, c, h, w]
        arr = arr[None]
    return arr


def model_forward(model: ViTLRModel, clip) -> Prediction:
    """Run one clip ([n, c, h, w]) or a batch of clips ([B, n, c, h, w]).

    Frames are ordered oldest to newest; the prediction is for the newest.
    Pixel values are expected in [0, 1].
    """
    cfg = model.cfg
    arr = clip.data if isinstance(clip, Tensor) else _stack_clips(clip)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise ValueError(f"clip must be [n,c,h,w] or [B,n,c,h,w], got shape {arr.shape}")
    b, n = arr.shape[:2]
    if n != cfg.n:
        raise ValueError(f"expected {cfg.n} frames, got {n}")
    if arr.shape[2:] != (cfg.c, cfg.h, cfg.w):
        raise ValueError(f"frames must be {cfg.c}x{cfg.h}x{cfg.w}, got "
                         f"{'x'.join(map(str, arr.shape[2:]))}")
    # all frames of all clips through the shared backbone at once: batch index b*n + k
    frames = Tensor(arr.reshape(b * n, cfg.c, cfg.h, cfg.w))
    feats = backbone_forward(model, frames)
    trunk = T.concat_channels([feats.reg, feats.cls])
    tokens = conv_projection(model, trunk)
    maps = T.from_tokens(tokens, cfg.feat_h, cfg.feat_w)  # [b*n, Cp, Hf, Wf]
    per_frame = T.reshape(maps, (b, n * cfg.proj_width, cfg.feat_h, cfg.feat_w))
    fused = per_frame
    if cfg.pos_embed:
        fused = T.add(fused, model.params["pos_embed"])
    encoded = encoder_forward(model, fused)
    q = decoder_forward(model, encoded, model.params["queries"])
    return heads_forward(model, q)


# ---------------------------------------------------------------------------
# operator compatibility

ALLOWED = {"Dense", "Flatten", "Reshape", "BatchNormalization", "Conv2D", "DepthwiseConv2D"}
PREFERRED_KERNELS = {1, 3}


@dataclass
class LintEntry:
    layer: str
    kind: str
    kernel: int | None
    status: str                       # ok | warning
    reasons: list[str] = field(default_factory=list)


@dataclass
class LintReport:
    entries: list[LintEntry]

    @property
    def warnings(self) -> list[LintEntry]:
        return [e for e in self.entries if e.status == "warning"]

    def count(self, reason_prefix: str) -> int:
        return sum(any(r.startswith(reason_prefix) for r in e.reasons) for e in self.entries)

    def render(self) -> str:
        lines = [f"{len(self.entries)} operators, {len(self.warnings)} warnings"]
        for e in self.entries:
            k = f" {e.kernel}x{e.kernel}" if e.kernel else ""
            why = f"  [{'; '.join(e.reasons)}]" if e.reasons else ""
            lines.append(f"{e.status:7s} {e.kind}{k} {e.layer}{why}")
        return "\n".join(lines)


def lint_graph(model: ViTLRModel) -> LintReport:
    """Classify every instantiated layer against the embedded-NPU operator set.

    Only warnings are produced: LayerNorm is outside the allowlist and
    kernels other than 1x1/3x3 violate the NPU's kernel preference.
    """
    entries = []
    for layer in model.layers:
        reasons = []
        if layer.kind not in ALLOWED:
            reasons.append(f"unsupported operator: {layer.kind} not in NPU allowlist")
        if layer.kernel is not None and layer.kernel not in PREFERRED_KERNELS:
            reasons.append(f"preference violation: {layer.kernel}x{layer.kernel} kernel "
                           f"(1x1/3x3 preferred)")
        entries.append(LintEntry(layer.name, layer.kind, layer.kernel,
                                 "warning" if reasons else "ok", reasons))
    return LintReport(entries)


def build_model(cfg: ModelConfig | str = "desk", **overrides) -> ViTLRModel:
    if isinstance(cfg, str):
        cfg = PRESETS[cfg]
    if overrides:
        cfg = cfg.replace(**overrides)
    return ViTLRModel(cfg)


__all__ = [
    "ModelConfig", "PRESETS", "ViTLRModel", "FeatureSet", "Prediction", "Layer",
    "backbone_forward", "conv_projection", "encoder_forward", "decoder_forward",
    "heads_forward", "model_forward", "lint_graph", "LintReport", "build_model",
    "load_config",
]
