"""Deterministic synthetic traffic-light clips and their on-disk format.

All randomness comes from :class:`SplitMix64`, so a clip is a pure function
of its :class:`ClipSpec` on every platform. Frames are stored as binary PPM
(P6) and annotations as one JSON manifest per clip::

    {"clip_id": str, "fps": float, "num_states": int,
     "frames": [{"image": "frame_000.ppm",
                 "lights": [{"cx", "cy", "w", "h", "state", "visible"}],
                 "pose": {"t": [x, y, z], "r": [9 floats]}}],      # optional
     "map_light": {"xyz": [x, y, z], "lane": str},                 # optional
     "tags": [...], "distance": "<20m"}                            # optional
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .loss import Box

STATES = ("red", "yellow", "green", "off")
STATE_INDEX = {s: i for i, s in enumerate(STATES)}
TAGS = ("occlusion", "truncation", "blur", "small", "easy")
SWEEP_TAGS = ("occlusion", "truncation", "blur", "small")
DISTANCES = ("<20m", "20-50m", "50-100m")
# housing height range in pixels at a 128-pixel frame height
HEIGHT_RANGE = {"<20m": (24.0, 48.0), "20-50m": (10.0, 24.0), "50-100m": (4.0, 10.0)}
ASPECT = 0.4          # housing width / height
MIN_WIDTH = 2.0


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood): 64-bit state, golden-gamma
    increment, two xor-shift-multiply mixing rounds."""

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) / float(1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def choice(self, seq):
        return seq[self.randint(0, len(seq) - 1)]

    def chance(self, p: float) -> bool:
        return self.uniform() < p

    def fork(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class LightSpec:
    cx: float                 # frame-0 center (px)
    cy: float
    height: float             # frame-0 housing height (px)
    vx: float = 0.0           # px / frame
    vy: float = 0.0
    growth: float = 0.0       # relative height growth per frame
    state: int = 0
    switch_frame: int = -1    # frame at which the state changes; -1 = never
    switch_state: int = 0
    track: tuple[tuple[float, float, float], ...] | None = None  # explicit (cx, cy, h) per frame

    def geometry(self, t: int) -> tuple[float, float, float, float]:
        if self.track is not None:
            cx, cy, h = self.track[t]
        else:
            cx, cy = self.cx + self.vx * t, self.cy + self.vy * t
            h = self.height * (1.0 + self.growth * t)
        return cx, cy, max(h * ASPECT, MIN_WIDTH), h

    def state_at(self, t: int) -> int:
        return self.switch_state if 0 <= self.switch_frame <= t else self.state


@dataclass(frozen=True)
class OcclusionSpec:
    light: int
    start: int                # first occluded frame
    end: int                  # last occluded frame (inclusive)
    pad_x: float = 0.3        # occluder margin as a fraction of the light size
    pad_y: float = 0.2
    drift: float = 0.5        # occluder horizontal motion, px / frame
    shade: int = 90


@dataclass(frozen=True)
class ClipSpec:
    seed: int
    n_frames: int = 8
    h: int = 128
    w: int = 256
    lights: tuple[LightSpec, ...] = ()
    tags: tuple[str, ...] = ("easy",)
    distance: str = "<20m"
    m: int = 16
    occlusion: OcclusionSpec | None = None
    fps: float = 10.0
    clip_id: str = ""

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance bucket {self.distance!r}")
        bad = [t for t in self.tags if t not in TAGS]
        if bad:
            raise ValueError(f"unknown scenario tag(s) {bad}")


@dataclass
class LightLabel:
    box: Box
    state: int
    visible: bool = True


@dataclass
class Pose:
    t: tuple[float, float, float]
    r: tuple[float, ...]          # 9 row-major entries, world -> camera


@dataclass
class Annotation:
    clip_id: str
    frames: list[list[LightLabel]]
    fps: float = 10.0
    num_states: int = len(STATES)
    tags: tuple[str, ...] = ()
    distance: str | None = None
    poses: list[Pose] | None = None
    map_light: dict | None = None

    def targets(self, t: int) -> list[tuple[Box, int]]:
        """Ground truth (box, state) pairs of frame ``t`` (occluded lights included)."""
        return [(lab.box, lab.state) for lab in self.frames[t]]


def height_range(distance: str, h: int) -> tuple[float, float]:
    lo, hi = HEIGHT_RANGE[distance]
    return lo * h / 128.0, hi * h / 128.0


# ---------------------------------------------------------------------------
# sampling clip specs

def _boxes_apart(a, b, margin: float) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return (abs(ax - bx) > (aw + bw) / 2 + margin) or (abs(ay - by) > (ah + bh) / 2 + margin)


def sample_clip_spec(seed: int, tags: Sequence[str] = ("easy",), distance: str | None = None,
                     n_frames: int = 8, h: int = 128, w: int = 256, m: int = 16,
                     max_lights: int = 3, clip_id: str = "") -> ClipSpec:
    """Draw a random clip consistent with ``tags`` and the distance bucket."""
    rng = SplitMix64(seed)
    tags = tuple(tags)
    if distance is None:
        distance = "50-100m" if "small" in tags else rng.choice(("<20m", "20-50m"))
    if "easy" in tags:
        distance = "<20m"
    lo, hi = height_range(distance, h)
    count = rng.randint(1, max(1, min(max_lights, m)))
    truncated = rng.randint(0, count - 1) if "truncation" in tags else -1
    lights: list[LightSpec] = []
    for i in range(count):
        for _attempt in range(200):
            height = rng.uniform(lo, hi)
            motion = 0.0 if "easy" in tags and rng.chance(0.3) else 1.0
            vx = rng.uniform(-1.0, 1.0) * motion * h / 128
            vy = rng.uniform(-0.4, 0.2) * motion * h / 128
            growth = rng.uniform(0.0, 0.02) * motion
            width = max(height * ASPECT, MIN_WIDTH)
            if i == truncated:
                # push 25-45% of the housing past the left or right edge
                frac = rng.uniform(0.25, 0.45)
                side = rng.choice((-1, 1))
                cx = -width / 2 + width * (1 - frac) if side < 0 else w + width / 2 - width * (1 - frac)
                vx = 0.0
                growth = 0.0
            else:
                cx = rng.uniform(0.08 * w, 0.92 * w)
            cy = rng.uniform(0.12 * h, 0.6 * h)
            cand = LightSpec(cx, cy, height, vx, vy, growth)
            if i != truncated and not _inside_all_frames(cand, n_frames, h, w):
                continue
            if all(_boxes_apart(cand.geometry(t), other.geometry(t), 2.0)
                   for other in lights for t in range(n_frames)):
                break
        else:
            continue
        state = rng.randint(0, len(STATES) - 1)
        switch_frame, switch_state = -1, state
        if n_frames > 1 and state != STATE_INDEX["off"] and rng.chance(0.2):
            switch_frame = rng.randint(1, n_frames - 1)
            switch_state = (state - 1) % 3   # green -> yellow -> red -> green
        lights.append(replace(cand, state=state, switch_frame=switch_frame,
                              switch_state=switch_state))
    occlusion = None
    # an occluded span needs at least one clean frame before it
    if "occlusion" in tags and lights and n_frames > 1:
        target = rng.randint(0, len(lights) - 1)
        length = rng.randint(1, 2)
        # most spans reach the current (last) frame so the final window tests recall
        end = n_frames - 1
        if not rng.chance(0.7) and length <= n_frames - 2:
            end = rng.randint(length, n_frames - 2)
        start = max(1, end - length + 1)
        occlusion = OcclusionSpec(target, start, end, pad_x=rng.uniform(0.3, 0.8),
                                  pad_y=rng.uniform(0.15, 0.4), drift=rng.uniform(-1, 1),
                                  shade=rng.randint(50, 140))
    return ClipSpec(seed=seed, n_frames=n_frames, h=h, w=w, lights=tuple(lights), tags=tags,
                    distance=distance, m=m, occlusion=occlusion, clip_id=clip_id)


def _inside_all_frames(light: LightSpec, n_frames: int, h: int, w: int) -> bool:
    for t in range(n_frames):
        cx, cy, bw, bh = light.geometry(t)
        if cx - bw / 2 < 1 or cx + bw / 2 > w - 1 or cy - bh / 2 < 1 or cy + bh / 2 > h - 1:
            return False
    return True


# ---------------------------------------------------------------------------
# rendering

_LIT = {0: (235, 45, 35), 1: (245, 190, 30), 2: (40, 225, 95)}
_DIM = (62, 62, 58)
_HOUSING = (28, 30, 32)


def _value_noise(rng: SplitMix64, h: int, w: int, cells: int) -> np.ndarray:
    gh, gw = cells + 1, cells * 2 + 1
    grid = np.array([[rng.uniform() for _ in range(gw)] for _ in range(gh)])
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.minimum(ys.astype(int), gh - 2)
    x0 = np.minimum(xs.astype(int), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def render_background(spec: ClipSpec) -> np.ndarray:
    """Sky band over a textured ground; float image in [0, 255], [h, w, 3]."""
    rng = SplitMix64(spec.seed ^ 0x5DEECE66D)
    h, w = spec.h, spec.w
    horizon = rng.uniform(0.45, 0.7)
    rows = (np.arange(h) + 0.5) / h
    sky = np.array([rng.uniform(150, 210), rng.uniform(170, 220), rng.uniform(190, 240)])
    ground = np.array([rng.uniform(60, 120), rng.uniform(60, 115), rng.uniform(55, 105)])
    mix = np.clip((rows - horizon) / 0.08 + 0.5, 0, 1)[:, None, None]
    img = (1 - mix) * sky + mix * ground
    img = np.broadcast_to(img, (h, w, 3)).copy()
    tint = np.array([rng.uniform(0.7, 1.3) for _ in range(3)])
    tex = (_value_noise(rng, h, w, 4) - 0.5) * 60 + (_value_noise(rng, h, w, 12) - 0.5) * 35
    img += tex[:, :, None] * tint[None, None, :]
    # a few poles and building blocks as clutter
    for _ in range(rng.randint(2, 5)):
        x0 = rng.uniform(0, w)
        bw = rng.uniform(2, 0.12 * w)
        top = rng.uniform(0.05 * h, horizon * h)
        shade = rng.uniform(40, 170)
        cols = (np.arange(w) + 0.5)
        mask = (np.abs(cols - x0) < bw / 2)[None, :] & ((np.arange(h) + 0.5) > top)[:, None]
        img[mask] = img[mask] * 0.3 + shade * 0.7
    return img


def _rect_mask(h, w, x0, y0, x1, y1):
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)


def _draw_light(img: np.ndarray, cx, cy, bw, bh, state: int) -> np.ndarray:
    h, w = img.shape[:2]
    x0, y0, x1, y1 = cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2
    mask = _rect_mask(h, w, x0, y0, x1, y1)
    # rounded corners: drop pixels outside the corner circles
    r = min(bw, bh) * 0.25
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    qx = np.clip(xs, x0 + r, x1 - r)
    qy = np.clip(ys, y0 + r, y1 - r)
    mask &= (xs - qx) ** 2 + (ys - qy) ** 2 <= r * r + 1e-9
    ix, iy = int(math.floor(cx)), int(math.floor(cy))
    if 0 <= ix < w and 0 <= iy < h:
        mask[iy, ix] = True  # tiny housings still cover their center pixel
    img[mask] = _HOUSING
    lamp_r = max(bw * 0.36, 0.6)
    for slot in range(3):
        ly = y0 + bh * (slot + 0.5) / 3
        disc = (xs - cx) ** 2 + (ys - ly) ** 2 <= lamp_r * lamp_r
        color = _LIT[slot] if state == slot else _DIM
        img[disc & mask] = color
    return mask


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy: dy + img.shape[0], dx: dx + img.shape[1]]
    return acc / 9.0


def render_frames(spec: ClipSpec, with_lights: bool = True, blur: bool = True) -> np.ndarray:
    """Float frames [T, h, w, 3] before quantization (exposed for self-checks)."""
    bg = render_background(spec)
    out = np.empty((spec.n_frames, spec.h, spec.w, 3))
    for t in range(spec.n_frames):
        img = bg.copy()
        if with_lights:
            for i, light in enumerate(spec.lights):
                cx, cy, bw, bh = light.geometry(t)
                _draw_light(img, cx, cy, bw, bh, light.state_at(t))
            occ = spec.occlusion
            if occ is not None and occ.start <= t <= occ.end:
                cx, cy, bw, bh = spec.lights[occ.light].geometry(t)
                ox = cx + occ.drift * (t - occ.start)
                hx = bw * (0.5 + occ.pad_x) + abs(occ.drift) * (t - occ.start)
                hy = bh * (0.5 + occ.pad_y)
                mask = _rect_mask(spec.h, spec.w, ox - hx, cy - hy, ox + hx, cy + hy)
                img[mask] = occ.shade
        if blur and "blur" in spec.tags:
            img = _box_blur(img)
        out[t] = img
    return out


def generate_clip(spec: ClipSpec) -> tuple[np.ndarray, Annotation]:
    """Render ``spec`` to uint8 frames [T, h, w, 3] and its annotation."""
    if len(spec.lights) > spec.m:
        raise ValueError(f"{len(spec.lights)} lights exceed the {spec.m} object queries")
    if spec.n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    frames = np.clip(np.rint(render_frames(spec)), 0, 255).astype(np.uint8)
    labels = []
    for t in range(spec.n_frames):
        row = []
        for i, light in enumerate(spec.lights):
            cx, cy, bw, bh = light.geometry(t)
            occ = spec.occlusion
            visible = not (occ is not None and occ.light == i and occ.start <= t <= occ.end)
            row.append(LightLabel(Box(cx, cy, bw, bh), light.state_at(t), visible))
        labels.append(row)
    ann = Annotation(spec.clip_id or f"clip_{spec.seed & 0xFFFFFFFF:08x}", labels, spec.fps,
                     len(STATES), tuple(spec.tags), spec.distance)
    return frames, ann


# ---------------------------------------------------------------------------
# PPM + manifest I/O

class ManifestError(ValueError):
    pass


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM writer expects uint8 [h, w, 3]")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: only 8-bit binary PPM (P6, maxval 255) is supported")
    w, h = int(fields[1]), int(fields[2])
    raster = data[pos: pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {w * h * 3}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def annotation_to_manifest(ann: Annotation, image_names: Sequence[str]) -> dict:
    frames = []
    for t, labels in enumerate(ann.frames):
        entry = {"image": image_names[t], "lights": [
            {"cx": lab.box.cx, "cy": lab.box.cy, "w": lab.box.w, "h": lab.box.h,
             "state": STATES[lab.state], "visible": lab.visible} for lab in labels]}
        if ann.poses is not None:
            entry["pose"] = {"t": list(ann.poses[t].t), "r": list(ann.poses[t].r)}
        frames.append(entry)
    out = {"clip_id": ann.clip_id, "fps": ann.fps, "num_states": ann.num_states,
           "frames": frames}
    if ann.map_light is not None:
        out["map_light"] = ann.map_light
    if ann.tags:
        out["tags"] = list(ann.tags)
    if ann.distance is not None:
        out["distance"] = ann.distance
    return out


def _need(obj, key, types, where):
    if not isinstance(obj, dict) or key not in obj:
        raise ManifestError(f"{where}: missing field {key!r}")
    val = obj[key]
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ManifestError(f"{where}.{key}: expected {types}, got bool")
    if not isinstance(val, types):
        raise ManifestError(f"{where}.{key}: expected {getattr(types, '__name__', types)}, "
                            f"got {type(val).__name__}")
    return val


def _num(obj, key, where):
    val = _need(obj, key, (int, float), where)
    if not math.isfinite(val):
        raise ManifestError(f"{where}.{key}: must be finite")
    return float(val)


def manifest_to_annotation(doc: dict) -> tuple[Annotation, list[str]]:
    where = "manifest"
    if not isinstance(doc, dict):
        raise ManifestError("manifest: top level must be an object")
    clip_id = _need(doc, "clip_id", str, where)
    fps = _num(doc, "fps", where)
    num_states = _need(doc, "num_states", int, where)
    frames_doc = _need(doc, "frames", list, where)
    labels, images, poses = [], [], []
    for t, fr in enumerate(frames_doc):
        fw = f"frames[{t}]"
        images.append(_need(fr, "image", str, fw))
        row = []
        for j, lt in enumerate(_need(fr, "lights", list, fw)):
            lw = f"{fw}.lights[{j}]"
            vals = {k: _num(lt, k, lw) for k in ("cx", "cy", "w", "h")}
            for k in ("w", "h"):
                if vals[k] <= 0:
                    raise ManifestError(f"{lw}.{k}: must be > 0, got {vals[k]}")
            state = _need(lt, "state", str, lw)
            if state not in STATE_INDEX:
                raise ManifestError(f"{lw}.state: unknown state {state!r}, expected one of {STATES}")
            visible = _need(lt, "visible", bool, lw)
            row.append(LightLabel(Box(vals["cx"], vals["cy"], vals["w"], vals["h"]),
                                  STATE_INDEX[state], visible))
        labels.append(row)
        if "pose" in fr:
            pose = _need(fr, "pose", dict, fw)
            tv = _need(pose, "t", list, fw + ".pose")
            rv = _need(pose, "r", list, fw + ".pose")
            if len(tv) != 3 or len(rv) != 9 or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in tv + rv):
                raise ManifestError(f"{fw}.pose: expected t[3] and r[9] numbers")
            poses.append(Pose(tuple(map(float, tv)), tuple(map(float, rv))))
    if poses and len(poses) != len(labels):
        raise ManifestError("manifest: pose must be given for every frame or none")
    map_light = None
    if "map_light" in doc:
        ml = _need(doc, "map_light", dict, where)
        xyz = _need(ml, "xyz", list, where + ".map_light")
        if len(xyz) != 3:
            raise ManifestError("manifest.map_light.xyz: expected 3 numbers")
        map_light = {"xyz": [float(v) for v in xyz], "lane": str(ml.get("lane", ""))}
    tags = tuple(doc.get("tags", ()))
    distance = doc.get("distance")
    ann = Annotation(clip_id, labels, fps, num_states, tags, distance,
                     poses or None, map_light)
    return ann, images


MANIFEST = "manifest.json"


def write_clip(directory, frames: np.ndarray, ann: Annotation) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = [f"frame_{t:03d}.ppm" for t in range(len(frames))]
    if len(ann.frames) != len(frames):
        raise ValueError(f"{len(frames)} frames but {len(ann.frames)} annotation entries")
    for name, img in zip(names, frames):
        write_ppm(d / name, img)
    (d / MANIFEST).write_text(json.dumps(annotation_to_manifest(ann, names), indent=1))
    return d


def load_manifest(directory) -> tuple[Annotation, list[str]]:
    path = Path(directory) / MANIFEST
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return manifest_to_annotation(doc)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def load_clip(directory) -> tuple[np.ndarray, Annotation]:
    d = Path(directory)
    ann, images = load_manifest(d)
    frames = []
    for name in images:
        p = d / name
        if not p.is_file():
            raise ManifestError(f"{d / MANIFEST}: frame file {name!r} is missing")
        frames.append(read_ppm(p))
    arr = np.stack(frames) if frames else np.zeros((0, 0, 0, 3), np.uint8)
    return arr, ann


# ---------------------------------------------------------------------------
# datasets

PROFILES = ("easy", "mixed", "scenario-sweep")
INDEX = "index.json"


def split_counts(count: int) -> tuple[int, int, int]:
    valid = count * 10 // 100
    test = count * 20 // 100
    return count - valid - test, valid, test


def _profile_tags(profile: str, i: int, rng: SplitMix64) -> tuple[str, ...]:
    if profile == "easy":
        return ("easy",)
    if profile == "scenario-sweep":
        return (SWEEP_TAGS[i % len(SWEEP_TAGS)],)
    r = rng.uniform()
    if r < 0.4:
        return ("easy",)
    if r < 0.7:
        return ("occlusion",)
    if r < 0.8:
        return ("blur",)
    if r < 0.9:
        return ("truncation",)
    return ("small",)


def generate_dataset(out_dir, profile: str = "easy", count: int = 100, seed: int = 0,
                     n_frames: int = 8, h: int = 128, w: int = 256, m: int = 16,
                     max_lights: int = 3) -> Path:
    """Write ``count`` clips split 70/10/20 into train/valid/test plus ``index.json``.

    Splits take consecutive clips in generation order; for the scenario
    sweep that order cycles through the tags, so each split is tag-balanced.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}, expected one of {PROFILES}")
    if count < 10:
        raise ValueError("count must be >= 10")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from None
    rng = SplitMix64(seed)
    n_train, n_valid, _ = split_counts(count)
    index: dict[str, list[str]] = {"train": [], "valid": [], "test": []}
    for i in range(count):
        clip_seed = rng.next_u64()
        tags = _profile_tags(profile, i, SplitMix64(clip_seed ^ 0xA5A5))
        distance = None
        if profile == "scenario-sweep" and "small" not in tags:
            distance = ("<20m", "20-50m")[(i // len(SWEEP_TAGS)) % 2]
        split = "train" if i < n_train else ("valid" if i < n_train + n_valid else "test")
        rel = f"{split}/clip_{i:05d}"
        spec = sample_clip_spec(clip_seed, tags, distance, n_frames, h, w, m, max_lights,
                                clip_id=f"clip_{i:05d}")
        frames, ann = generate_clip(spec)
        write_clip(root / rel, frames, ann)
        index[split].append(rel)
    (root / INDEX).write_text(json.dumps(index, indent=1))
    return root


def load_index(root) -> dict[str, list[str]]:
    path = Path(root) / INDEX
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
        raise ManifestError(f"{path}: index must map split names to lists of clip directories")
    return doc


def resolve_clips(path) -> list[Path]:
    """Clip directories under ``path``: a dataset root (all splits), a split
    directory, or a single clip directory."""
    p = Path(path)
    if (p / MANIFEST).is_file():
        return [p]
    if (p / INDEX).is_file():
        idx = load_index(p)
        return [p / rel for split in ("train", "valid", "test") for rel in idx.get(split, [])]
    if (p.parent / INDEX).is_file():
        idx = load_index(p.parent)
        if p.name in idx:
            return [p.parent / rel for rel in idx[p.name]]
    clips = sorted(d for d in p.iterdir() if (d / MANIFEST).is_file()) if p.is_dir() else []
    if not clips:
        raise FileNotFoundError(f"no clips found under {p}")
    return clips


__all__ = [
    "STATES", "STATE_INDEX", "TAGS", "DISTANCES", "SplitMix64", "LightSpec", "OcclusionSpec",
    "ClipSpec", "LightLabel", "Pose", "Annotation", "sample_clip_spec", "generate_clip",
    "render_background", "render_frames", "write_clip", "load_clip", "load_manifest",
    "generate_dataset", "load_index", "resolve_clips", "ManifestError", "split_counts",
    "height_range", "read_ppm", "write_ppm",
]
