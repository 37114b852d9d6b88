"""HD-map ego-lane light selection.

The map position of the ego-lane light is projected into the current frame
with a pinhole camera; the detection whose box center is closest to that
point, within a pixel radius, gives the frame's ego-lane state.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .metrics import Detection, decode
from .model import ViTLRModel, model_forward
from .synth import STATES, Annotation, ClipSpec, LightSpec, Pose, SplitMix64, generate_clip

log = logging.getLogger(__name__)

Z_MIN = 0.1
DEFAULT_RADIUS = 50.0
NONE = "none"


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the "
                             f"{self.width}x{self.height} image")

    def contains(self, u: float, v: float) -> bool:
        return 0 <= u <= self.width and 0 <= v <= self.height

    @classmethod
    def for_image(cls, width: int, height: int, focal: float | None = None) -> "CameraModel":
        f = focal if focal is not None else 0.8 * width
        return cls(f, f, width / 2, height / 2, width, height)


@dataclass(frozen=True)
class EgoPose:
    position: tuple[float, float, float]
    rotation: tuple[tuple[float, float, float], ...]   # world -> camera, row-major 3x3

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or len(self.position) != 3:
            raise ValueError("pose needs a 3-vector position and a 3x3 rotation")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.position)):
            raise ValueError("pose must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation is a reflection (det != +1)")

    @classmethod
    def from_pose(cls, pose: Pose) -> "EgoPose":
        r = tuple(tuple(float(v) for v in pose.r[i * 3: i * 3 + 3]) for i in range(3))
        return cls(tuple(float(v) for v in pose.t), r)

    def to_pose(self) -> Pose:
        return Pose(tuple(self.position), tuple(float(v) for row in self.rotation for v in row))


@dataclass(frozen=True)
class MapLight:
    xyz: tuple[float, float, float]
    lane: str = ""

    def __post_init__(self):
        if len(self.xyz) != 3 or not all(math.isfinite(v) for v in self.xyz):
            raise ValueError("map light position must be 3 finite numbers")

    @classmethod
    def from_manifest(cls, doc: dict) -> "MapLight":
        return cls(tuple(float(v) for v in doc["xyz"]), str(doc.get("lane", "")))

    def to_manifest(self) -> dict:
        return {"xyz": list(self.xyz), "lane": self.lane}


def yaw_pitch_rotation(yaw: float, pitch: float = 0.0) -> tuple[tuple[float, ...], ...]:
    """World->camera rotation for a camera yawed (about y) then pitched (about x)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    ry = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, sp], [0, -sp, cp]])
    return tuple(tuple(float(v) for v in row) for row in rx @ ry)


def project(p_world, pose: EgoPose, cam: CameraModel) -> tuple[float, float] | None:
    """Pixel (u, v) of a world point, or ``None`` when it lies behind the camera."""
    r = np.asarray(pose.rotation, dtype=np.float64)
    x, y, z = r @ (np.asarray(p_world, dtype=np.float64) - np.asarray(pose.position))
    if z <= Z_MIN:
        return None
    return float(cam.fx * x / z + cam.cx), float(cam.fy * y / z + cam.cy)


def select_ego_light(dets: Sequence[Detection], projected: tuple[float, float] | None,
                     radius: float = DEFAULT_RADIUS) -> Detection | None:
    """Nearest detection center within ``radius``; ties go to the higher
    confidence, then the lower query index."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if projected is None:
        return None
    u, v = projected
    best, best_key = None, None
    for d in dets:
        dist = math.hypot(d.box.cx - u, d.box.cy - v)
        if dist > radius:
            continue
        key = (dist, -d.confidence, d.query)
        if best_key is None or key < best_key:
            best, best_key = d, key
    return best


# ---------------------------------------------------------------------------
# pipeline

class Detector(Protocol):
    n: int

    def detect(self, frames: np.ndarray, t: int) -> list[Detection]:
        """Detections for frame ``t`` given frames ``t-n+1..t``."""


class ModelDetector:
    def __init__(self, model: ViTLRModel):
        self.model = model.eval()
        self.n = model.cfg.n

    def detect(self, frames, t):
        from .train import clip_window

        pred = model_forward(self.model, clip_window(frames, t, self.n))
        return decode(pred, 0, t)


class OracleDetector:
    """Returns the annotation's boxes as confidence-1 detections."""

    def __init__(self, ann: Annotation, n: int = 1, visible_only: bool = False):
        self.ann = ann
        self.n = n
        self.visible_only = visible_only

    def detect(self, frames, t):
        return [Detection(lab.box, lab.state, 1.0, t, q)
                for q, lab in enumerate(self.ann.frames[t])
                if lab.visible or not self.visible_only]


@dataclass(frozen=True)
class EgoRecord:
    frame: int
    state: str                  # a state name or "none"
    distance_px: float | None

    def to_json(self) -> dict:
        return {"frame": self.frame, "state": self.state, "distance_px": self.distance_px}


def egolane_pipeline(detector: Detector | ViTLRModel, frames: np.ndarray,
                     poses: Sequence[EgoPose | Pose], map_light: MapLight, cam: CameraModel,
                     radius: float = DEFAULT_RADIUS) -> list[EgoRecord]:
    """One record per frame that has a full window of ``n`` frames behind it."""
    if isinstance(detector, ViTLRModel):
        detector = ModelDetector(detector)
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if len(poses) != len(frames):
        raise ValueError(f"got {len(poses)} poses for {len(frames)} frames")
    n = detector.n
    if len(frames) < n:
        raise ValueError(f"clip has {len(frames)} frames, the detector needs {n}")
    poses = [p if isinstance(p, EgoPose) else EgoPose.from_pose(p) for p in poses]
    out = []
    for t in range(n - 1, len(frames)):
        uv = project(map_light.xyz, poses[t], cam)
        if uv is not None and not cam.contains(*uv):
            log.info("frame %d: map light projects off-image at (%.1f, %.1f)", t, *uv)
            uv = None
        chosen = select_ego_light(detector.detect(frames, t), uv, radius)
        if chosen is None:
            out.append(EgoRecord(t, NONE, None))
        else:
            dist = math.hypot(chosen.box.cx - uv[0], chosen.box.cy - uv[1])
            out.append(EgoRecord(t, STATES[chosen.state], dist))
    return out


# ---------------------------------------------------------------------------
# synthetic approach clips

LIGHT_HEIGHT_M = 1.0


def egolane_clip(seed: int, n_frames: int = 8, h: int = 128, w: int = 256,
                 distractor: bool | None = None) -> tuple[np.ndarray, Annotation, CameraModel]:
    """A vehicle driving toward its lane's light.

    The light track is the projection of the map light under each frame's
    pose, so the map light lands exactly on the rendered housing center. An
    optional distractor light sits in the neighbouring lane.
    """
    rng = SplitMix64(seed)
    cam = CameraModel.for_image(w, h)
    yaw = rng.uniform(-0.05, 0.05)
    rot = yaw_pitch_rotation(yaw)
    start = rng.uniform(-5.0, 0.0)
    speed = rng.uniform(1.0, 2.5)           # m / frame
    near = 30.0 + speed * n_frames
    light_xyz = (rng.uniform(-1.0, 1.0) + math.tan(yaw) * near, -rng.uniform(4.0, 5.5), near)
    ego = MapLight(light_xyz, "ego")
    other = None
    if distractor if distractor is not None else rng.chance(0.5):
        other = (light_xyz[0] + rng.choice((-3.5, 3.5)), light_xyz[1], light_xyz[2])
    poses = [EgoPose((0.0, 0.0, start + speed * t), rot) for t in range(n_frames)]

    def track(p):
        pts = []
        for pose in poses:
            uv = project(p, pose, cam)
            z = (np.asarray(rot) @ (np.asarray(p) - np.asarray(pose.position)))[2]
            pts.append((uv[0], uv[1], cam.fy * LIGHT_HEIGHT_M / z))
        return tuple(pts)

    state = rng.randint(0, 2)
    switch = rng.randint(1, n_frames - 1) if rng.chance(0.5) else -1
    lights = [LightSpec(0, 0, 0, state=state, switch_frame=switch,
                        switch_state=(state + 1) % 3, track=track(light_xyz))]
    if other is not None:
        lights.append(LightSpec(0, 0, 0, state=rng.randint(0, 2), track=track(other)))
    spec = ClipSpec(seed=seed, n_frames=n_frames, h=h, w=w, lights=tuple(lights),
                    tags=("easy",), distance="20-50m", clip_id=f"ego_{seed:08x}")
    frames, ann = generate_clip(spec)
    ann.poses = [p.to_pose() for p in poses]
    ann.map_light = ego.to_manifest()
    return frames, ann, cam


def state_schedule(ann: Annotation, light: int = 0) -> list[str]:
    return [STATES[row[light].state] for row in ann.frames]


def records_to_jsonl(records: Iterable[EgoRecord]) -> str:
    import json

    return "".join(json.dumps(r.to_json()) + "\n" for r in records)


__all__ = ["CameraModel", "EgoPose", "MapLight", "project", "select_ego_light",
           "egolane_pipeline", "OracleDetector", "ModelDetector", "EgoRecord", "egolane_clip",
           "state_schedule", "yaw_pitch_rotation", "records_to_jsonl", "Z_MIN", "DEFAULT_RADIUS"]
