"""Synthetic LiDAR scenes, training-time augmentations and scene file I/O.

Conventions used throughout the package:

* points are ``float32`` rows ``(x, y, z, intensity)``;
* an X-flip mirrors across the X axis (``y -> -y``, ``yaw -> -yaw``);
* a Y-flip mirrors across the Y axis (``x -> -x``, ``yaw -> pi - yaw``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box3D, ObjectClass, bev_intersection_area, points_in_box, wrap_angle
from .errors import PlacementError, SceneFormatError

POINT_MAGIC = b"CATP"
POINT_VERSION = 1

# (length, width, height) in metres
CLASS_SIZES = {
    ObjectClass.VEHICLE: (4.5, 2.0, 1.6),
    ObjectClass.PEDESTRIAN: (0.8, 0.8, 1.75),
    ObjectClass.CYCLIST: (1.8, 0.8, 1.7),
}

GROUND_Z = -1.0


@dataclass(frozen=True, eq=False)
class Scene:
    points: np.ndarray
    boxes: Tuple[Box3D, ...] = ()
    seed: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float32, copy=True).reshape(-1, 4)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def same_as(self, other: "Scene") -> bool:
        """Bit-exact equality of points, boxes and seed."""
        return (self.seed == other.seed and self.boxes == other.boxes
                and self.points.shape == other.points.shape
                and self.points.tobytes() == other.points.tobytes())


@dataclass(frozen=True)
class SceneConfig:
    num_objects: Tuple[int, int, int] = (4, 4, 3)  # vehicles, pedestrians, cyclists
    points_per_object: int = 150
    background_points: int = 2000
    x_range: Tuple[float, float] = (-25.6, 25.6)
    y_range: Tuple[float, float] = (-25.6, 25.6)
    noise: float = 0.02
    size_jitter: float = 0.1
    max_retries: int = 500
    seed: int = 0


def _sample_box(rng, cls: ObjectClass, cfg: SceneConfig) -> Box3D:
    base = CLASS_SIZES[cls]
    l, w, h = (s * (1.0 + cfg.size_jitter * rng.uniform(-1, 1)) for s in base)
    margin = 0.5 * math.hypot(l, w) + 0.5
    cx = rng.uniform(cfg.x_range[0] + margin, cfg.x_range[1] - margin)
    cy = rng.uniform(cfg.y_range[0] + margin, cfg.y_range[1] - margin)
    yaw = rng.uniform(-math.pi, math.pi)
    return Box3D(cx, cy, GROUND_Z + h / 2.0, l, w, h, yaw, int(cls), 1.0)


def _overlaps(box: Box3D, others: Sequence[Box3D]) -> bool:
    return any(bev_intersection_area(box, o) > 0.0 for o in others)


def sample_surface_points(rng, box: Box3D, n: int, noise: float) -> np.ndarray:
    """``n`` points on the four side faces and the top face, jittered by ``noise``."""
    if n == 0:
        return np.zeros((0, 4), np.float32)
    l, w, h = box.l, box.w, box.h
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    # faces: +x, -x, +y, -y, top
    local[:, 0] = np.select([face == 0, face == 1], [l / 2, -l / 2], u * l)
    local[:, 1] = np.select([face == 2, face == 3], [w / 2, -w / 2],
                            np.where(face < 2, u * w, v * w))
    local[:, 2] = np.where(face == 4, h / 2, v * h)
    local += rng.uniform(-noise, noise, size=local.shape)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = np.empty((n, 4))
    out[:, 0] = box.cx + c * local[:, 0] - s * local[:, 1]
    out[:, 1] = box.cy + s * local[:, 0] + c * local[:, 1]
    out[:, 2] = box.cz + local[:, 2]
    out[:, 3] = rng.uniform(0.0, 1.0, size=n)
    return out.astype(np.float32)


def generate_scene(cfg: SceneConfig) -> Scene:
    """Place non-overlapping boxes, sample their surfaces, add ground clutter.

    Object points come first, ``points_per_object`` per box in box order,
    followed by the background points.
    """
    rng = np.random.default_rng(cfg.seed)
    boxes: List[Box3D] = []
    requested = sum(cfg.num_objects)
    for cls, count in zip(ObjectClass, cfg.num_objects):
        for _ in range(count):
            for _attempt in range(cfg.max_retries):
                box = _sample_box(rng, cls, cfg)
                if not _overlaps(box, boxes):
                    boxes.append(box)
                    break
            else:
                raise PlacementError(len(boxes), requested)
    chunks = [sample_surface_points(rng, b, cfg.points_per_object, cfg.noise) for b in boxes]
    n_bg = cfg.background_points
    if n_bg:
        bg = np.empty((n_bg, 4))
        bg[:, 0] = rng.uniform(cfg.x_range[0], cfg.x_range[1], n_bg)
        bg[:, 1] = rng.uniform(cfg.y_range[0], cfg.y_range[1], n_bg)
        bg[:, 2] = GROUND_Z - 0.15 + rng.uniform(-cfg.noise, cfg.noise, n_bg)
        bg[:, 3] = rng.uniform(0.0, 1.0, n_bg)
        chunks.append(bg.astype(np.float32))
    points = np.concatenate(chunks) if chunks else np.zeros((0, 4), np.float32)
    return Scene(points, tuple(boxes), cfg.seed)


# ---------------------------------------------------------------------------
# Augmentations
# ---------------------------------------------------------------------------


def augment_flip(scene: Scene, axis: str) -> Scene:
    axis = axis.upper()
    pts = scene.points.copy()
    if axis == "X":
        pts[:, 1] = -pts[:, 1]
        boxes = [replace(b, cy=-b.cy, yaw=wrap_angle(-b.yaw)) for b in scene.boxes]
    elif axis == "Y":
        pts[:, 0] = -pts[:, 0]
        boxes = [replace(b, cx=-b.cx, yaw=wrap_angle(math.pi - b.yaw)) for b in scene.boxes]
    else:
        raise ValueError(f"flip axis must be 'X' or 'Y', got {axis!r}")
    return Scene(pts, tuple(boxes), scene.seed)


def augment_scale(scene: Scene, factor: float) -> Scene:
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    pts = scene.points.astype(np.float64)
    pts[:, :3] *= factor
    boxes = [replace(b, cx=b.cx * factor, cy=b.cy * factor, cz=b.cz * factor,
                     l=b.l * factor, w=b.w * factor, h=b.h * factor) for b in scene.boxes]
    return Scene(pts.astype(np.float32), tuple(boxes), scene.seed)


def _rotate_xy(x, y, angle):
    c, s = math.cos(angle), math.sin(angle)
    return c * x - s * y, s * x + c * y


def augment_rotate(scene: Scene, angle: float) -> Scene:
    """Rotate the whole scene counter-clockwise about the origin."""
    if angle == 0:
        return Scene(scene.points, scene.boxes, scene.seed)
    pts = scene.points.astype(np.float64)
    pts[:, 0], pts[:, 1] = _rotate_xy(pts[:, 0], pts[:, 1], angle)
    boxes = []
    for b in scene.boxes:
        cx, cy = _rotate_xy(b.cx, b.cy, angle)
        boxes.append(replace(b, cx=cx, cy=cy, yaw=wrap_angle(b.yaw + angle)))
    return Scene(pts.astype(np.float32), tuple(boxes), scene.seed)


def random_augment(scene: Scene, rng: np.random.Generator) -> Scene:
    """Training-style augmentation: random flips, scale in [0.95, 1.05], rotation in [-pi/4, pi/4]."""
    if rng.random() < 0.5:
        scene = augment_flip(scene, "X")
    if rng.random() < 0.5:
        scene = augment_flip(scene, "Y")
    scene = augment_scale(scene, rng.uniform(0.95, 1.05))
    return augment_rotate(scene, rng.uniform(-math.pi / 4, math.pi / 4))


@dataclass(frozen=True)
class PasteResult:
    scene: Scene
    pasted: bool
    attempts: int
    box: Optional[Box3D] = None


def gt_sample_paste(target: Scene, source: Scene, box_index: int, max_attempts: int = 10,
                    xy_range: Tuple[float, float] = (-25.6, 25.6), seed: int = 0,
                    margin: float = 0.05) -> PasteResult:
    """Copy a source box and its interior points into ``target`` without collisions.

    The first attempt keeps the original pose; later attempts draw a random
    centre and heading. A failed paste returns ``target`` untouched with
    ``pasted=False``.
    """
    if not 0 <= box_index < len(source.boxes):
        raise IndexError(f"box_index {box_index} out of range for {len(source.boxes)} boxes")
    box = source.boxes[box_index]
    idx = points_in_box(source.points, box, margin)
    local = source.points[idx].astype(np.float64)
    local[:, 0] -= box.cx
    local[:, 1] -= box.cy
    rng = np.random.default_rng(seed)
    lo, hi = xy_range
    reach = 0.5 * box.diagonal
    for attempt in range(max_attempts):
        if attempt == 0:
            cand = box
        else:
            cand = replace(box, cx=rng.uniform(lo + reach, hi - reach),
                           cy=rng.uniform(lo + reach, hi - reach),
                           yaw=rng.uniform(-math.pi, math.pi))
        inside_range = (lo + reach <= cand.cx <= hi - reach) and (lo + reach <= cand.cy <= hi - reach)
        if inside_range and not _overlaps(cand, target.boxes):
            pts = local.copy()
            pts[:, 0], pts[:, 1] = _rotate_xy(pts[:, 0], pts[:, 1], cand.yaw - box.yaw)
            pts[:, 0] += cand.cx
            pts[:, 1] += cand.cy
            merged = np.concatenate([target.points, pts.astype(np.float32)])
            return PasteResult(Scene(merged, target.boxes + (cand,), target.seed), True,
                               attempt + 1, cand)
    return PasteResult(target, False, max_attempts, None)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def write_points(path, points) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 4)
    with open(path, "wb") as f:
        f.write(POINT_MAGIC)
        f.write(struct.pack("<IQ", POINT_VERSION, pts.shape[0]))
        f.write(pts.tobytes())


def read_points(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != POINT_MAGIC:
        raise SceneFormatError(f"{path}: not a CATP point file")
    version, count = struct.unpack_from("<IQ", blob, 4)
    if version != POINT_VERSION:
        raise SceneFormatError(f"{path}: unsupported point file version {version}")
    expected = 16 + 16 * count
    if len(blob) != expected:
        raise SceneFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(count, 4).astype(np.float32)


def format_box(box: Box3D) -> str:
    vals = (box.cx, box.cy, box.cz, box.l, box.w, box.h, box.yaw)
    return ",".join(repr(float(v)) for v in vals) + f",{box.class_id},{float(box.score)!r}"


def parse_box(line: str) -> Box3D:
    parts = line.strip().split(",")
    if len(parts) != 9:
        raise SceneFormatError(f"label line needs 9 fields, got {len(parts)}: {line!r}")
    try:
        cx, cy, cz, l, w, h, yaw = (float(p) for p in parts[:7])
        return Box3D(cx, cy, cz, l, w, h, yaw, int(parts[7]), float(parts[8]))
    except ValueError as exc:
        raise SceneFormatError(f"bad label line {line!r}: {exc}") from exc


def write_labels(path, boxes: Sequence[Box3D]) -> None:
    Path(path).write_text("".join(format_box(b) + "\n" for b in boxes))


def read_labels(path) -> List[Box3D]:
    return [parse_box(line) for line in Path(path).read_text().splitlines()
            if line.strip() and not line.startswith("#")]


@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    cloud: Path
    labels: Path
    seed: int


MANIFEST_HEADER = "# centeratt scene manifest v1: cloud,labels,seed"


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    base = Path(path).parent
    lines = [MANIFEST_HEADER]
    for e in entries:
        cloud = Path(_relative(Path(e.cloud), base))
        labels = Path(_relative(Path(e.labels), base))
        lines.append(f"{cloud.as_posix()},{labels.as_posix()},{e.seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def _relative(p: Path, base: Path) -> str:
    try:
        return str(p.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def read_manifest(path) -> List[ManifestEntry]:
    base = Path(path).parent
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise SceneFormatError(f"{path}:{n}: expected cloud,labels,seed")
        cloud, labels = base / parts[0], base / parts[1]
        entries.append(ManifestEntry(Path(parts[0]).stem, cloud, labels, int(parts[2])))
    return entries


def write_scene(directory, scene_id: str, scene: Scene) -> ManifestEntry:
    directory = Path(directory)
    cloud = directory / f"{scene_id}.catp"
    labels = directory / f"{scene_id}.txt"
    write_points(cloud, scene.points)
    write_labels(labels, scene.boxes)
    return ManifestEntry(scene_id, cloud, labels, scene.seed)


def load_scene(entry: ManifestEntry) -> Scene:
    return Scene(read_points(entry.cloud), tuple(read_labels(entry.labels)), entry.seed)
