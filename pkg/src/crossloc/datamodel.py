"""Poses, media containers, runs and regions, plus their on-disk formats."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PCL_MAGIC = b"PCL1"
WORKING_SIZE = (320, 240)
SAME_PLACE_M = 20.0


class DataError(Exception):
    """Malformed or missing data on disk or in memory."""


class EmptySubmapError(DataError):
    pass


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    timestamp: int = 0

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")
        for name in ("yaw", "pitch", "roll"):
            object.__setattr__(self, name, wrap_angle(float(getattr(self, name))))

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.yaw, self.pitch, self.roll])


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray  # (height, width, 3) in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"image pixels must be HxWx3, got {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise DataError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) meters

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise DataError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: int
    run_id: str
    pose: Pose
    image: Image | None = None
    submap: PointCloud | None = None
    image_path: str | None = None
    submap_path: str | None = None
    place: int | None = None  # ground-truth label, only known for synthetic data


@dataclass(frozen=True, eq=False)
class Run:
    run_id: str
    samples: tuple
    condition: str = ""

    def __post_init__(self):
        samples = tuple(self.samples)
        ts = [s.pose.timestamp for s in samples]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise DataError(f"run {self.run_id}: samples not ordered by timestamp")
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            raise DataError(f"run {self.run_id}: duplicate sample ids")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    def poses(self):
        return [s.pose for s in self.samples]


@dataclass(frozen=True)
class Region:
    region_id: str
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    split: str = "validation"

    def contains(self, x, y):
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


# -- place logic -------------------------------------------------------------


def place_distance(a: Pose, b: Pose) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def is_same_place(a: Pose, b: Pose, threshold: float = SAME_PLACE_M) -> bool:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return place_distance(a, b) < threshold


def spacing_indices(poses, spacing: float) -> list:
    """Greedy scan keeping poses at least ``spacing`` meters from the last kept one."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    kept = []
    for i, p in enumerate(poses):
        if not kept or place_distance(p, poses[kept[-1]]) >= spacing:
            kept.append(i)
    return kept


def subsample_run(run: Run, spacing: float) -> Run:
    if not run.samples:
        raise DataError(f"run {run.run_id} is empty")
    keep = spacing_indices(run.poses(), spacing)
    return replace(run, samples=tuple(run.samples[i] for i in keep))


def filter_by_regions(run: Run, regions, split: str) -> list:
    if not regions:
        raise ValueError("regions must be non-empty")
    boxes = [r for r in regions if r.split == split]
    return [s for s in run.samples if any(r.contains(s.pose.x, s.pose.y) for r in boxes)]


# -- sub-map extraction ------------------------------------------------------


def fit_ground_plane(points, iterations=100, threshold=0.3, min_vertical=0.9, rng=None):
    """RANSAC plane fit restricted to near-horizontal planes.

    Returns a boolean inlier mask of the best accepted plane, or None when no
    sampled plane has ``|normal . z| > min_vertical``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(points)
    if n < 3:
        return None
    best, best_count = None, 0
    for _ in range(iterations):
        p0, p1, p2 = points[rng.choice(n, 3, replace=False)]
        normal = np.cross(p1 - p0, p2 - p0)
        length = np.linalg.norm(normal)
        if length < 1e-12:
            continue
        normal /= length
        if abs(normal[2]) <= min_vertical:
            continue
        inliers = np.abs((points - p0) @ normal) < threshold
        count = int(inliers.sum())
        if count > best_count:
            best, best_count = inliers, count
    return best


def extract_submap(cloud: PointCloud, center: Pose, half_extent: float = 25.0,
                   remove_ground: bool = True, rng=None) -> PointCloud:
    """Crop a yaw-aligned box around ``center`` and express it in the pose frame."""
    if len(cloud) == 0:
        raise DataError("map is empty")
    c, s = math.cos(center.yaw), math.sin(center.yaw)
    d = cloud.points - np.array([center.x, center.y, center.z])
    local = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]])
    local = local[np.all(np.abs(local) <= half_extent, axis=1)]
    if remove_ground and len(local):
        ground = fit_ground_plane(local, rng=rng)
        if ground is not None:
            local = local[~ground]
    if len(local) == 0:
        raise EmptySubmapError(f"no points within {half_extent} m of ({center.x}, {center.y})")
    return PointCloud(local)


# -- file formats ------------------------------------------------------------


def write_pcl(path, cloud: PointCloud):
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PCL_MAGIC)
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.tobytes())


def read_pcl(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != PCL_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {PCL_MAGIC!r}")
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + 12 * count:
        raise DataError(f"{path}: expected {count} points, file size {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f4", offset=8).reshape(count, 3)
    return PointCloud(pts.astype(np.float64))


def write_image(path, image: Image):
    from PIL import Image as PILImage

    arr = np.round(image.pixels * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, "RGB").save(path, format="PNG")


def read_image(path) -> Image:
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return Image(arr)


def write_manifest(path, run: Run, media_dir=None):
    """Write a run manifest; media are written next to it when present in memory."""
    path = Path(path)
    media_dir = Path(media_dir) if media_dir else path.parent / run.run_id
    records = []
    for s in run.samples:
        img_path, pcl_path = s.image_path, s.submap_path
        if s.image is not None:
            media_dir.mkdir(parents=True, exist_ok=True)
            img_path = str((media_dir / f"{s.sample_id}.png").relative_to(path.parent))
            write_image(path.parent / img_path, s.image)
        if s.submap is not None:
            media_dir.mkdir(parents=True, exist_ok=True)
            pcl_path = str((media_dir / f"{s.sample_id}.pcl").relative_to(path.parent))
            write_pcl(path.parent / pcl_path, s.submap)
        p = s.pose
        rec = {"sample_id": s.sample_id, "timestamp": p.timestamp, "x": p.x, "y": p.y, "z": p.z,
               "yaw": p.yaw, "pitch": p.pitch, "roll": p.roll,
               "image": img_path, "submap": pcl_path}
        if s.place is not None:
            rec["place"] = s.place
        records.append(rec)
    doc = {"run_id": run.run_id, "condition": run.condition, "samples": records}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path, load_media: bool = True) -> Run:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    samples = []
    try:
        for rec in doc["samples"]:
            pose = Pose(rec["x"], rec["y"], rec["z"], rec["yaw"], rec["pitch"], rec["roll"],
                        int(rec["timestamp"]))
            img_rel, pcl_rel = rec.get("image"), rec.get("submap")
            image = submap = None
            if load_media:
                image = read_image(path.parent / img_rel) if img_rel else None
                submap = read_pcl(path.parent / pcl_rel) if pcl_rel else None
            samples.append(Sample(int(rec["sample_id"]), doc["run_id"], pose, image, submap,
                                  img_rel, pcl_rel, rec.get("place")))
        return Run(doc["run_id"], tuple(samples), doc.get("condition", ""))
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from exc


def read_regions(path) -> list:
    try:
        doc = json.loads(Path(path).read_text())
        return [Region(str(r["region_id"]), float(r["x_min"]), float(r["x_max"]),
                       float(r["y_min"]), float(r["y_max"]), r.get("split", "validation"))
                for r in doc["regions"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: cannot read regions ({exc})") from exc


def write_regions(path, regions):
    doc = {"regions": [r.__dict__ for r in regions]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def list_manifests(runs_dir) -> list:
    return sorted(Path(runs_dir).glob("*.manifest.json"), key=lambda p: p.name)


@dataclass
class Dataset:
    """Samples grouped by place, the unit the batch builder draws from."""

    places: dict = field(default_factory=dict)  # place key -> list of Sample

    @classmethod
    def from_runs(cls, runs, threshold: float = SAME_PLACE_M):
        """Group samples by ground-truth label, or by the 20 m rule when unlabeled."""
        places: dict = {}
        anchors: list = []
        for run in runs:
            for s in run.samples:
                if s.place is not None:
                    places.setdefault(s.place, []).append(s)
                    continue
                for key, pose in anchors:
                    if is_same_place(s.pose, pose, threshold):
                        places[key].append(s)
                        break
                else:
                    key = f"p{len(anchors)}"
                    anchors.append((key, s.pose))
                    places[key] = [s]
        return cls(places)

    def usable_places(self, min_samples: int = 2):
        return [k for k in sorted(self.places, key=str) if len(self.places[k]) >= min_samples]
