"""Seeded synthetic worlds of paired image / point-cloud observations.

Each place owns an 8-d latent vector. Its image is a procedural texture
whose sinusoid parameters are affine in the latent; its point cloud is a
set of Gaussian blobs around landmarks placed by a probit map of the same
latent. Places sit on a closed loop with 30 m spacing so the 20 m same-place rule never
aliases two places.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .datamodel import Image, PointCloud, Pose, Region, Run, Sample, write_manifest, write_regions

LATENT_DIM = 8
PLACE_SPACING = 30.0
IMAGE_SHAPE = (48, 64)
N_SINUSOIDS = 4
N_LANDMARKS = 12
CLOUD_POINTS = 256
DEFAULT_CONDITIONS = (("overcast", 1.0), ("night", 1.5), ("snow", 1.25), ("dawn", 1.25))


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    seed: int
    latents: np.ndarray  # (P, 8)
    positions: np.ndarray  # (P, 2)
    headings: np.ndarray  # (P,)
    texture: dict  # affine maps latent -> sinusoid parameters
    landmark_map: np.ndarray  # (36, 8) unit rows, latent -> landmark coordinates
    pixel_sigma: float = 0.02
    cloud_sigma: float = 0.5
    pose_sigma: float = 1.0
    yaw_sigma: float = 0.02

    @property
    def n_places(self):
        return len(self.latents)

    def place_pose(self, p, timestamp=0):
        return Pose(self.positions[p, 0], self.positions[p, 1], 0.0, self.headings[p],
                    timestamp=timestamp)


def generate_world(seed: int, n_places: int) -> SyntheticWorld:
    if n_places < 8:
        raise ValueError(f"a synthetic world needs at least 8 places, got {n_places}")
    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((n_places, LATENT_DIM))
    radius = PLACE_SPACING * n_places / (2 * math.pi)
    theta = 2 * math.pi * np.arange(n_places) / n_places
    positions = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    headings = np.array([math.atan2(math.cos(t), -math.sin(t)) for t in theta])
    shape = (3, N_SINUSOIDS, LATENT_DIM)
    scale = 1.0 / math.sqrt(LATENT_DIM)
    texture = {k: rng.standard_normal(shape) * scale for k in ("fx", "fy", "phase", "amp")}
    lmap = rng.standard_normal((3 * N_LANDMARKS, LATENT_DIM))
    lmap /= np.linalg.norm(lmap, axis=1, keepdims=True)
    return SyntheticWorld(seed, latents, positions, headings, texture, lmap)


def render_image(world: SyntheticWorld, p: int, jitter=(0.0, 0.0, 0.0), rng=None,
                 noise_mult: float = 1.0) -> Image:
    """64x48 texture of place ``p``; ``jitter`` = (forward m, lateral m, yaw rad).

    Lateral and yaw jitter shift the pattern horizontally. Pass ``rng=None``
    for the noise-free canonical image.
    """
    z = world.latents[p]
    t = world.texture
    fx = 2.5 + 0.75 * (t["fx"] @ z)
    fy = 2.0 + 0.75 * (t["fy"] @ z)
    phase = math.pi * (t["phase"] @ z)
    amp = 0.15 + 0.03 * (t["amp"] @ z)
    h, w = IMAGE_SHAPE
    v, u = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    u = u - (0.02 * jitter[1] + 0.3 * jitter[2])
    px = np.full((h, w, 3), 0.5)
    for c in range(3):
        for s in range(N_SINUSOIDS):
            px[..., c] += amp[c, s] * np.sin(2 * math.pi * (fx[c, s] * u + fy[c, s] * v)
                                             + phase[c, s])
    if rng is not None:
        px += rng.normal(0.0, world.pixel_sigma * noise_mult, px.shape)
    return Image(np.clip(px, 0.0, 1.0))


def landmarks(world: SyntheticWorld, p: int) -> np.ndarray:
    """12 landmark centers derived from the place latent: xy in +-20 m, height 0-8 m.

    Each coordinate is Phi(a . z) for a fixed unit vector a, so it is uniform
    on [0, 1] over places yet still a smooth function of the latent.
    """
    u = ndtr(world.landmark_map @ world.latents[p]).reshape(N_LANDMARKS, 3)
    return np.column_stack([40.0 * u[:, 0] - 20.0, 40.0 * u[:, 1] - 20.0, 8.0 * u[:, 2]])


def sample_cloud(world: SyntheticWorld, p: int, jitter=(0.0, 0.0, 0.0), rng=None,
                 noise_mult: float = 1.0) -> PointCloud:
    """256 points around the place's landmarks, seen from a jittered sensor frame."""
    rng = np.random.default_rng(0) if rng is None else rng
    centers = landmarks(world, p)
    which = rng.integers(0, N_LANDMARKS, CLOUD_POINTS)
    sigma = world.cloud_sigma * noise_mult
    offsets = np.clip(rng.normal(0.0, sigma, (CLOUD_POINTS, 3)), -3 * sigma, 3 * sigma)
    pts = centers[which] + offsets
    dx, dy, dyaw = jitter
    c, s = math.cos(dyaw), math.sin(dyaw)
    d = pts - np.array([dx, dy, 0.0])
    local = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]])
    local[:, :2] = np.clip(local[:, :2], -25.0, 25.0)
    local[:, 2] = np.clip(local[:, 2], -25.0, 10.0)
    return PointCloud(local)


def generate_runs(world: SyntheticWorld, n_runs: int, spacing: float = PLACE_SPACING,
                  conditions=None) -> list:
    """Traverse the loop ``n_runs`` times, one sample every ``spacing`` meters.

    ``conditions`` is a list of (tag, noise multiplier); it is cycled over
    runs. Each sample is labeled with its nearest place; with the default
    spacing that is exactly one sample per place.
    """
    if n_runs < 2:
        raise ValueError("need at least 2 runs")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    conditions = list(conditions or DEFAULT_CONDITIONS)
    n_places = world.n_places
    length = PLACE_SPACING * n_places
    n_samples = int(round(length / spacing))
    runs = []
    for r in range(n_runs):
        tag, mult = conditions[r % len(conditions)]
        rng = np.random.default_rng([world.seed, r, 7])
        samples = []
        for i in range(n_samples):
            arc = i * spacing
            p = int(round(arc / PLACE_SPACING)) % n_places
            along = arc - round(arc / PLACE_SPACING) * PLACE_SPACING
            base = world.place_pose(p)
            nx, ny = rng.normal(0.0, world.pose_sigma, 2)
            dyaw = float(rng.normal(0.0, world.yaw_sigma))
            c, s = math.cos(base.yaw), math.sin(base.yaw)
            fwd = along + c * nx + s * ny
            lat = -s * nx + c * ny
            jitter = (fwd, lat, dyaw)
            pose = Pose(base.x + c * fwd - s * lat, base.y + s * fwd + c * lat, 0.0,
                        base.yaw + dyaw, timestamp=(r * 10_000 + i) * 1_000_000)
            img = render_image(world, p, jitter, rng, mult)
            cloud = sample_cloud(world, p, jitter, rng, mult)
            samples.append(Sample(r * 100_000 + i, f"run{r:02d}", pose, img, cloud, place=p))
        runs.append(Run(f"run{r:02d}", tuple(samples), tag))
    return runs


def default_regions(world: SyntheticWorld) -> list:
    """One validation rectangle covering the whole loop."""
    r = np.abs(world.positions).max() + 10.0
    return [Region("all", -r, r, -r, r, "validation")]


def write_world(out_dir, world: SyntheticWorld, runs, regions=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for run in runs:
        write_manifest(out / f"{run.run_id}.manifest.json", run, out / "media" / run.run_id)
    write_regions(out / "regions.json", regions or default_regions(world))
    places = {"seed": world.seed, "places": [
        {"place": p, "x": float(world.positions[p, 0]), "y": float(world.positions[p, 1])}
        for p in range(world.n_places)]}
    (out / "places.json").write_text(json.dumps(places, indent=1) + "\n")
