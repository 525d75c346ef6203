"""Training-time augmentation of image / point-cloud pairs.

Mirroring is decided once per pair and applied to both media before any
other perturbation, so a flipped image always comes with a flipped cloud.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .datamodel import Image, PointCloud


@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05  # cycles
    rotation_deg: float = 5.0
    shift_frac: float = 0.10
    cloud_translation: float = 1.5
    cloud_yaw_deg: float = 10.0
    cloud_tilt_deg: float = 2.0
    mirror_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "seed" and v < 0:
                raise ValueError(f"augment.{k} must be non-negative, got {v}")
        if self.mirror_prob > 1:
            raise ValueError("augment.mirror_prob must lie in [0, 1]")

    @classmethod
    def identity(cls, seed=0):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class AugmentDraw:
    """One realization of every random quantity used by :func:`augment_pair`."""

    mirror: bool
    brightness: float
    contrast: float
    saturation: float
    hue: float
    rotation_deg: float
    shift: tuple
    translation: tuple
    yaw: float
    pitch: float
    roll: float


def _sym(rng, bound):
    return float(rng.uniform(-bound, bound)) if bound > 0 else 0.0


def draw_params(cfg: AugmentConfig, rng) -> AugmentDraw:
    mirror = bool(rng.random() < cfg.mirror_prob)
    return AugmentDraw(
        mirror=mirror,
        brightness=1.0 + _sym(rng, cfg.brightness),
        contrast=1.0 + _sym(rng, cfg.contrast),
        saturation=1.0 + _sym(rng, cfg.saturation),
        hue=_sym(rng, cfg.hue),
        rotation_deg=_sym(rng, cfg.rotation_deg),
        shift=(_sym(rng, cfg.shift_frac), _sym(rng, cfg.shift_frac)),
        translation=tuple(_sym(rng, cfg.cloud_translation) for _ in range(3)),
        yaw=math.radians(_sym(rng, cfg.cloud_yaw_deg)),
        pitch=math.radians(_sym(rng, cfg.cloud_tilt_deg)),
        roll=math.radians(_sym(rng, cfg.cloud_tilt_deg)),
    )


def color_adjust(img: Image, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0) -> Image:
    """Apply the four photometric factors in a fixed order, clamping after each."""
    px = img.pixels
    if brightness != 1.0:
        px = np.clip(px * brightness, 0.0, 1.0)
    if contrast != 1.0:
        gray_mean = np.mean(px @ np.array([0.299, 0.587, 0.114]))
        px = np.clip((px - gray_mean) * contrast + gray_mean, 0.0, 1.0)
    if saturation != 1.0:
        gray = (px @ np.array([0.299, 0.587, 0.114]))[..., None]
        px = np.clip((px - gray) * saturation + gray, 0.0, 1.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(px)
        hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
        px = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return img if px is img.pixels else Image(px)


def jitter_image(img: Image, cfg: AugmentConfig, rng) -> Image:
    return color_adjust(img, 1.0 + _sym(rng, cfg.brightness), 1.0 + _sym(rng, cfg.contrast),
                        1.0 + _sym(rng, cfg.saturation), _sym(rng, cfg.hue))


def warp_image(img: Image, rotation: float, shift=(0.0, 0.0)) -> Image:
    """Rotate about the image center (degrees, counter-clockwise) then translate.

    ``shift`` is a fraction of width/height; positive moves content right/down.
    Bilinear sampling, pixels mapped from outside the frame are black.
    """
    dx_frac, dy_frac = shift
    if abs(rotation) > 45 or abs(dx_frac) > 0.5 or abs(dy_frac) > 0.5:
        raise ValueError("warp_image: rotation must be within 45 deg and shift within 0.5")
    if rotation == 0 and dx_frac == 0 and dy_frac == 0:
        return img
    h, w = img.height, img.width
    th = math.radians(rotation)
    c, s = math.cos(th), math.sin(th)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset_px = np.array([dy_frac * h, dx_frac * w])
    # (row, col) forward map: out = R (in - center) + center + offset; invert it
    fwd = np.array([[c, s], [-s, c]])
    inv = fwd.T
    base = center - inv @ (center + offset_px)
    out = np.empty_like(img.pixels)
    for ch in range(3):
        out[..., ch] = ndimage.affine_transform(img.pixels[..., ch], inv, offset=base, order=1,
                                                mode="constant", cval=0.0)
    return Image(np.clip(out, 0.0, 1.0))


def rotation_matrix(yaw, pitch, roll):
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def transform_cloud(pc: PointCloud, translation=(0.0, 0.0, 0.0), yaw=0.0, pitch=0.0,
                    roll=0.0) -> PointCloud:
    if yaw == 0 and pitch == 0 and roll == 0 and not any(translation):
        return pc
    r = rotation_matrix(yaw, pitch, roll)
    return PointCloud(pc.points @ r.T + np.asarray(translation, dtype=np.float64))


def mirror_pair(img: Image, pc: PointCloud):
    pts = pc.points.copy()
    pts[:, 1] = -pts[:, 1]
    return Image(img.pixels[:, ::-1, :].copy()), PointCloud(pts)


def apply_draw(img: Image, pc: PointCloud, d: AugmentDraw):
    if d.mirror:
        img, pc = mirror_pair(img, pc)
    img = color_adjust(img, d.brightness, d.contrast, d.saturation, d.hue)
    img = warp_image(img, d.rotation_deg, d.shift)
    pc = transform_cloud(pc, d.translation, d.yaw, d.pitch, d.roll)
    return img, pc


def augment_pair(sample, cfg: AugmentConfig, rng):
    """Augment a sample's image and sub-map; returns ``(image, cloud)``."""
    return apply_draw(sample.image, sample.submap, draw_params(cfg, rng))
