"""Triplet, joint-embedding and combined objectives over embedding batches.

All functions take ``(B, K)`` arrays or Tensors and return scalar Tensors so
they can be used both for plain evaluation (``float(loss)``) and inside a
differentiable graph.  Reduction over the batch is always a sum.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

PRESETS = ("sm+cm", "sm+cm+je", "teacher-student")


class DistanceKind(enum.Enum):
    L2 = "l2"
    MSE = "mse"
    COSINE = "cosine"
    SMOOTH_L1 = "smooth_l1"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown distance {name!r}; choose from "
                             f"{[k.value for k in cls]}") from None


@dataclass(frozen=True)
class LossWeights:
    sm: float = 0.1
    cm: float = 1.0
    je: float = 1.0

    def __post_init__(self):
        if min(self.sm, self.cm, self.je) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def preset(cls, name):
        if name == "sm+cm+je":
            return cls()
        if name == "sm+cm":
            return cls(je=0.0)
        if name == "teacher-student":
            raise ValueError("teacher-student is a training paradigm, not a weighting")
        raise ValueError(f"unknown loss preset {name!r}; choose from {PRESETS}")


@dataclass
class TripletBatch:
    anchor: object  # (B, K)
    positive: object
    negative: object
    modalities: tuple = ("image", "image", "image")


def _rows(x):
    t = dc.as_tensor(x)
    return dc.reshape(t, (1, t.shape[0])) if t.data.ndim == 1 else t


def distance(kind, u, v) -> dc.Tensor:
    """Row-wise distance between two ``(B, K)`` batches (or two vectors) -> ``(B,)``."""
    kind = DistanceKind.parse(kind)
    u, v = _rows(u), _rows(v)
    if u.shape != v.shape:
        raise dc.ShapeError(f"distance: shapes differ {u.shape} vs {v.shape}")
    if kind is DistanceKind.L2:
        return dc.norm(u - v, axis=-1)
    diff = u - v
    if kind is DistanceKind.MSE:
        return dc.mean(diff * diff, axis=-1)
    if kind is DistanceKind.SMOOTH_L1:
        return dc.sum(dc.smooth_l1(diff), axis=-1)
    cos = dc.sum(dc.l2_normalize(u, axis=-1) * dc.l2_normalize(v, axis=-1), axis=-1)
    return 1.0 - cos


def triplet_loss(batch: TripletBatch, kind=DistanceKind.L2, margin: float = 0.5) -> dc.Tensor:
    """sum_i max(0, d(a_i, p_i) - d(a_i, n_i) + m)."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    a = _rows(batch.anchor)
    if a.shape[0] == 0:
        raise ValueError("triplet_loss: empty batch")
    gap = distance(kind, a, batch.positive) - distance(kind, a, batch.negative)
    return dc.sum(dc.hinge(gap + margin))


def joint_embedding_loss(image_evs, cloud_evs, kind=DistanceKind.L2) -> dc.Tensor:
    """sum_i d(f(I_i), g(m_i)) over paired rows."""
    if _rows(image_evs).shape[0] == 0:
        raise ValueError("joint_embedding_loss: no pairs")
    return dc.sum(distance(kind, image_evs, cloud_evs))


def same_modality_loss(batch2d: TripletBatch, batch3d: TripletBatch, kind=DistanceKind.L2,
                       margin: float = 0.5) -> dc.Tensor:
    return triplet_loss(batch2d, kind, margin) + triplet_loss(batch3d, kind, margin)


def cross_modality_loss(batch_2d3d: TripletBatch, batch_3d2d: TripletBatch,
                        kind=DistanceKind.L2, margin: float = 0.5) -> dc.Tensor:
    return triplet_loss(batch_2d3d, kind, margin) + triplet_loss(batch_3d2d, kind, margin)


@dataclass
class LossTerms:
    sm: dc.Tensor
    cm: dc.Tensor
    je: dc.Tensor
    total: dc.Tensor

    def values(self):
        return {k: float(getattr(self, k)) for k in ("sm", "cm", "je", "total")}


def batches_from_indices(img_ev, cld_ev, anchor, positive, negative):
    """Build the four triplet batches sharing one index assignment."""
    take = dc.take
    ia, ip, ineg = (take(img_ev, i) for i in (anchor, positive, negative))
    ca, cp, cneg = (take(cld_ev, i) for i in (anchor, positive, negative))
    return {
        "2d2d": TripletBatch(ia, ip, ineg, ("image", "image", "image")),
        "3d3d": TripletBatch(ca, cp, cneg, ("cloud", "cloud", "cloud")),
        "2d3d": TripletBatch(ia, cp, cneg, ("image", "cloud", "cloud")),
        "3d2d": TripletBatch(ca, ip, ineg, ("cloud", "image", "image")),
    }


def combined_terms(batches: dict, image_evs, cloud_evs, weights: LossWeights,
                   kind=DistanceKind.L2, margin: float = 0.5) -> LossTerms:
    sm = same_modality_loss(batches["2d2d"], batches["3d3d"], kind, margin)
    cm = cross_modality_loss(batches["2d3d"], batches["3d2d"], kind, margin)
    je = joint_embedding_loss(image_evs, cloud_evs, kind)
    total = dc.scale(sm, weights.sm) + dc.scale(cm, weights.cm) + dc.scale(je, weights.je)
    return LossTerms(sm, cm, je, total)


def combined_loss(batches: dict, image_evs, cloud_evs, weights: LossWeights = LossWeights(),
                  kind=DistanceKind.L2, margin: float = 0.5) -> dc.Tensor:
    """lambda_sm * L_SM + lambda_cm * L_CM + lambda_je * L_JE."""
    return combined_terms(batches, image_evs, cloud_evs, weights, kind, margin).total


def scalar_distance(kind, u, v) -> float:
    """Plain-float convenience wrapper around :func:`distance` for two vectors."""
    return float(distance(kind, np.asarray(u, float), np.asarray(v, float)).data[0])
