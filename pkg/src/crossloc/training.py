"""Batch construction, the Adam update, and the two training paradigms."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .augment import AugmentConfig, apply_draw, draw_params
from .datamodel import DataError, Dataset, is_same_place
from .encoders import (Checkpoint, EncoderConfig, cloud_features, cloud_graph, embed_clouds,
                       embed_images, image_features, image_graph, init_params,
                       kmeans_netvlad_init, prepare_pixels, sample_points,
                       standardize_mlp_init)
from .losses import (DistanceKind, LossWeights, batches_from_indices, combined_terms,
                     joint_embedding_loss, triplet_loss, TripletBatch)

log = logging.getLogger(__name__)

PARADIGMS = ("combined", "teacher_student")


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    paradigm: str = "combined"
    places_per_batch: int = 4
    samples_per_place: int = 2
    epochs: int = 100
    teacher_epochs: int = 60
    student_epochs: int = 100
    lr: float = 1e-3
    student_lr: float | None = None  # defaults to lr
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_preset: str = "sm+cm+je"
    distance: str = "l2"
    student_distance: str = "smooth_l1"
    margin: float = 0.5
    seed: int = 0
    head_init: str = "kmeans"
    je_warmup: int = 0  # epochs over which the JE weight ramps linearly up to its preset value
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        p = self.paradigm.replace("-", "_")
        if p not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}; choose from {PARADIGMS}")
        object.__setattr__(self, "paradigm", p)
        if self.places_per_batch < 2:
            raise ValueError("places_per_batch must be >= 2 so in-batch negatives exist")
        if self.samples_per_place != 2:
            raise ValueError("the batch builder draws exactly 2 samples per place")
        if min(self.epochs, self.teacher_epochs, self.student_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr < 0 or self.margin <= 0 or (self.student_lr or 0) < 0:
            raise ValueError("lr must be >= 0 and margin > 0")
        if self.je_warmup < 0:
            raise ValueError("je_warmup must be non-negative")
        if self.head_init not in ("kmeans", "random"):
            raise ValueError("head_init must be 'kmeans' or 'random'")
        DistanceKind.parse(self.distance)
        DistanceKind.parse(self.student_distance)
        if self.paradigm == "combined":
            LossWeights.preset(self.loss_preset)

    @property
    def weights(self):
        return LossWeights.preset(self.loss_preset)

    def weights_at(self, epoch: int) -> LossWeights:
        w = self.weights
        if self.je_warmup and epoch < self.je_warmup:
            w = LossWeights(w.sm, w.cm, w.je * (epoch + 1) / (self.je_warmup + 1))
        return w


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def optimizer_step(params: dc.ParamStore, grads: dict, state: AdamState, lr=1e-3, beta1=0.9,
                   beta2=0.999, eps=1e-8):
    """One Adam step with bias correction; only names present in ``grads`` move."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params.params[name]
        if p.shape != g.shape:
            raise dc.ShapeError(f"optimizer: grad shape {g.shape} != param shape {p.shape} "
                                f"for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# -- batches -------------------------------------------------------------------


@dataclass
class Batch:
    places: list
    samples: list
    pixels: np.ndarray  # (2N, 48, 64, 3)
    points: np.ndarray  # (2N, n_pts, 3)
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    mirrored: list

    @property
    def place_of(self):
        return np.repeat(np.arange(len(self.places)), 2)


def build_batch(dataset: Dataset, n_places: int, rng, augment: AugmentConfig | None = None,
                n_pts: int = 256, places=None) -> Batch:
    """N places x 2 samples; every sample anchors one triplet.

    The positive is the other sample of the anchor's place and the negative
    is drawn uniformly among in-batch samples of other places.
    """
    usable = dataset.usable_places(2)
    if len(usable) < n_places:
        raise DataError(f"need at least {n_places} places with 2+ samples, dataset has "
                        f"{len(usable)}")
    if places is None:
        places = [usable[i] for i in rng.choice(len(usable), n_places, replace=False)]
    augment = augment or AugmentConfig.identity()
    samples, pixels, points, mirrored = [], [], [], []
    for key in places:
        pool = dataset.places[key]
        for i in rng.choice(len(pool), 2, replace=False):
            s = pool[i]
            d = draw_params(augment, rng)
            img, pc = apply_draw(s.image, s.submap, d)
            samples.append(s)
            mirrored.append(d.mirror)
            pixels.append(prepare_pixels(img))
            points.append(sample_points(pc, n_pts, rng))
    n = len(samples)
    anchor = np.arange(n)
    positive = anchor ^ 1
    negative = np.empty(n, dtype=int)
    for a in range(n):
        cands = [j for j in range(n) if j // 2 != a // 2
                 and not is_same_place(samples[a].pose, samples[j].pose)]
        if not cands:
            raise DataError("no valid in-batch negative: all other places within 20 m")
        negative[a] = cands[rng.integers(len(cands))]
    return Batch(list(places), samples, np.stack(pixels), np.stack(points), anchor, positive,
                 negative, mirrored)


def epoch_batches(dataset: Dataset, n_places: int, rng):
    """Place groups for one epoch: a shuffled pass in ceil(P/N) batches."""
    usable = dataset.usable_places(2)
    if len(usable) < n_places:
        raise DataError(f"need at least {n_places} places with 2+ samples, dataset has "
                        f"{len(usable)}")
    order = [usable[i] for i in rng.permutation(len(usable))]
    groups = []
    for i in range(0, len(order), n_places):
        g = order[i:i + n_places]
        if len(g) < n_places:
            rest = [k for k in usable if k not in g]
            g += [rest[j] for j in rng.choice(len(rest), n_places - len(g), replace=False)]
        groups.append(g)
    return groups


# -- loss graphs ---------------------------------------------------------------


def combined_graph(batch: Batch, P: dict, enc: EncoderConfig, cfg: TrainConfig,
                   weights: LossWeights | None = None):
    img = image_graph(batch.pixels, P, enc)
    cld = cloud_graph(batch.points, P, enc)
    tb = batches_from_indices(img, cld, batch.anchor, batch.positive, batch.negative)
    return combined_terms(tb, img, cld, weights or cfg.weights, cfg.distance, cfg.margin)


def teacher_graph(batch: Batch, P: dict, enc: EncoderConfig, cfg: TrainConfig):
    img = image_graph(batch.pixels, P, enc)
    take = dc.take
    tb = TripletBatch(take(img, batch.anchor), take(img, batch.positive),
                      take(img, batch.negative))
    return triplet_loss(tb, cfg.distance, cfg.margin)


def student_graph(batch: Batch, teacher_evs: np.ndarray, P: dict, enc: EncoderConfig,
                  cfg: TrainConfig):
    return joint_embedding_loss(teacher_evs, cloud_graph(batch.points, P, enc),
                                cfg.student_distance)


# -- training loops ------------------------------------------------------------


class TrainLog:
    """Line-delimited JSON records, one per epoch."""

    def __init__(self, stream=None):
        self.stream = stream
        self.records = []

    def write(self, **rec):
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(json.dumps(rec, sort_keys=True) + "\n")
            self.stream.flush()


def _check_finite(value, stage, epoch):
    if not math.isfinite(value):
        raise NumericError(f"{stage}: non-finite loss at epoch {epoch}; aborting")


def _run_epochs(stage, dataset, params, names, epochs, cfg, enc, loss_fn, logger, rng,
                lr=None):
    lr = cfg.lr if lr is None else lr
    state = AdamState()
    history = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        totals = []
        parts = {}
        for group in epoch_batches(dataset, cfg.places_per_batch, rng):
            batch = build_batch(dataset, cfg.places_per_batch, rng, cfg.augment, enc.n_pts,
                                places=group)
            leaves = {k: dc.Tensor(v, requires_grad=k in names) for k, v in params.items()}
            out = loss_fn(batch, leaves, epoch)
            total = out.total if hasattr(out, "total") else out
            total.backward()
            value = total.item()
            _check_finite(value, stage, epoch)
            totals.append(value)
            if hasattr(out, "values"):
                for k, v in out.values().items():
                    parts.setdefault(k, []).append(v)
            grads = {k: leaves[k].grad if leaves[k].grad is not None
                     else np.zeros_like(params[k]) for k in names}
            optimizer_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        mean = float(np.mean(totals))
        history.append(mean)
        rec = {"stage": stage, "epoch": epoch, "loss": mean,
               "wall_s": round(time.perf_counter() - t0, 3)}
        rec.update({k: float(np.mean(v)) for k, v in parts.items()})
        if logger is not None:
            logger.write(**rec)
        log.debug("%s epoch %d loss %.5f", stage, epoch, mean)
    return history


def init_heads_from_data(params: dc.ParamStore, dataset: Dataset, enc: EncoderConfig,
                         modalities, rng, n_samples: int = 32):
    """Data-dependent head init from unaugmented local features.

    NetVLAD heads get k-means centers; MLP heads are standardized.
    """
    pool = [s for k in dataset.usable_places(1) for s in dataset.places[k]]
    pick = [pool[i] for i in sorted(rng.choice(len(pool), min(n_samples, len(pool)),
                                               replace=False))]
    P = {k: dc.Tensor(v) for k, v in params.items()}
    for modality in modalities:
        head = enc.image_head if modality == "image" else enc.cloud_head
        if modality == "image":
            feats = image_features(np.stack([prepare_pixels(s.image) for s in pick]), P).data
        else:
            pts = np.stack([sample_points(s.submap, enc.n_pts, rng) for s in pick])
            feats = cloud_features(pts, P).data
        if head == "mlp":
            pre = f"{modality}.mlp."
            out = standardize_mlp_init(feats.max(axis=1), *(params[pre + k]
                                                             for k in ("w1", "b1", "w2", "b2")))
            for k, v in zip(("w1", "b1", "w2", "b2"), out):
                params[pre + k] = v
            continue
        w, b, c = kmeans_netvlad_init(feats.reshape(-1, feats.shape[-1]), enc.clusters, rng)
        params[f"{modality}.vlad.assign_w"] = w
        params[f"{modality}.vlad.assign_b"] = b
        params[f"{modality}.vlad.centers"] = c
    return params


def _names(params, prefix):
    return [k for k in params.names() if k.startswith(prefix + ".")]


def train_teacher(dataset: Dataset, cfg: TrainConfig, enc: EncoderConfig, logger=None,
                  params: dc.ParamStore | None = None) -> Checkpoint:
    """Train the image network alone with the image-to-image triplet loss."""
    rng = np.random.default_rng([cfg.seed, 1])
    if params is None:
        params = init_params(enc, cfg.seed, ("image",))
        if cfg.head_init == "kmeans":
            init_heads_from_data(params, dataset, enc, ("image",), rng)
    else:
        params = params.copy()
    names = _names(params, "image")
    history = _run_epochs("teacher", dataset, params, names, cfg.teacher_epochs, cfg, enc,
                          lambda b, P, e: teacher_graph(b, P, enc, cfg), logger, rng)
    return Checkpoint(params, enc, cfg.teacher_epochs, history)


def train_student(dataset: Dataset, teacher: Checkpoint, cfg: TrainConfig, enc: EncoderConfig,
                  logger=None, params: dc.ParamStore | None = None) -> Checkpoint:
    """Train the cloud network to reproduce the frozen teacher's embeddings."""
    if teacher.config.digest() != enc.digest():
        raise DataError("teacher checkpoint encoder config does not match")
    if not teacher.has("image"):
        raise DataError("teacher checkpoint has no image network")
    rng = np.random.default_rng([cfg.seed, 2])
    frozen = {k: dc.Tensor(v) for k, v in teacher.params.items() if k.startswith("image.")}
    store = dc.ParamStore()
    for k, v in teacher.params.items():
        if k.startswith("image."):
            store.params[k] = v  # shared, never written
            store.grads[k] = np.zeros_like(v)
    if params is None:
        student = init_params(enc, cfg.seed, ("cloud",))
        if cfg.head_init == "kmeans":
            init_heads_from_data(student, dataset, enc, ("cloud",), rng)
    else:
        student = params.copy()
    for k, v in student.items():
        store[k] = v
    names = _names(store, "cloud")

    def loss_fn(batch, P, epoch):
        target = image_graph(batch.pixels, frozen, enc).data
        return student_graph(batch, target, P, enc, cfg)

    history = _run_epochs("student", dataset, store, names, cfg.student_epochs, cfg, enc,
                          loss_fn, logger, rng, cfg.student_lr)
    return Checkpoint(store, enc, teacher.epoch + cfg.student_epochs,
                      list(teacher.history) + history)


def train_combined(dataset: Dataset, cfg: TrainConfig, enc: EncoderConfig, logger=None,
                   params: dc.ParamStore | None = None) -> Checkpoint:
    """Train both networks jointly on the weighted SM + CM + JE objective."""
    rng = np.random.default_rng([cfg.seed, 3])
    if params is None:
        params = init_params(enc, cfg.seed)
        if cfg.head_init == "kmeans":
            init_heads_from_data(params, dataset, enc, ("image", "cloud"), rng)
    else:
        params = params.copy()
    names = params.names()
    history = _run_epochs("combined", dataset, params, names, cfg.epochs, cfg, enc,
                          lambda b, P, e: combined_graph(b, P, enc, cfg, cfg.weights_at(e)), logger, rng)
    return Checkpoint(params, enc, cfg.epochs, history)


def train(dataset: Dataset, cfg: TrainConfig, enc: EncoderConfig, logger=None) -> Checkpoint:
    if cfg.paradigm == "combined":
        return train_combined(dataset, cfg, enc, logger)
    teacher = train_teacher(dataset, cfg, enc, logger)
    return train_student(dataset, teacher, cfg, enc, logger)


def mean_je_distance(samples, params, enc: EncoderConfig, kind="smooth_l1") -> float:
    """Mean image/cloud embedding distance over unaugmented samples."""
    img = embed_images([s.image for s in samples], params, enc)
    cld = embed_clouds([s.submap for s in samples], params, enc)
    return float(joint_embedding_loss(img, cld, kind)) / len(samples)
