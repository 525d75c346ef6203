"""Image and point-cloud encoders mapping both modalities into one EV space.

Both pipelines are "local feature extractor + aggregation head". Internally
everything is batched: features are ``(B, M, D)`` tensors, embeddings are
``(B, K)``. Parameter names are prefixed ``image.`` or ``cloud.`` so one
ParamStore can hold both networks.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datamodel import DataError, Image, PointCloud

CKPT_MAGIC = b"CML1"
IMAGE_INPUT = (48, 64)  # rows, cols fed to the extractor
CLOUD_SCALE = 25.0  # sub-map half extent; coordinates are divided by it


@dataclass(frozen=True)
class EncoderConfig:
    image_channels: int = 8
    feature_dim: int = 16
    clusters: int = 8
    cloud_hidden: tuple = (32,)
    image_head: str = "netvlad"
    cloud_head: str = "netvlad"
    mlp_hidden: int = 64
    n_pts: int = 256
    cloud_feature_dim: int | None = None  # defaults to feature_dim

    def __post_init__(self):
        object.__setattr__(self, "cloud_hidden", tuple(int(w) for w in self.cloud_hidden))
        for name in ("image_channels", "feature_dim", "clusters", "mlp_hidden", "n_pts"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder.{name} must be >= 1")
        for head in (self.image_head, self.cloud_head):
            if head not in ("netvlad", "mlp"):
                raise ValueError(f"unknown head kind {head!r} (netvlad | mlp)")
        if self.embedding_dim("image") != self.embedding_dim("cloud"):
            raise ValueError(
                f"image EV length {self.embedding_dim('image')} != cloud EV length "
                f"{self.embedding_dim('cloud')}; both modalities must share K")

    @property
    def cloud_dim(self):
        return self.cloud_feature_dim or self.feature_dim

    def embedding_dim(self, modality="image"):
        d = self.feature_dim if modality == "image" else self.cloud_dim
        head = self.image_head if modality == "image" else self.cloud_head
        # the MLP head is sized to the image NetVLAD length so heads can be mixed
        return self.clusters * (d if head == "netvlad" else self.feature_dim)

    @property
    def K(self):
        return self.embedding_dim("image")

    def to_dict(self):
        d = asdict(self)
        d["cloud_hidden"] = list(self.cloud_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "cloud_hidden" in d:
            d["cloud_hidden"] = tuple(d["cloud_hidden"])
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass(frozen=True, eq=False)
class LocalFeatureMap:
    values: np.ndarray  # (D, M)

    @property
    def dim(self):
        return self.values.shape[0]

    @property
    def count(self):
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class NetVladHead:
    assign_w: np.ndarray  # (Kc, D)
    assign_b: np.ndarray  # (Kc,)
    centers: np.ndarray  # (Kc, D)

    @property
    def clusters(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.centers.shape[1]


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    modality: str

    def __len__(self):
        return len(self.values)


# -- parameter initialization -----------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _head_params(rng, prefix, kind, d, cfg):
    p = {}
    if kind == "netvlad":
        p[f"{prefix}.vlad.assign_w"] = _uniform(rng, d, (cfg.clusters, d))
        p[f"{prefix}.vlad.assign_b"] = np.zeros(cfg.clusters)
        p[f"{prefix}.vlad.centers"] = rng.standard_normal((cfg.clusters, d))
    else:
        p[f"{prefix}.mlp.w1"] = _uniform(rng, d, (d, cfg.mlp_hidden))
        p[f"{prefix}.mlp.b1"] = np.zeros(cfg.mlp_hidden)
        p[f"{prefix}.mlp.w2"] = _uniform(rng, cfg.mlp_hidden, (cfg.mlp_hidden, cfg.K))
        p[f"{prefix}.mlp.b2"] = np.zeros(cfg.K)
    return p


def init_image_params(cfg: EncoderConfig, rng) -> dict:
    c1, d = cfg.image_channels, cfg.feature_dim
    p = {
        "image.conv1.w": _uniform(rng, 48, (48, c1)),
        "image.conv1.b": np.zeros(c1),
        "image.conv2.w": _uniform(rng, 4 * c1, (4 * c1, d)),
        "image.conv2.b": np.zeros(d),
    }
    p.update(_head_params(rng, "image", cfg.image_head, d, cfg))
    return p


def init_cloud_params(cfg: EncoderConfig, rng) -> dict:
    widths = (3, *cfg.cloud_hidden, cfg.cloud_dim)
    p = {}
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        p[f"cloud.mlp{i}.w"] = _uniform(rng, a, (a, b))
        p[f"cloud.mlp{i}.b"] = np.zeros(b)
    p.update(_head_params(rng, "cloud", cfg.cloud_head, cfg.cloud_dim, cfg))
    return p


def init_params(cfg: EncoderConfig, seed: int = 0, modalities=("image", "cloud")) -> dc.ParamStore:
    ss = np.random.SeedSequence(seed).spawn(2)
    store = dc.ParamStore()
    if "image" in modalities:
        store.update(dc.ParamStore(init_image_params(cfg, np.random.default_rng(ss[0]))))
    if "cloud" in modalities:
        store.update(dc.ParamStore(init_cloud_params(cfg, np.random.default_rng(ss[1]))))
    return store


def kmeans_netvlad_init(features: np.ndarray, clusters: int, rng, iters: int = 20):
    """Assignment weights and centers for a NetVLAD head from sample local features.

    Centers come from k-means (k-means++ seeding) over ``features`` (n, D).
    The soft assignment is set to softmax_k(-alpha ||x - c_k||^2), i.e.
    w_k = 2 alpha c_k and b_k = -alpha ||c_k||^2, with alpha chosen so the
    nearest center gets ~100x the weight of the runner-up on average.
    """
    from scipy.cluster.vq import kmeans2

    feats = np.asarray(features, dtype=np.float64)
    centers, _ = kmeans2(feats, clusters, iter=iters, minit="++", seed=rng)
    d2 = ((feats[:, None, :] - centers[None]) ** 2).sum(-1)
    d2.sort(axis=1)
    gap = float(np.mean(d2[:, 1] - d2[:, 0])) if clusters > 1 else 1.0
    alpha = np.log(100.0) / gap if gap > 0 else 1.0
    return 2 * alpha * centers, -alpha * (centers ** 2).sum(-1), centers


def standardize_mlp_init(pooled: np.ndarray, w1, b1, w2, b2):
    """Rescale an MLP head so its pre-activations are zero-mean, unit-variance.

    ``pooled`` holds max-pooled features (n, D) of sample inputs. Without
    this the head output is dominated by one shared direction and every
    normalized EV starts out nearly identical.
    """
    def fit(x, w, b):
        z = x @ w + b
        mu, sd = z.mean(axis=0), z.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        return w / sd, (b - mu) / sd

    w1, b1 = fit(pooled, w1, b1)
    h = np.maximum(pooled @ w1 + b1, 0.0)
    w2, b2 = fit(h, w2, b2)
    return w1, b1, w2, b2


def _tensors(params):
    """Accept a ParamStore, a dict of arrays or a dict of Tensors."""
    if isinstance(params, dc.ParamStore):
        return {k: dc.Tensor(v) for k, v in params.items()}
    return {k: dc.as_tensor(v) for k, v in params.items()}


# -- feature extractors ------------------------------------------------------


def prepare_pixels(img: Image) -> np.ndarray:
    """Downscale an image to the extractor input size by block averaging."""
    h, w = IMAGE_INPUT
    px = img.pixels
    if px.shape[:2] == (h, w):
        return px
    fy, fx = px.shape[0] / h, px.shape[1] / w
    if fy != fx or fy != int(fy):
        raise DataError(f"image size {px.shape[1]}x{px.shape[0]} is not an integer multiple "
                        f"of {w}x{h} (expected e.g. 320x240)")
    f = int(fy)
    return px.reshape(h, f, w, f, 3).mean(axis=(1, 3))


def image_patches(pixels: np.ndarray) -> np.ndarray:
    """(B, 48, 64, 3) -> (B*192, 48) non-overlapping 4x4 patches.

    Each image has its per-channel mean removed first.
    """
    b = pixels.shape[0]
    pixels = pixels - pixels.mean(axis=(1, 2), keepdims=True)
    x = pixels.reshape(b, 12, 4, 16, 4, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * 192, 48)


def image_features(pixels: np.ndarray, P: dict) -> dc.Tensor:
    """Two strided conv layers (4x4/4 then 2x2/2) with ReLU -> (B, 48, D)."""
    b = pixels.shape[0]
    h = dc.relu(dc.matmul(image_patches(pixels), P["image.conv1.w"]) + P["image.conv1.b"])
    c1 = h.shape[-1]
    h = dc.reshape(h, (b, 6, 2, 8, 2, c1))
    h = dc.transpose(h, (0, 1, 3, 2, 4, 5))
    h = dc.reshape(h, (b * 48, 4 * c1))
    h = dc.relu(dc.matmul(h, P["image.conv2.w"]) + P["image.conv2.b"])
    return dc.reshape(h, (b, 48, h.shape[-1]))


def sample_points(pc: PointCloud, n_pts: int, rng) -> np.ndarray:
    if len(pc) == 0:
        raise DataError("cannot encode an empty point cloud")
    n = len(pc)
    idx = rng.choice(n, n_pts, replace=n < n_pts)
    return pc.points[idx]


def cloud_features(points: np.ndarray, P: dict) -> dc.Tensor:
    """Shared per-point MLP with ReLU: (B, N, 3) -> (B, N, D)."""
    b, n, _ = points.shape
    h = dc.Tensor(points.reshape(b * n, 3) / CLOUD_SCALE)
    i = 0
    while f"cloud.mlp{i}.w" in P:
        h = dc.relu(dc.matmul(h, P[f"cloud.mlp{i}.w"]) + P[f"cloud.mlp{i}.b"])
        i += 1
    return dc.reshape(h, (b, n, h.shape[-1]))


# -- aggregation heads -------------------------------------------------------


def netvlad(x: dc.Tensor, assign_w, assign_b, centers) -> dc.Tensor:
    """NetVLAD over (B, M, D) local features -> (B, Kc*D) unit vectors.

    Soft assignment softmax_k(w_k.x_i + b_k), residual sums
    V_k = sum_i a_k(x_i) (x_i - c_k), per-cluster then global L2 normalization.
    """
    x = dc.as_tensor(x)
    b, m, d = x.shape
    centers = dc.as_tensor(centers)
    kc = centers.shape[0]
    if centers.shape[1] != d:
        raise dc.ShapeError(f"netvlad: feature dim {d} != head dim {centers.shape[1]}")
    a = dc.softmax(dc.matmul(x, dc.transpose(dc.as_tensor(assign_w), (1, 0))) + assign_b, axis=-1)
    v = dc.matmul(dc.transpose(a, (0, 2, 1)), x)
    mass = dc.reshape(dc.sum(a, axis=1), (b, kc, 1))
    v = v - mass * centers
    v = dc.l2_normalize(v, axis=-1)
    return dc.l2_normalize(dc.reshape(v, (b, kc * d)), axis=-1)


def mlp_head(x: dc.Tensor, w1, b1, w2, b2) -> dc.Tensor:
    """Max-pool over locations, 2-layer MLP, L2 normalization."""
    pooled = dc.max(dc.as_tensor(x), axis=1)
    h = dc.relu(dc.matmul(pooled, w1) + b1)
    return dc.l2_normalize(dc.matmul(h, w2) + b2, axis=-1)


def _head(x, P, prefix, kind):
    if kind == "netvlad":
        return netvlad(x, P[f"{prefix}.vlad.assign_w"], P[f"{prefix}.vlad.assign_b"],
                       P[f"{prefix}.vlad.centers"])
    return mlp_head(x, P[f"{prefix}.mlp.w1"], P[f"{prefix}.mlp.b1"], P[f"{prefix}.mlp.w2"],
                    P[f"{prefix}.mlp.b2"])


def image_graph(pixels: np.ndarray, P: dict, cfg: EncoderConfig) -> dc.Tensor:
    return _head(image_features(pixels, P), P, "image", cfg.image_head)


def cloud_graph(points: np.ndarray, P: dict, cfg: EncoderConfig) -> dc.Tensor:
    return _head(cloud_features(points, P), P, "cloud", cfg.cloud_head)


# -- single-sample API -------------------------------------------------------


def extract_image_features(img: Image, params) -> LocalFeatureMap:
    feats = image_features(prepare_pixels(img)[None], _tensors(params))
    return LocalFeatureMap(feats.data[0].T.copy())


def extract_cloud_features(pc: PointCloud, params, n_pts: int, rng=None) -> LocalFeatureMap:
    rng = np.random.default_rng(0) if rng is None else rng
    feats = cloud_features(sample_points(pc, n_pts, rng)[None], _tensors(params))
    return LocalFeatureMap(feats.data[0].T.copy())


def netvlad_aggregate(features: LocalFeatureMap, head: NetVladHead,
                      modality="image") -> EmbeddingVector:
    if features.dim != head.dim:
        raise dc.ShapeError(f"netvlad: feature dim {features.dim} != head dim {head.dim}")
    out = netvlad(features.values.T[None], head.assign_w, head.assign_b, head.centers)
    return EmbeddingVector(out.data[0], modality)


def mlp_aggregate(features: LocalFeatureMap, params, prefix="cloud") -> EmbeddingVector:
    P = _tensors(params)
    out = mlp_head(features.values.T[None], P[f"{prefix}.mlp.w1"], P[f"{prefix}.mlp.b1"],
                   P[f"{prefix}.mlp.w2"], P[f"{prefix}.mlp.b2"])
    return EmbeddingVector(out.data[0], prefix)


def embed_images(images, params, cfg: EncoderConfig, batch: int = 64) -> np.ndarray:
    P = _tensors(params)
    out = np.empty((len(images), cfg.K))
    for i in range(0, len(images), batch):
        px = np.stack([prepare_pixels(im) for im in images[i:i + batch]])
        out[i:i + batch] = image_graph(px, P, cfg).data
    return out


def embed_clouds(clouds, params, cfg: EncoderConfig, batch: int = 64, seed: int = 0) -> np.ndarray:
    """Embed clouds; each cloud's point sampling uses its own fixed-seed stream."""
    P = _tensors(params)
    out = np.empty((len(clouds), cfg.K))
    for i in range(0, len(clouds), batch):
        pts = np.stack([sample_points(pc, cfg.n_pts, np.random.default_rng(seed))
                        for pc in clouds[i:i + batch]])
        out[i:i + batch] = cloud_graph(pts, P, cfg).data
    return out


def embed_image(img: Image, params, cfg: EncoderConfig) -> EmbeddingVector:
    return EmbeddingVector(embed_images([img], params, cfg)[0], "image")


def embed_cloud(pc: PointCloud, params, cfg: EncoderConfig, seed: int = 0) -> EmbeddingVector:
    return EmbeddingVector(embed_clouds([pc], params, cfg, seed=seed)[0], "cloud")


# -- checkpoints ---------------------------------------------------------------


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    params: dc.ParamStore
    config: EncoderConfig
    epoch: int = 0
    history: list = field(default_factory=list)

    def has(self, modality):
        return any(n.startswith(modality + ".") for n in self.params)


def save_checkpoint(path, ckpt: Checkpoint):
    cfg_json = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, ckpt.config.digest(), struct.pack("<II", ckpt.config.K, ckpt.epoch),
             struct.pack("<I", len(cfg_json)), cfg_json,
             struct.pack("<I", len(ckpt.history)),
             np.asarray(ckpt.history, dtype="<f8").tobytes(),
             struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params.names()):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected: EncoderConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    try:
        digest = raw[4:36]
        k, epoch = struct.unpack_from("<II", raw, 36)
        pos = 44
        (n,) = struct.unpack_from("<I", raw, pos)
        cfg = EncoderConfig.from_dict(json.loads(raw[pos + 4:pos + 4 + n]))
        pos += 4 + n
        (nh,) = struct.unpack_from("<I", raw, pos)
        history = np.frombuffer(raw, "<f8", nh, pos + 4).tolist()
        pos += 4 + 8 * nh
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        store = dc.ParamStore()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape))
            store[name] = np.frombuffer(raw, "<f8", size, pos).reshape(shape)
            pos += 8 * size
    except (struct.error, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    if digest != cfg.digest() or k != cfg.K:
        raise CheckpointError(f"{path}: header digest does not match embedded config")
    if expected is not None and expected.digest() != digest:
        raise CheckpointError(f"{path}: encoder config digest mismatch")
    return Checkpoint(store, cfg, epoch, history)
