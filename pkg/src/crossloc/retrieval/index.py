"""Embedding database: build, query, cross-modal query and the EVDB file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..datamodel import DataError, Pose
from .kdtree import KDTree

EVDB_MAGIC = b"EVDB"
EVDB_VERSION = 1
MODALITIES = ("image", "cloud")
_ENTRY_HEAD = struct.Struct("<Q6dB")


@dataclass(frozen=True, eq=False)
class EmbeddingIndex:
    """Read-only index of embedding vectors with their ids, poses and modality."""

    evs: np.ndarray  # (n, K) float64
    sample_ids: np.ndarray  # (n,) int64
    poses: tuple
    modality: str
    tree: KDTree

    @property
    def dim(self):
        return self.evs.shape[1]

    def __len__(self):
        return len(self.evs)


@dataclass(frozen=True)
class QueryResult:
    sample_ids: tuple
    poses: tuple
    distances: tuple
    modality: str = "image"
    nodes_visited: int = 0

    def __len__(self):
        return len(self.sample_ids)

    def __iter__(self):
        return iter(zip(self.sample_ids, self.poses, self.distances))


def _pose_of(p):
    if isinstance(p, Pose):
        return p
    a = np.asarray(p, dtype=np.float64).reshape(-1)
    return Pose(*a[:6]) if len(a) >= 6 else Pose(*a)


def build_index(entries, modality: str = "image", leaf_size: int = 8) -> EmbeddingIndex:
    """Index a list of ``(ev, sample_id, pose)`` triples."""
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
    entries = list(entries)
    if not entries:
        raise ValueError("build_index: no entries")
    dims = {np.asarray(ev).shape for ev, _, _ in entries}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError(f"build_index: embedding dimensions differ {sorted(dims)}")
    evs = np.array([np.asarray(ev, dtype=np.float64) for ev, _, _ in entries])
    if not np.all(np.isfinite(evs)):
        raise ValueError("build_index: non-finite embedding values")
    ids = np.array([int(i) for _, i, _ in entries], dtype=np.int64)
    poses = tuple(_pose_of(p) for _, _, p in entries)
    evs.setflags(write=False)
    ids.setflags(write=False)
    return EmbeddingIndex(evs, ids, poses, modality, KDTree(evs, ids, leaf_size))


def knn_query(index: EmbeddingIndex, query, k: int, backend: str | None = None) -> QueryResult:
    """Exact Euclidean k nearest neighbors; ties go to the smaller sample_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dimension {q.shape} != index dimension {index.dim}")
    pos, dist, visited = index.tree.query(q, k, backend)
    return QueryResult(tuple(int(index.sample_ids[i]) for i in pos),
                       tuple(index.poses[i] for i in pos),
                       tuple(float(d) for d in dist), index.modality, visited)


def embed_samples(samples, modality: str, params, enc, seed: int = 0) -> np.ndarray:
    """Embed the image or the sub-map of each sample; missing media is an error."""
    from ..encoders import embed_clouds, embed_images

    if modality == "image":
        missing = [s.sample_id for s in samples if s.image is None]
        if missing:
            raise DataError(f"samples without an image: {missing[:5]}")
        return embed_images([s.image for s in samples], params, enc)
    if modality == "cloud":
        missing = [s.sample_id for s in samples if s.submap is None]
        if missing:
            raise DataError(f"samples without a sub-map: {missing[:5]}")
        return embed_clouds([s.submap for s in samples], params, enc, seed=seed)
    raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")


def index_samples(samples, modality, params, enc) -> EmbeddingIndex:
    evs = embed_samples(samples, modality, params, enc)
    return build_index([(ev, s.sample_id, s.pose) for ev, s in zip(evs, samples)], modality)


def cross_modal_query(db_samples, query_sample, db_modality: str, query_modality: str, params,
                      enc, k: int = 25) -> QueryResult:
    """Embed the database with one encoder and the query with the other, then search."""
    index = index_samples(db_samples, db_modality, params, enc)
    q = embed_samples([query_sample], query_modality, params, enc)[0]
    return knn_query(index, q, k)


# -- EVDB file format ----------------------------------------------------------


def write_evdb(path, index: EmbeddingIndex):
    code = MODALITIES.index(index.modality)
    evs = np.ascontiguousarray(index.evs, dtype="<f4")
    parts = [EVDB_MAGIC, struct.pack("<BII", EVDB_VERSION, index.dim, len(index))]
    for i in range(len(index)):
        p = index.poses[i]
        parts.append(_ENTRY_HEAD.pack(int(index.sample_ids[i]), p.x, p.y, p.z, p.yaw, p.pitch,
                                      p.roll, code))
        parts.append(evs[i].tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_evdb(path, leaf_size: int = 8) -> EmbeddingIndex:
    """Load an EVDB file; EVs come back as the stored float32 values."""
    raw = Path(path).read_bytes()
    if raw[:4] != EVDB_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {EVDB_MAGIC!r}")
    if len(raw) < 13:
        raise DataError(f"{path}: truncated header")
    version, dim, count = struct.unpack_from("<BII", raw, 4)
    if version != EVDB_VERSION:
        raise DataError(f"{path}: unsupported EVDB version {version}")
    stride = _ENTRY_HEAD.size + 4 * dim
    if len(raw) != 13 + stride * count:
        raise DataError(f"{path}: expected {count} entries of dimension {dim}, "
                        f"file size {len(raw)}")
    if count == 0:
        raise DataError(f"{path}: empty database")
    entries, modality = [], None
    off = 13
    for _ in range(count):
        sid, x, y, z, yaw, pitch, roll, code = _ENTRY_HEAD.unpack_from(raw, off)
        if code >= len(MODALITIES):
            raise DataError(f"{path}: unknown modality code {code}")
        if modality is None:
            modality = MODALITIES[code]
        elif MODALITIES[code] != modality:
            raise DataError(f"{path}: mixed modalities in one database")
        ev = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + _ENTRY_HEAD.size)
        entries.append((ev.astype(np.float64), sid, Pose(x, y, z, yaw, pitch, roll)))
        off += stride
    return build_index(entries, modality, leaf_size)
