"""Nearest-neighbor retrieval over embedding vectors."""
from .index import (EVDB_MAGIC, EmbeddingIndex, QueryResult, build_index, cross_modal_query,
                    embed_samples, index_samples, knn_query, read_evdb, write_evdb)
from .kdtree import BACKENDS, DEFAULT_BACKEND, KDTree

__all__ = ["BACKENDS", "DEFAULT_BACKEND", "EVDB_MAGIC", "EmbeddingIndex", "KDTree", "QueryResult",
           "build_index", "cross_modal_query", "embed_samples", "index_samples", "knn_query",
           "read_evdb", "write_evdb"]
