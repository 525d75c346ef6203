"""Recall@k evaluation over ordered run pairs.

Every run is embedded once per modality into an :class:`EmbeddingIndex`
whose EVs are rounded to float32, the precision of the EVDB file, so a
report computed from a checkpoint and one recomputed from the written
databases are bit-identical.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datamodel import SAME_PLACE_M, is_same_place, spacing_indices
from .retrieval import build_index, embed_samples, knn_query

K_MAX = 25
DB_SPACING = 5.0
SPARSE_DB_SPACING = 20.0
SPARSE_QUERY_SPACING = 10.0
# query modality, database modality
PAIRINGS = {"2d2d": ("image", "image"), "2d3d": ("image", "cloud"),
            "3d2d": ("cloud", "image"), "3d3d": ("cloud", "cloud")}
PAIRING_LABELS = {"2d2d": "2D-to-2D", "2d3d": "2D-to-3D", "3d2d": "3D-to-2D",
                  "3d3d": "3D-to-3D"}


def one_percent_k(db_size: int) -> int:
    if db_size < 1:
        raise ValueError("db_size must be >= 1")
    return max(1, math.ceil(0.01 * db_size))


def first_hit_ranks(results, query_poses, threshold=SAME_PLACE_M) -> list:
    """1-based rank of the first same-place entry per query, or None."""
    ranks = []
    for res, qp in zip(results, query_poses):
        hit = None
        for r, pose in enumerate(res.poses, start=1):
            if is_same_place(qp, pose, threshold):
                hit = r
                break
        ranks.append(hit)
    return ranks


def recall_at_k(results, query_poses, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    results = list(results)
    if not results:
        raise ValueError("recall_at_k: no queries")
    ranks = first_hit_ranks(results, query_poses)
    return sum(r is not None and r <= k for r in ranks) / len(ranks)


def recall_at_one_percent(results, query_poses, db_size: int) -> float:
    return recall_at_k(results, query_poses, one_percent_k(db_size))


@dataclass(frozen=True)
class RecallReport:
    pairing: str
    db_run: str
    query_run: str
    db_size: int
    n_queries: int
    recall: tuple = ()  # recall@k for k = 1..k_max
    recall_1pct: float = 0.0
    k_1pct: int = 1
    condition: str = ""

    @property
    def empty(self):
        return self.n_queries == 0

    def at(self, k: int) -> float:
        return self.recall[k - 1]

    def to_record(self):
        return {"pairing": self.pairing, "db_run": self.db_run, "query_run": self.query_run,
                "db_size": self.db_size, "n_queries": self.n_queries, "empty": self.empty,
                "k_1pct": self.k_1pct, "recall_1pct": self.recall_1pct,
                "recall": list(self.recall), "condition": self.condition}


@dataclass
class RunEmbeddings:
    """EmbeddingIndex objects of one run, keyed by modality."""

    run_id: str
    condition: str = ""
    indexes: dict = field(default_factory=dict)


def embed_run(run, params, enc, modalities=("image", "cloud")) -> RunEmbeddings:
    out = RunEmbeddings(run.run_id, run.condition)
    for m in modalities:
        evs = embed_samples(run.samples, m, params, enc).astype(np.float32).astype(np.float64)
        out.indexes[m] = build_index([(ev, s.sample_id, s.pose)
                                      for ev, s in zip(evs, run.samples)], m)
    return out


def _sub_index(index, keep):
    return build_index([(index.evs[i], index.sample_ids[i], index.poses[i]) for i in keep],
                       index.modality)


def evaluate_indexes(db_index, query_index, regions, pairing: str, k_max: int = K_MAX,
                     db_spacing: float | None = DB_SPACING,
                     query_spacing: float | None = None, db_run="", query_run="",
                     condition="") -> RecallReport:
    """Core of the protocol, on already-embedded runs."""
    db_keep = spacing_indices(db_index.poses, db_spacing) if db_spacing else \
        range(len(db_index))
    db = _sub_index(db_index, db_keep)
    boxes = [r for r in regions if r.split == "validation"]
    q_keep = [i for i, p in enumerate(query_index.poses)
              if any(b.contains(p.x, p.y) for b in boxes)]
    if query_spacing and q_keep:
        sub = spacing_indices([query_index.poses[i] for i in q_keep], query_spacing)
        q_keep = [q_keep[i] for i in sub]
    k1 = one_percent_k(len(db))
    if not q_keep:
        return RecallReport(pairing, db_run, query_run, len(db), 0, (), 0.0, k1, condition)
    depth = min(max(k_max, k1), len(db))
    qposes = [query_index.poses[i] for i in q_keep]
    results = [knn_query(db, query_index.evs[i], depth) for i in q_keep]
    ranks = first_hit_ranks(results, qposes)
    n = len(ranks)

    def rec(k):
        return sum(r is not None and r <= k for r in ranks) / n

    return RecallReport(pairing, db_run, query_run, len(db), n,
                        tuple(rec(k) for k in range(1, k_max + 1)), rec(k1), k1, condition)


def evaluate_run_pair(db_run, query_run, regions, params, enc, pairing: str = "2d2d",
                      k_max: int = K_MAX, db_spacing=DB_SPACING, query_spacing=None):
    if db_run.run_id == query_run.run_id:
        raise ValueError("database and query runs must differ")
    q_mod, db_mod = PAIRINGS[pairing]
    db = embed_run(db_run, params, enc, (db_mod,)).indexes[db_mod]
    q = embed_run(query_run, params, enc, (q_mod,)).indexes[q_mod]
    return evaluate_indexes(db, q, regions, pairing, k_max, db_spacing, query_spacing,
                            db_run.run_id, query_run.run_id, query_run.condition)


@dataclass
class Evaluation:
    pairs: list  # RecallReport per ordered pair and pairing
    summary: dict  # pairing -> averaged figures
    db_spacing: float | None = DB_SPACING
    query_spacing: float | None = None


def _mean(values):
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def summarize(reports, k_max: int = K_MAX) -> dict:
    """Unweighted means over non-empty pairs (fsum, so pair order does not matter)."""
    out = {}
    for pairing in PAIRINGS:
        rs = [r for r in reports if r.pairing == pairing and not r.empty]
        if not [r for r in reports if r.pairing == pairing]:
            continue
        out[pairing] = {
            "pairs": len(rs),
            "empty_pairs": sum(r.pairing == pairing and r.empty for r in reports),
            "recall": [_mean(r.recall[k] for r in rs) for k in range(k_max)],
            "recall_1pct": _mean(r.recall_1pct for r in rs),
            "queries": sum(r.n_queries for r in rs),
            "db_size_min": min((r.db_size for r in rs), default=0),
            "db_size_max": max((r.db_size for r in rs), default=0),
        }
    return out


def evaluate_embedded(embedded, regions, pairings=tuple(PAIRINGS), k_max: int = K_MAX,
                      db_spacing=DB_SPACING, query_spacing=None, workers: int = 1) -> Evaluation:
    """All ordered pairs of distinct runs for each pairing."""
    embedded = sorted(embedded, key=lambda e: e.run_id)
    if len(embedded) < 2:
        raise ValueError("need at least 2 runs")
    jobs = [(p, a, b) for p in pairings for a in embedded for b in embedded
            if a.run_id != b.run_id]

    def work(job):
        p, db, q = job
        q_mod, db_mod = PAIRINGS[p]
        return evaluate_indexes(db.indexes[db_mod], q.indexes[q_mod], regions, p, k_max,
                                db_spacing, query_spacing, db.run_id, q.run_id, q.condition)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(work, jobs))  # map keeps job order
    else:
        reports = [work(j) for j in jobs]
    return Evaluation(reports, summarize(reports, k_max), db_spacing, query_spacing)


def evaluate_all_pairs(runs, regions, params, enc, pairings=tuple(PAIRINGS), k_max=K_MAX,
                       db_spacing=DB_SPACING, query_spacing=None, workers=1) -> Evaluation:
    mods = sorted({m for p in pairings for m in PAIRINGS[p]})
    embedded = [embed_run(r, params, enc, mods) for r in runs]
    return evaluate_embedded(embedded, regions, pairings, k_max, db_spacing, query_spacing,
                             workers)


def protocol_comparison_mode(runs, regions, params, enc, **kw) -> Evaluation:
    """Sparse protocol: 20 m database spacing, 10 m query spacing."""
    return evaluate_all_pairs(runs, regions, params, enc, db_spacing=SPARSE_DB_SPACING,
                              query_spacing=SPARSE_QUERY_SPACING, **kw)


# -- report text ---------------------------------------------------------------


def report_records(ev: Evaluation) -> str:
    """One JSON line per pair per pairing."""
    return "".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in ev.pairs)


def summary_table(ev: Evaluation) -> str:
    """Recall@1%, recall@1 and recall@5 (percent) per modality pairing."""
    lines = [f"# db spacing {ev.db_spacing} m, query spacing {ev.query_spacing or 'all'}",
             f"{'pairing':<10} {'pairs':>5} {'queries':>7} {'db size':>9} "
             f"{'R@1%':>7} {'R@1':>7} {'R@5':>7}"]
    for p, s in ev.summary.items():
        r = s["recall"]
        r5 = r[4] if len(r) >= 5 else r[-1]
        lines.append(f"{PAIRING_LABELS[p]:<10} {s['pairs']:>5d} {s['queries']:>7d} "
                     f"{s['db_size_min']:>4d}-{s['db_size_max']:<4d} "
                     f"{100 * s['recall_1pct']:7.2f} {100 * r[0]:7.2f} {100 * r5:7.2f}")
    return "\n".join(lines) + "\n"


def curve_csv(ev: Evaluation) -> str:
    """Mean recall@k for k = 1..k_max, one column per pairing."""
    cols = list(ev.summary)
    k_max = len(next(iter(ev.summary.values()))["recall"]) if cols else 0
    rows = ["k," + ",".join(cols)]
    for k in range(k_max):
        rows.append(f"{k + 1}," + ",".join(repr(ev.summary[c]["recall"][k]) for c in cols))
    return "\n".join(rows) + "\n"
