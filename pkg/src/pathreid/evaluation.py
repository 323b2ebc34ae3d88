"""Retrieval evaluation under the cross-camera protocol.

For each designated query, the gallery is every test state at a different
camera; an item is relevant iff it shares the query's vehicle identity.
Scores sort descending with ties broken by ascending state_id, so every
metric is deterministic. Scorers that expose proposals additionally get the
Jaccard overlap between proposed and ground-truth path state sets (AJS).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import Camera, Dataset, Sighting, camera_distance
from .errors import DataError


class Scorer(Protocol):
    name: str

    def scores(self, query: Sighting, gallery: Sequence[Sighting]) -> np.ndarray: ...


@dataclass(frozen=True)
class RankedResult:
    query_id: int
    gallery_ids: tuple[int, ...]  # descending score, ties by ascending state_id
    relevance: tuple[bool, ...]
    n_gt: int

    def first_hit_rank(self) -> int | None:
        for rank, rel in enumerate(self.relevance, start=1):
            if rel:
                return rank
        return None


def average_precision(relevance: Sequence[bool], n_gt: int) -> float:
    """Sum of precision-at-hit over the ranked relevance flags, over n_gt."""
    if n_gt < 1:
        raise ValueError("n_gt must be >= 1")
    if sum(bool(r) for r in relevance) > n_gt:
        raise ValueError("more relevant flags than ground-truth items")
    hits = 0
    total = 0.0
    for k, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += hits / k
    return total / n_gt


def mean_ap(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("mean of an empty AP list")
    return float(np.mean(values))


def cmc_topk(results: Sequence[RankedResult], k: int) -> float:
    """Fraction of queries with at least one relevant item in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no ranked results")
    hits = sum(1 for r in results if any(r.relevance[:k]))
    return hits / len(results)


def jaccard(set_a: set, set_b: set) -> float:
    if not set_a and not set_b:
        raise ValueError("Jaccard of two empty sets is undefined")
    return len(set_a & set_b) / len(set_a | set_b)


def ajs(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("no positive query pairs")
    return float(np.mean(values))


def str_baseline(
    t_i: float,
    t_j: float,
    cam_i: Camera,
    cam_j: Camera,
    t_max: float,
    d_max: float,
) -> float:
    """Hand-crafted spatio-temporal relation score (prior-work baseline)."""
    if not (t_max > 0 and d_max > 0):
        raise ValueError("normalizers must be positive")
    return (abs(t_i - t_j) / t_max) * (camera_distance(cam_i, cam_j) / d_max)


def ground_truth_path_ids(dataset: Dataset, a: Sighting, b: Sighting) -> frozenset[int]:
    """The vehicle's sighting ids (any camera) between the pair's timestamps."""
    if a.vehicle_id is None or a.vehicle_id != b.vehicle_id:
        raise ValueError("ground-truth path needs a same-identity pair")
    lo, hi = min(a.timestamp_s, b.timestamp_s), max(a.timestamp_s, b.timestamp_s)
    return frozenset(
        s.state_id
        for s in dataset.vehicle_states(a.vehicle_id)
        if lo <= s.timestamp_s <= hi
    )


@dataclass
class EvalReport:
    scorer: str
    map: float
    top1: float
    top5: float
    cmc: list[tuple[int, float]]
    ajs: float | None
    n_queries: int
    excluded_queries: list[int]
    per_query: list[dict]
    results: list[RankedResult] = field(repr=False, default_factory=list)

    def metrics_dict(self) -> dict:
        """Deterministically serializable metrics block."""
        out = {
            "scorer": self.scorer,
            "mAP": self.map,
            "top1": self.top1,
            "top5": self.top5,
            "cmc": [[k, acc] for k, acc in self.cmc],
            "n_queries": self.n_queries,
            "excluded_queries": list(self.excluded_queries),
            "per_query": self.per_query,
        }
        if self.ajs is not None:
            out["ajs"] = self.ajs
        return out


def rank_queries(
    scorer: Scorer,
    dataset: Dataset,
    cmc_max_k: int = 20,
    parallelism: int = 1,
) -> EvalReport:
    """Rank the full gallery for every query and aggregate retrieval metrics.

    Queries without any cross-camera ground truth are excluded and listed in
    the report. Jaccard values are collected per positive (query, relevant
    gallery item) pair when the scorer exposes proposal_state_ids.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    test_states = sorted(dataset.split_states("test"), key=lambda s: s.state_id)
    proposal_fn: Callable | None = getattr(scorer, "proposal_state_ids", None)

    def handle(query: Sighting):
        gallery = [
            s
            for s in test_states
            if s.camera_id != query.camera_id and s.state_id != query.state_id
        ]
        relevant = [
            query.vehicle_id is not None and s.vehicle_id == query.vehicle_id
            for s in gallery
        ]
        n_gt = sum(relevant)
        if n_gt == 0:
            return None
        scores = np.asarray(scorer.scores(query, gallery), dtype=np.float64)
        if scores.shape != (len(gallery),):
            raise ValueError("scorer returned wrong number of scores")
        if not np.all(np.isfinite(scores)):
            raise DataError(f"non-finite scores for query {query.state_id}")
        order = sorted(range(len(gallery)), key=lambda i: (-scores[i], gallery[i].state_id))
        flags = tuple(relevant[i] for i in order)
        result = RankedResult(
            query_id=query.state_id,
            gallery_ids=tuple(gallery[i].state_id for i in order),
            relevance=flags,
            n_gt=n_gt,
        )
        ap = average_precision(flags, n_gt)
        js_values = []
        if proposal_fn is not None:
            for g, rel in zip(gallery, relevant):
                if rel:
                    proposed = proposal_fn(query, g)
                    truth = ground_truth_path_ids(dataset, query, g)
                    js_values.append(jaccard(set(proposed), set(truth)))
        return result, ap, js_values

    queries = dataset.queries()
    if parallelism == 1:
        outcomes = [handle(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(handle, queries))

    results: list[RankedResult] = []
    aps: list[float] = []
    all_js: list[float] = []
    excluded: list[int] = []
    per_query: list[dict] = []
    for query, outcome in zip(queries, outcomes):
        if outcome is None:
            excluded.append(query.state_id)
            continue
        result, ap, js_values = outcome
        results.append(result)
        aps.append(ap)
        all_js.extend(js_values)
        per_query.append(
            {
                "query": query.state_id,
                "ap": ap,
                "n_gt": result.n_gt,
                "first_hit_rank": result.first_hit_rank(),
            }
        )
    if not results:
        raise DataError("no query has cross-camera ground truth")
    cmc = [(k, cmc_topk(results, k)) for k in range(1, cmc_max_k + 1)]
    return EvalReport(
        scorer=getattr(scorer, "name", scorer.__class__.__name__),
        map=mean_ap(aps),
        top1=cmc[0][1],
        top5=cmc[4][1] if cmc_max_k >= 5 else cmc[-1][1],
        cmc=cmc,
        ajs=ajs(all_js) if all_js else None,
        n_queries=len(results),
        excluded_queries=excluded,
        per_query=per_query,
        results=results,
    )
