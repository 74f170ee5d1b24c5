"""Retrieval metrics (P@N, truncated MRR) and the end-to-end evaluation loop."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annindex import IvfIndex
from .encoder import EncoderParams, forward_batch
from .text import Vocabulary, encode_ids, tokenize


def _scored(results, gold):
    if len(results) < len(gold):
        raise ValueError("fewer result lists than queries")
    return [(r, g) for r, g in zip(results, gold) if g]


def precision_at_n(results: Sequence[Sequence[int]], gold: Sequence[set], N: int) -> float:
    """Fraction of queries with at least one gold id among the first ``N`` results.

    Queries with an empty gold set are left out of the mean.
    """
    scored = _scored(results, gold)
    if not scored:
        return 0.0
    return sum(any(i in g for i in r[:N]) for r, g in scored) / len(scored)


def first_hit_rank(retrieved: Sequence[int], gold: set, k: int) -> int | None:
    for rank, i in enumerate(retrieved[:k], start=1):
        if i in gold:
            return rank
    return None


def mrr(results: Sequence[Sequence[int]], gold: Sequence[set], k: int = 20) -> float:
    """Mean of 1/rank of the first gold id within the top ``k``; 0 when there is none."""
    scored = _scored(results, gold)
    if not scored:
        return 0.0
    total = 0.0
    for r, g in scored:
        rank = first_hit_rank(r, g, k)
        total += 1.0 / rank if rank else 0.0
    return total / len(scored)


@dataclass
class EvalReport:
    p_at_1: float
    p_at_10: float
    mrr: float
    k: int
    nprobe: int
    n_queries: int
    n_excluded: int
    records: list[dict] = field(default_factory=list)
    latency_ms: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"p_at_1": self.p_at_1, "p_at_10": self.p_at_10, "mrr": self.mrr, "k": self.k,
                "nprobe": self.nprobe, "n_queries": self.n_queries, "n_excluded": self.n_excluded}

    def write(self, path: str | Path) -> None:
        """Summary record then one record per query, in query-id order."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"type": "summary", **self.summary()}, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps({"type": "query", **rec}, sort_keys=True) + "\n")

    def table(self) -> str:
        rows = [("queries", f"{self.n_queries}"), ("P@1", f"{self.p_at_1:.4f}"),
                ("P@10", f"{self.p_at_10:.4f}"), (f"MRR@{self.k}", f"{self.mrr:.4f}")]
        rows += [(f"latency {k}", f"{v:.3f} ms") for k, v in self.latency_ms.items()]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)


def evaluate(
    params: EncoderParams,
    vocab: Vocabulary,
    index: IvfIndex,
    queries: Sequence[tuple[int, str]],
    gold: Mapping[int, set],
    k: int = 20,
    nprobe: int = 32,
    max_len: int = 64,
) -> EvalReport:
    """Encode each query, retrieve the top ``k`` (its own id excluded) and score.

    Latency covers encoding plus search for a single query.
    """
    nprobe = min(nprobe, index.nlist)
    results, golds, records, lat = [], [], [], []
    for qid, text in sorted(queries):
        ids = encode_ids(tokenize(text), vocab, max_len)
        g = set(gold.get(qid, ()))
        g.discard(qid)
        t0 = time.perf_counter()
        vec = forward_batch([ids], params, max_len)[0][0]
        hits = index.search(vec, k + 1, nprobe)
        lat.append(time.perf_counter() - t0)
        retrieved = [i for i, _ in hits if i != qid][:k]
        results.append(retrieved)
        golds.append(g)
        records.append({"query_id": qid, "retrieved": retrieved,
                        "first_hit_rank": first_hit_rank(retrieved, g, k) if g else None,
                        "gold_size": len(g)})
    lat_ms = np.asarray(lat) * 1e3
    latency = {}
    if lat_ms.size:
        latency = {f"p{q}": float(np.percentile(lat_ms, q)) for q in (50, 90, 99)}
        latency["mean"] = float(lat_ms.mean())
    excluded = sum(1 for g in golds if not g)
    return EvalReport(
        p_at_1=precision_at_n(results, golds, 1),
        p_at_10=precision_at_n(results, golds, 10),
        mrr=mrr(results, golds, k),
        k=k, nprobe=nprobe, n_queries=len(golds) - excluded, n_excluded=excluded,
        records=records, latency_ms=latency,
    )
