"""Paraphrase clusters: transitive construction, coherence filtering, leak-free splits.

Input formats
-------------
* Quora-style pair TSV with header ``id qid1 qid2 question1 question2 is_duplicate``.
* Cluster records, one JSON object per line: ``{"cluster_id": ..., "questions": [...]}``.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

from .text import normalize, tokenize

QUORA_COLUMNS = ["id", "qid1", "qid2", "question1", "question2", "is_duplicate"]


class DataError(ValueError):
    """Malformed or unusable input data."""


class UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, x: str) -> str:
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def coherence(questions: Sequence[str]) -> float:
    """Mean over questions of |unique tokens of q| / |union of all tokens in the cluster|."""
    token_sets = [set(tokenize(q)) for q in questions]
    if not token_sets:
        raise DataError("cluster has no questions")
    union = set().union(*token_sets)
    if not union:
        raise DataError("empty token sets")
    return sum(len(t & union) for t in token_sets) / (len(token_sets) * len(union))


@dataclass
class QuestionCluster:
    cluster_id: str
    questions: tuple[str, ...]
    coherence: float = field(init=False)

    def __post_init__(self):
        self.questions = tuple(dict.fromkeys(self.questions))
        if not self.questions:
            raise DataError(f"cluster {self.cluster_id} is empty")
        self.coherence = coherence(self.questions)

    def to_record(self) -> dict:
        return {"cluster_id": self.cluster_id, "questions": list(self.questions),
                "coherence": self.coherence}


def transitive_clusters(pairs: Iterable[tuple[str, str, bool]]) -> tuple[list[QuestionCluster], list[str]]:
    """Connected components of the positive-pair graph.

    Returns the clusters and every question seen (negative-only ones included),
    both in order of first appearance.
    """
    uf = UnionFind()
    seen: dict[str, None] = {}
    for a, b, label in pairs:
        seen.setdefault(a)
        seen.setdefault(b)
        if label:
            uf.union(a, b)
    groups: dict[str, list[str]] = {}
    for q in seen:
        if q in uf.parent:
            groups.setdefault(uf.find(q), []).append(q)
    clusters = [QuestionCluster(str(i), tuple(members)) for i, members in enumerate(groups.values())]
    return clusters, list(seen)


def filter_clusters(clusters: Sequence[QuestionCluster], threshold: float = 0.1):
    """Keep clusters with coherence >= threshold; also return a rejection report."""
    kept, rejected = [], []
    for c in clusters:
        if c.coherence >= threshold:
            kept.append(c)
        else:
            rejected.append({"cluster_id": c.cluster_id, "coherence": c.coherence,
                             "size": len(c.questions)})
    return kept, rejected


def generate_pairs(clusters: Iterable[QuestionCluster]) -> list[tuple[str, str]]:
    """All unordered within-cluster pairs, in cluster then position order."""
    return [pair for c in clusters for pair in combinations(c.questions, 2)]


@dataclass
class DatasetSplits:
    train: list[QuestionCluster]
    validation: list[QuestionCluster]
    test: list[QuestionCluster]
    removed: int = 0  # val/test questions dropped for overlapping an earlier split

    def pairs(self, split: str) -> list[tuple[str, str]]:
        return generate_pairs(getattr(self, split))


def split_and_deleak(
    clusters: Sequence[QuestionCluster],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplits:
    """Shuffle whole clusters into train/validation/test and remove leaked questions.

    A validation question is removed if its normalized form occurs in train; a
    test question if it occurs in train or validation.
    """
    if len(clusters) < 10:
        raise DataError(f"need at least 10 clusters to split, got {len(clusters)}")
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ValueError("ratios must be positive and sum to 1")
    order = list(clusters)
    random.Random(seed).shuffle(order)
    n = len(order)
    n_train = round(n * ratios[0])
    n_val = round(n * ratios[1])
    train = order[:n_train]
    val = order[n_train:n_train + n_val]
    test = order[n_train + n_val:]

    seen = {normalize(q) for c in train for q in c.questions}
    removed = 0
    out = []
    for part in (val, test):
        cleaned = []
        for c in part:
            keep = tuple(q for q in c.questions if normalize(q) not in seen)
            removed += len(c.questions) - len(keep)
            if keep:
                cleaned.append(QuestionCluster(c.cluster_id, keep))
        seen |= {normalize(q) for c in cleaned for q in c.questions}
        out.append(cleaned)

    splits = DatasetSplits(train, out[0], out[1], removed)
    for name in ("train", "validation", "test"):
        if not any(len(c.questions) >= 2 for c in getattr(splits, name)):
            raise DataError(f"{name} split has no cluster with two or more questions")
    return splits


# --- file formats -----------------------------------------------------------------

def read_quora_tsv(path: str | Path) -> list[tuple[str, str, bool]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != QUORA_COLUMNS:
            raise DataError(f"{path}:1: expected header {QUORA_COLUMNS}, got {header}")
        pairs = []
        for row in reader:
            if len(row) != len(QUORA_COLUMNS) or row[5] not in ("0", "1"):
                raise DataError(f"{path}:{reader.line_num}: malformed row")
            pairs.append((row[3], row[4], row[5] == "1"))
    return pairs


def read_cluster_records(path: str | Path) -> list[QuestionCluster]:
    clusters = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                questions = rec["questions"]
                if not isinstance(questions, list) or not all(isinstance(q, str) for q in questions):
                    raise TypeError("questions must be a list of strings")
                clusters.append(QuestionCluster(str(rec["cluster_id"]), tuple(questions)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed cluster record ({exc})") from exc
    return clusters


def write_cluster_records(path: str | Path, clusters: Iterable[QuestionCluster]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in clusters:
            fh.write(json.dumps(c.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def write_pairs(path: str | Path, pairs: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["question1", "question2"])
        writer.writerows(pairs)


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        if next(reader, None) != ["question1", "question2"]:
            raise DataError(f"{path}:1: bad pair file header")
        out = []
        for row in reader:
            if len(row) != 2:
                raise DataError(f"{path}:{reader.line_num}: malformed pair row")
            out.append((row[0], row[1]))
    return out


def write_corpus(path: str | Path, questions: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "question"])
        writer.writerows(enumerate(questions))


def read_corpus(path: str | Path) -> list[tuple[int, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        if next(reader, None) != ["id", "question"]:
            raise DataError(f"{path}:1: bad corpus header")
        out = []
        for row in reader:
            try:
                out.append((int(row[0]), row[1]))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{reader.line_num}: malformed corpus row") from exc
    return out
