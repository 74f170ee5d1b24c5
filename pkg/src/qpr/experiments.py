"""Desk-scale noisy-label comparison of the training objectives on synthetic clusters."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .annindex import IvfIndex
from .datasetprep import generate_pairs, split_and_deleak
from .encoder import EncoderConfig, encode_batch
from .evaluation import EvalReport, evaluate
from .synthetic import split_for_noise, template_clusters
from .text import build_vocab, encode_ids, tokenize
from .train import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class NoisyBenchConfig:
    n_clusters: int = 1000
    noise: float = 0.1
    e_dim: int = 32
    c_dim: int = 32
    n: int = 32
    win: int = 5
    batch_size: int = 64
    max_epochs: int = 20
    patience: int = 3
    learning_rate: float = 1e-3
    V: int = 5000
    m: int = 500
    nlist: int = 16
    k: int = 20
    n_entities: int | None = None
    typo_rate: float = 0.0


@dataclass
class NoisyBenchData:
    train_pairs: list
    val_pairs: list
    corpus: list[str]
    queries: list[tuple[int, str]]
    gold: dict[int, set]


def build_noisy_data(bench: NoisyBenchConfig, seed: int) -> NoisyBenchData:
    """Synthetic clusters -> leak-free split -> split ``noise`` of the training clusters."""
    clusters = template_clusters(bench.n_clusters, seed=seed, n_entities=bench.n_entities,
                                  typo_rate=bench.typo_rate)
    splits = split_and_deleak(clusters, seed=seed)
    noisy_train = split_for_noise(splits.train, bench.noise, seed=seed)
    corpus = list(dict.fromkeys(q for c in clusters for q in c.questions))
    qid = {q: i for i, q in enumerate(corpus)}
    queries, gold = [], {}
    for c in splits.test:
        ids = {qid[q] for q in c.questions}
        if len(ids) < 2:
            continue
        for q in c.questions:
            queries.append((qid[q], q))
            gold[qid[q]] = ids - {qid[q]}
    return NoisyBenchData(generate_pairs(noisy_train), generate_pairs(splits.validation),
                          corpus, queries, gold)


def run_objective(
    data: NoisyBenchData, bench: NoisyBenchConfig, seed: int, objective: str, **overrides
) -> tuple[EvalReport, TrainResult]:
    train_questions = [q for pair in data.train_pairs for q in pair]
    vocab = build_vocab(train_questions, bench.V, bench.m)
    enc = EncoderConfig(e_dim=bench.e_dim, win=bench.win, c_dim=bench.c_dim, n=bench.n,
                        V=bench.V, m=bench.m)
    cfg = TrainConfig(learning_rate=bench.learning_rate, batch_size=bench.batch_size,
                      objective=objective, max_epochs=bench.max_epochs, patience=bench.patience,
                      seed=seed)
    cfg = replace(cfg, **overrides)
    result = train(data.train_pairs, data.val_pairs, vocab, enc, cfg)
    vecs = encode_batch([encode_ids(tokenize(q), vocab) for q in data.corpus], result.params)
    index = IvfIndex.train(vecs, bench.nlist, seed=seed)
    index.add_batch(np.arange(len(vecs)), vecs)
    report = evaluate(result.params, vocab, index, data.queries, data.gold, k=bench.k,
                      nprobe=bench.nlist)
    return report, result
