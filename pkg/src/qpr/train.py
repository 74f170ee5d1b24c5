"""Adam training over shuffled pair batches with early stopping on validation ROC AUC."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.stats import rankdata

from .encoder import (EncoderConfig, EncoderParams, Gradients, backward_batch, encode_batch,
                      forward_batch, init_params, merge_gradients)
from .loss import (DistanceVariant, Mining, PairBatch, SdmlConfig, TripletConfig, mine_negatives,
                   sdml_loss, triplet_batch_loss)
from .text import Vocabulary, encode_ids, tokenize

log = logging.getLogger(__name__)

OBJECTIVES = ("sdml", "triplet_random", "triplet_hard")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class InsufficientDataError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 512
    objective: str = "sdml"
    epsilon: float = 0.3
    alpha: float = 0.5
    distance: str = "ssd"
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        # raise early on invalid loss settings
        SdmlConfig(self.epsilon, self.batch_size)
        TripletConfig(self.alpha, DistanceVariant(self.distance))

    @property
    def sdml(self) -> SdmlConfig:
        return SdmlConfig(self.epsilon, self.batch_size)

    @property
    def triplet(self) -> TripletConfig:
        mining = Mining.HARD if self.objective == "triplet_hard" else Mining.RANDOM
        return TripletConfig(self.alpha, DistanceVariant(self.distance), mining)


# --- batching --------------------------------------------------------------------------

def make_pair_batches(
    pairs: Sequence[tuple[str, str]], N: int, seed: int, epoch: int = 0
) -> Iterator[list[tuple[str, str]]]:
    """Shuffle pairs for ``epoch`` and yield consecutive chunks of ``N``; the short tail is dropped.

    Each pair is flipped with probability 1/2 so both members serve as anchors
    over time. When a question string appears in two pairs of one chunk, every
    offending pair is swapped once with a random pair from the rest of the
    epoch; the chunk is then accepted as is.
    """
    if len(pairs) < N:
        raise InsufficientDataError(f"insufficient training pairs: {len(pairs)} < batch size {N}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pairs))
    flip = rng.random(len(pairs)) < 0.5
    oriented = [(b, a) if f else (a, b) for (a, b), f in ((pairs[i], flip[i]) for i in range(len(pairs)))]
    order_list = order.tolist()
    n_batches = len(pairs) // N
    for k in range(n_batches):
        lo, hi = k * N, (k + 1) * N
        seen: set[str] = set()
        for pos in range(lo, hi):
            a, b = oriented[order_list[pos]]
            if (a in seen or b in seen) and hi < len(order_list):
                swap = int(rng.integers(hi, len(order_list)))
                order_list[pos], order_list[swap] = order_list[swap], order_list[pos]
                a, b = oriented[order_list[pos]]
            seen.add(a)
            seen.add(b)
        yield [oriented[i] for i in order_list[lo:hi]]


# --- optimizer ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors().items()},
                   {k: np.zeros_like(a) for k, a in params.tensors().items()})


def adam_step(params: EncoderParams, grads: Gradients, state: AdamState, lr: float) -> EncoderParams:
    """Bias-corrected Adam update applied in place; rows of E without gradient see g = 0."""
    if not grads.is_finite():
        raise NonFiniteGradientError(f"non-finite gradient at step {state.t + 1}")
    state.t += 1
    b1, b2 = ADAM_BETA1, ADAM_BETA2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    dense = {"W": grads.W, "b": grads.b, "Wp": grads.Wp}
    for name, p in params.tensors().items():
        m, v = state.m[name], state.v[name]
        m *= b1
        v *= b2
        if name == "E":
            m[grads.E_rows] += (1.0 - b1) * grads.E_vals
            v[grads.E_rows] += (1.0 - b2) * grads.E_vals ** 2
        else:
            g = dense[name]
            m += (1.0 - b1) * g
            v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params


# --- validation --------------------------------------------------------------------------

def roc_auc(pos_scores, neg_scores, exact_limit: int = 10_000) -> float:
    """P(positive scores above negative), ties counted 1/2.

    Exact concordance counting up to ``exact_limit`` positives, the
    Mann-Whitney rank statistic above that.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    if pos.size <= exact_limit:
        neg_sorted = np.sort(neg)
        below = np.searchsorted(neg_sorted, pos, side="left")
        ties = np.searchsorted(neg_sorted, pos, side="right") - below
        return float((below.sum() + 0.5 * ties.sum()) / (pos.size * neg.size))
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


class _Tokenized:
    """Question -> id sequence cache."""

    def __init__(self, vocab: Vocabulary, max_len: int):
        self.vocab = vocab
        self.max_len = max_len
        self._cache: dict[str, list[int]] = {}

    def __call__(self, q: str) -> list[int]:
        ids = self._cache.get(q)
        if ids is None:
            ids = encode_ids(tokenize(q), self.vocab, self.max_len)
            if not ids:
                raise ValueError(f"question tokenizes to nothing: {q!r}")
            self._cache[q] = ids
        return ids


def validation_auc(
    params: EncoderParams, val_pairs: Sequence[tuple[str, str]], vocab: Vocabulary, seed: int,
    max_len: int = 64, tokenized: _Tokenized | None = None,
) -> float:
    """AUC of ``-SSD`` between validation paraphrase pairs vs. one random non-pair each."""
    tok = tokenized or _Tokenized(vocab, max_len)
    questions = list(dict.fromkeys(q for pair in val_pairs for q in pair))
    if len(questions) < 3:
        raise ValueError("need at least three distinct validation questions")
    index = {q: i for i, q in enumerate(questions)}
    vecs = encode_batch([tok(q) for q in questions], params, max_len)
    rng = np.random.default_rng(seed)
    a = np.array([index[p[0]] for p in val_pairs])
    b = np.array([index[p[1]] for p in val_pairs])
    neg = rng.integers(0, len(questions), size=len(val_pairs))
    clash = (neg == a) | (neg == b)
    while clash.any():
        neg[clash] = rng.integers(0, len(questions), size=int(clash.sum()))
        clash = (neg == a) | (neg == b)
    pos_scores = -((vecs[a] - vecs[b]) ** 2).sum(1)
    neg_scores = -((vecs[a] - vecs[neg]) ** 2).sum(1)
    return roc_auc(pos_scores, neg_scores)


# --- training loop -----------------------------------------------------------------------

def batch_loss_and_grads(
    params: EncoderParams, left: Sequence[Sequence[int]], right: Sequence[Sequence[int]],
    cfg: TrainConfig, rng: np.random.Generator, max_len: int = 64,
    pool: ThreadPoolExecutor | None = None,
) -> tuple[float, Gradients]:
    """Encode the 2N questions of a batch, evaluate the objective, backpropagate."""
    seqs = list(left) + list(right)
    N = len(left)
    if pool is None or cfg.workers == 1:
        chunks = [seqs]
    else:
        size = -(-len(seqs) // cfg.workers)
        chunks = [seqs[i:i + size] for i in range(0, len(seqs), size)]
    run = pool.map if pool is not None and len(chunks) > 1 else map
    fwd = list(run(lambda s: forward_batch(s, params, max_len), chunks))
    out = np.vstack([f[0] for f in fwd])
    batch = PairBatch(out[:N], out[N:])
    if cfg.objective == "sdml":
        loss, g_left, g_right = sdml_loss(batch, cfg.sdml)
    else:
        tcfg = cfg.triplet
        neg = mine_negatives(batch, tcfg.mining, rng)
        loss, g_left, g_right = triplet_batch_loss(batch, neg, tcfg)
    g_out = np.vstack([g_left, g_right])
    bounds = np.cumsum([0] + [len(c) for c in chunks])
    grads = list(run(lambda j: backward_batch(fwd[j][1], params, g_out[bounds[j]:bounds[j + 1]]),
                     range(len(chunks))))
    return loss, merge_gradients(grads)


@dataclass
class TrainResult:
    params: EncoderParams
    best_epoch: int
    best_auc: float
    log: list[dict] = field(default_factory=list)


def _save_state(path, epoch, params, best, state, best_auc, best_epoch, bad, records):
    arrays = {f"p_{k}": a for k, a in params.tensors().items()}
    arrays.update({f"best_{k}": a for k, a in best.tensors().items()})
    arrays.update({f"m_{k}": a for k, a in state.m.items()})
    arrays.update({f"v_{k}": a for k, a in state.v.items()})
    meta = {"epoch": epoch, "t": state.t, "best_auc": best_auc, "best_epoch": best_epoch,
            "bad": bad, "log": records}
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    tmp.replace(path)


def _load_state(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        get = lambda prefix: EncoderParams(*(z[f"{prefix}_{k}"].copy() for k in ("E", "W", "b", "Wp")))
        params, best = get("p"), get("best")
        state = AdamState({k: z[f"m_{k}"].copy() for k in ("E", "W", "b", "Wp")},
                          {k: z[f"v_{k}"].copy() for k in ("E", "W", "b", "Wp")}, meta["t"])
    return meta, params, best, state


def train(
    train_pairs: Sequence[tuple[str, str]],
    val_pairs: Sequence[tuple[str, str]],
    vocab: Vocabulary,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    init: EncoderParams | None = None,
    log_path: str | Path | None = None,
    state_path: str | Path | None = None,
    resume: bool = False,
) -> TrainResult:
    """Train until validation AUC stops improving for ``patience`` epochs.

    Returns the parameters of the best-AUC epoch (never the initial weights).
    With ``state_path`` the full optimizer state is written after each epoch;
    ``resume=True`` continues from it and reproduces an uninterrupted run.
    """
    if enc_cfg.num_ids != vocab.num_ids:
        raise ValueError("encoder config does not match vocabulary size")
    tok = _Tokenized(vocab, enc_cfg.max_len)
    seq_of = {q: tok(q) for pair in train_pairs for q in pair}

    if resume and state_path and Path(state_path).exists():
        meta, params, best, state = _load_state(state_path)
        start, best_auc, best_epoch, bad = meta["epoch"] + 1, meta["best_auc"], meta["best_epoch"], meta["bad"]
        records = meta["log"]
        if bad >= cfg.patience:
            return TrainResult(best, best_epoch, best_auc, records)
    else:
        params = init.copy() if init is not None else init_params(enc_cfg, cfg.seed)
        params.check_config(enc_cfg)
        state = AdamState.zeros_like(params)
        best, best_auc, best_epoch, bad, start = params.copy(), -np.inf, 0, 0, 1
        auc0 = validation_auc(params, val_pairs, vocab, cfg.seed, enc_cfg.max_len, tok)
        records = [{"epoch": 0, "train_loss": None, "val_auc": auc0, "steps": 0, "wall_time": 0.0}]
        log.info("epoch 0 val_auc=%.4f", auc0)

    if log_path:
        Path(log_path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(start, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch, 1])
            losses = []
            aborted = None
            for chunk in make_pair_batches(train_pairs, cfg.batch_size, cfg.seed, epoch):
                left = [seq_of[a] for a, _ in chunk]
                right = [seq_of[b] for _, b in chunk]
                loss, grads = batch_loss_and_grads(params, left, right, cfg, rng, enc_cfg.max_len, pool)
                try:
                    adam_step(params, grads, state, cfg.learning_rate)
                except NonFiniteGradientError as exc:
                    aborted = str(exc)
                    log.warning("epoch %d aborted: %s", epoch, exc)
                    break
                losses.append(loss)
            auc = validation_auc(params, val_pairs, vocab, cfg.seed, enc_cfg.max_len, tok)
            if auc > best_auc:
                best, best_auc, best_epoch, bad = params.copy(), auc, epoch, 0
            else:
                bad += 1
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                   "val_auc": auc, "steps": len(losses), "wall_time": time.perf_counter() - t0}
            if aborted:
                rec["aborted"] = aborted
            records.append(rec)
            log.info("epoch %d loss=%s val_auc=%.4f", epoch, rec["train_loss"], auc)
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if state_path:
                _save_state(state_path, epoch, params, best, state, best_auc, best_epoch, bad, records)
            if bad >= cfg.patience:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(best, best_epoch, float(best_auc), records)
