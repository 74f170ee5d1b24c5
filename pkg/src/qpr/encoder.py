"""Convolutional sentence encoder with hand-written reverse-mode gradients.

The encoder maps a sequence of token ids to a vector in ``R^n``:

1. embedding lookup -> sentence matrix ``X`` (``l x e_dim``)
2. centered window convolution with zero same-padding and ``tanh``
   -> feature map (``l x c_dim``)
3. global max pool over positions, then a linear projection ``W_p`` (no bias)

Filter ``k`` is stored as row ``W[k]`` of length ``win * e_dim``; it is the
row-major flattening of a ``win x e_dim`` block whose row ``o`` multiplies the
embedding at offset ``o - win // 2`` from the centre position.

All math runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .text import MAX_LEN

MODEL_MAGIC = b"QPRENC\x00\x00"
MODEL_VERSION = 1
_HEADER = struct.Struct("<8sI7I")


class EmptyQuestionError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    e_dim: int = 300
    win: int = 5
    c_dim: int = 300
    n: int = 300
    V: int = 50_000
    m: int = 5_000
    max_len: int = MAX_LEN

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.win % 2 == 0:
            raise ValueError("win must be odd")

    @property
    def num_ids(self) -> int:
        return self.V + self.m


@dataclass
class EncoderParams:
    E: np.ndarray   # (V+m, e_dim)
    W: np.ndarray   # (c_dim, win*e_dim)
    b: np.ndarray   # (c_dim,)
    Wp: np.ndarray  # (n, c_dim)

    @property
    def e_dim(self) -> int:
        return self.E.shape[1]

    @property
    def win(self) -> int:
        return self.W.shape[1] // self.E.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.E.copy(), self.W.copy(), self.b.copy(), self.Wp.copy())

    def tensors(self) -> dict[str, np.ndarray]:
        return {"E": self.E, "W": self.W, "b": self.b, "Wp": self.Wp}

    def check_config(self, cfg: EncoderConfig) -> None:
        expected = {
            "E": (cfg.num_ids, cfg.e_dim),
            "W": (cfg.c_dim, cfg.win * cfg.e_dim),
            "b": (cfg.c_dim,),
            "Wp": (cfg.n, cfg.c_dim),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")


@dataclass
class Gradients:
    """Parameter gradients; the embedding gradient is kept sparse over touched rows."""

    E_rows: np.ndarray  # unique, sorted row ids
    E_vals: np.ndarray  # (len(E_rows), e_dim)
    W: np.ndarray
    b: np.ndarray
    Wp: np.ndarray

    def E_dense(self, num_rows: int) -> np.ndarray:
        out = np.zeros((num_rows, self.E_vals.shape[1]))
        out[self.E_rows] = self.E_vals
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in (self.E_vals, self.W, self.b, self.Wp))


def init_params(cfg: EncoderConfig, seed: int | np.random.Generator = 0) -> EncoderParams:
    """Embeddings U(-0.1, 0.1); W and W_p Glorot-uniform; zero bias."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    E = rng.uniform(-0.1, 0.1, size=(cfg.num_ids, cfg.e_dim))
    W = glorot(cfg.c_dim, cfg.win * cfg.e_dim)
    Wp = glorot(cfg.n, cfg.c_dim)
    return EncoderParams(E, W, np.zeros(cfg.c_dim), Wp)


# --- single-question reference path -------------------------------------------------

def embed_forward(ids: Sequence[int], params: EncoderParams) -> np.ndarray:
    if len(ids) == 0:
        raise EmptyQuestionError("empty question")
    return params.E[np.asarray(ids, dtype=np.int64)]


def conv_forward(X: np.ndarray, params: EncoderParams) -> np.ndarray:
    l, e = X.shape
    win = params.W.shape[1] // e
    half = win // 2
    Xp = np.vstack([np.zeros((half, e)), X, np.zeros((half, e))])
    windows = np.stack([Xp[i:i + win].reshape(-1) for i in range(l)])
    return np.tanh(windows @ params.W.T + params.b)


def maxpool_project(feature_map: np.ndarray, params: EncoderParams) -> np.ndarray:
    return params.Wp @ feature_map.max(axis=0)


def encode(ids: Sequence[int], params: EncoderParams) -> np.ndarray:
    return maxpool_project(conv_forward(embed_forward(ids, params), params), params)


# --- batched path --------------------------------------------------------------------

@dataclass
class ForwardCache:
    ids: np.ndarray     # (N, L) padded ids
    mask: np.ndarray    # (N, L) valid-position mask
    Xp: np.ndarray      # (N, L + win - 1, e_dim) zero-padded sentence matrices
    argmax: np.ndarray  # (N, c_dim) first argmax position per filter
    pooled: np.ndarray  # (N, c_dim)


def _pad_ids(seqs: Sequence[Sequence[int]], max_len: int | None):
    if max_len is not None:
        seqs = [s[:max_len] for s in seqs]
    lens = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
    if lens.size == 0:
        raise ValueError("empty batch")
    if (lens == 0).any():
        raise EmptyQuestionError("empty question")
    L = int(lens.max())
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    mask = np.arange(L)[None, :] < lens[:, None]
    return ids, mask


def forward_batch(
    seqs: Sequence[Sequence[int]], params: EncoderParams, max_len: int | None = MAX_LEN
) -> tuple[np.ndarray, ForwardCache]:
    """Encode ``N`` id sequences at once; rows do not interact."""
    ids, mask = _pad_ids(seqs, max_len)
    N, L = ids.shape
    e = params.e_dim
    win = params.win
    half = win // 2
    X = params.E[ids] * mask[:, :, None]
    Xp = np.zeros((N, L + 2 * half, e))
    Xp[:, half:half + L] = X
    pre = np.broadcast_to(params.b, (N, L, params.b.size)).copy()
    for o in range(win):
        pre += Xp[:, o:o + L] @ params.W[:, o * e:(o + 1) * e].T
    H = np.tanh(pre)
    H[~mask] = -np.inf
    argmax = H.argmax(axis=1)
    pooled = np.take_along_axis(H, argmax[:, None, :], axis=1)[:, 0, :]
    out = pooled @ params.Wp.T
    return out, ForwardCache(ids, mask, Xp, argmax, pooled)


def _sparse_rows(ids: np.ndarray, vals: np.ndarray):
    rows, inverse = np.unique(ids, return_inverse=True)
    acc = np.zeros((rows.size, vals.shape[1]))
    np.add.at(acc, inverse, vals)
    return rows, acc


def backward_batch(cache: ForwardCache, params: EncoderParams, grad_out: np.ndarray) -> Gradients:
    """Gradients of ``sum(grad_out * forward_batch(...))`` w.r.t. every parameter.

    Max-pool routes gradient only to the first argmax position of each filter.
    """
    N, L = cache.ids.shape
    e = params.e_dim
    win = params.win
    half = win // 2
    c = params.b.size

    gWp = grad_out.T @ cache.pooled
    g_pre = (grad_out @ params.Wp) * (1.0 - cache.pooled ** 2)  # (N, c)
    gb = g_pre.sum(axis=0)

    # A[n, p, k] = g_pre[n, k] at p == argmax[n, k], zero elsewhere
    A = np.zeros((N, L, c))
    A[np.arange(N)[:, None], cache.argmax, np.arange(c)[None, :]] = g_pre
    A2 = A.reshape(N * L, c)

    gW = np.empty_like(params.W)
    gXp = np.zeros_like(cache.Xp)
    for o in range(win):
        W_o = params.W[:, o * e:(o + 1) * e]
        gW[:, o * e:(o + 1) * e] = A2.T @ cache.Xp[:, o:o + L].reshape(N * L, e)
        gXp[:, o:o + L] += A @ W_o
    gX = gXp[:, half:half + L]
    rows, vals = _sparse_rows(cache.ids[cache.mask], gX[cache.mask])
    return Gradients(rows, vals, gW, gb, gWp)


def encode_batch(
    seqs: Sequence[Sequence[int]], params: EncoderParams, max_len: int | None = MAX_LEN,
    chunk: int = 1024,
) -> np.ndarray:
    if not seqs:
        return np.zeros((0, params.Wp.shape[0]))
    return np.vstack([forward_batch(seqs[i:i + chunk], params, max_len)[0]
                      for i in range(0, len(seqs), chunk)])


def encode_backward(ids: Sequence[int], params: EncoderParams, grad_out: np.ndarray) -> Gradients:
    _, cache = forward_batch([ids], params, max_len=None)
    return backward_batch(cache, params, np.asarray(grad_out, dtype=np.float64)[None, :])


def merge_gradients(parts: Sequence[Gradients]) -> Gradients:
    """Sum gradients from independent sub-batches in the given order."""
    first = parts[0]
    if len(parts) == 1:
        return first
    rows = np.concatenate([g.E_rows for g in parts])
    vals = np.concatenate([g.E_vals for g in parts])
    E_rows, E_vals = _sparse_rows(rows, vals)
    W, b, Wp = first.W.copy(), first.b.copy(), first.Wp.copy()
    for g in parts[1:]:
        W += g.W
        b += g.b
        Wp += g.Wp
    return Gradients(E_rows, E_vals, W, b, Wp)


# --- model file ----------------------------------------------------------------------
#
# Layout (little-endian):
#   8s   magic  b"QPRENC\0\0"
#   u32  format version
#   u32  e_dim, win, c_dim, n, V, m, max_len
#   f64  E (V+m, e_dim), W (c_dim, win*e_dim), b (c_dim,), Wp (n, c_dim), row-major

def save_model(path: str | Path, cfg: EncoderConfig, params: EncoderParams) -> None:
    params.check_config(cfg)
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, cfg.e_dim, cfg.win, cfg.c_dim, cfg.n,
                          cfg.V, cfg.m, cfg.max_len)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (params.E, params.W, params.b, params.Wp):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | Path) -> tuple[EncoderConfig, EncoderParams]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated model header")
    magic, version, *dims = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    cfg = EncoderConfig(*dims)
    shapes = [(cfg.num_ids, cfg.e_dim), (cfg.c_dim, cfg.win * cfg.e_dim), (cfg.c_dim,),
              (cfg.n, cfg.c_dim)]
    total = sum(int(np.prod(s)) for s in shapes)
    if len(data) != _HEADER.size + 8 * total:
        raise ValueError(f"{path}: model payload size mismatch")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    arrays, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[pos:pos + size].reshape(s).copy())
        pos += size
    return cfg, EncoderParams(*arrays)
