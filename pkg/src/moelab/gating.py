"""Grouped-average-pooling gating weights and token-expert affinities.

Expert ``i`` owns the contiguous feature slice ``[i*p, (i+1)*p)`` with
``p = d / n``; its weight row averages that slice, so the rows have disjoint
supports and are mutually orthogonal. Routing scores are cosine similarities
between tokens and these rows.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from moelab.rng import substream

__all__ = [
    "TokenBatch",
    "GatingWeights",
    "ZeroNormTokenError",
    "TokenFileError",
    "grap_weights",
    "affinity_scores",
    "gate_probabilities",
    "softmax",
    "load_tokens",
    "save_tokens_csv",
    "save_tokens_bin",
]


class ZeroNormTokenError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"zero-norm token at index {index}")
        self.index = index


class TokenFileError(ValueError):
    """Unreadable token file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class TokenBatch:
    tokens: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.tokens, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"tokens must be a non-empty s x d matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            row = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise ValueError(f"non-finite feature in token {row}")
        object.__setattr__(self, "tokens", x)

    @property
    def s(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class GatingWeights:
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    @property
    def p(self) -> int:
        return self.d // self.n


def grap_weights(d: int, n: int) -> GatingWeights:
    """Row ``i`` is ``1/p`` on slice ``i`` and zero elsewhere, so ``W @ x`` is the per-group mean."""
    if d <= 0 or n <= 0:
        raise ValueError(f"d and n must be positive, got d={d}, n={n}")
    if d % n:
        raise ValueError(f"n={n} does not divide d={d}")
    p = d // n
    w = np.zeros((n, d))
    for i in range(n):
        w[i, i * p : (i + 1) * p] = 1.0 / p
    return GatingWeights(w)


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, TokenBatch):
        return x.tokens
    if isinstance(x, GatingWeights):
        return x.weights
    return np.asarray(x, dtype=np.float64)


def affinity_scores(batch, gw) -> np.ndarray:
    """Cosine similarity of every token with every expert row, shape ``(s, n)``."""
    x = _as_matrix(batch)
    w = _as_matrix(gw)
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"token dim {x.shape[1]} != gating dim {w.shape[1]}")
    xn = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(xn == 0)
    if zero.size:
        raise ZeroNormTokenError(int(zero[0]))
    wn = np.linalg.norm(w, axis=1)
    if np.any(wn == 0):
        raise ValueError(f"gating row {int(np.flatnonzero(wn == 0)[0])} has zero norm")
    scores = (x / xn[:, None]) @ (w / wn[:, None]).T
    return np.clip(scores, -1.0, 1.0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def gate_probabilities(scores: np.ndarray, noise_std: float = 0.0, seed: int = 0) -> np.ndarray:
    """Row-wise softmax of ``scores`` plus zero-mean Gaussian noise."""
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    logits = np.asarray(scores, dtype=np.float64)
    if noise_std > 0:
        logits = logits + noise_std * substream(seed, 0, 0x6A7E).standard_normal(logits.shape)
    return softmax(logits, axis=1)


# -- token files ------------------------------------------------------------

_BIN_HEADER = struct.Struct("<II")


def load_tokens(path) -> TokenBatch:
    """Read a token file: ``.bin``/``.f32`` raw float32, anything else CSV."""
    path = Path(path)
    if path.suffix in (".bin", ".f32"):
        return _load_bin(path)
    return _load_csv(path)


def _load_csv(path: Path) -> TokenBatch:
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, fields in enumerate(csv.reader(fh), start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            try:
                row = [float(f) for f in fields]
            except ValueError:
                raise TokenFileError(f"non-numeric field in {fields!r}", lineno) from None
            if rows and len(row) != len(rows[0]):
                raise TokenFileError(f"expected {len(rows[0])} features, got {len(row)}", lineno)
            if not all(np.isfinite(row)):
                raise TokenFileError("non-finite feature", lineno)
            rows.append(row)
    if not rows:
        raise TokenFileError("no tokens")
    return TokenBatch(np.array(rows))


def _load_bin(path: Path) -> TokenBatch:
    raw = path.read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise TokenFileError("no tokens")
    s, d = _BIN_HEADER.unpack_from(raw)
    if s == 0 or d == 0:
        raise TokenFileError("no tokens")
    body = raw[_BIN_HEADER.size :]
    if len(body) != 4 * s * d:
        raise TokenFileError(f"header says {s}x{d} floats ({4 * s * d} bytes), body has {len(body)}")
    x = np.frombuffer(body, dtype="<f4").reshape(s, d).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise TokenFileError(f"non-finite feature in token {int(np.argwhere(~np.isfinite(x))[0, 0])}")
    return TokenBatch(x)


def save_tokens_csv(batch, path) -> None:
    x = _as_matrix(batch)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in x:
            writer.writerow([repr(float(v)) for v in row])


def save_tokens_bin(batch, path) -> None:
    x = _as_matrix(batch)
    s, d = x.shape
    Path(path).write_bytes(_BIN_HEADER.pack(s, d) + x.astype("<f4").tobytes())
