"""Synthetic token features: isotropic and clustered noise, patch samples.

Noise tokens are unit vectors. Isotropic tokens are uniform on the sphere.
Clustered tokens are ``normalize(concentration * center_g + z)`` with ``z``
uniform on the sphere and ``g`` constant over contiguous blocks of positions,
so neighbouring tokens share a direction. Each class ``i`` has one
discriminative pattern living on expert ``i``'s feature slice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from moelab.gating import GatingWeights, TokenBatch, affinity_scores
from moelab.rng import substream

__all__ = [
    "ISOTROPIC",
    "CLUSTERED",
    "PatternBank",
    "LabeledSample",
    "FalsePositiveRate",
    "slice_directions",
    "sample_isotropic",
    "sample_clustered",
    "cluster_of",
    "correlation_matrix",
    "make_pattern_bank",
    "make_sample",
    "estimate_fp_rate",
    "fp_noise",
]

ISOTROPIC = "isotropic"
CLUSTERED = "clustered"

_ISO_TAG = 11
_CLU_TAG = 12
_BANK_TAG = 13
_SAMPLE_TAG = 14
_FP_TAG = 15


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _sphere(rng: np.random.Generator, s: int, d: int) -> np.ndarray:
    return _unit_rows(rng.standard_normal((s, d)))


def slice_directions(d: int, n: int) -> np.ndarray:
    """Unit vectors along each expert's averaging row: ``1/sqrt(p)`` on slice ``i``."""
    if d < 1 or n < 1 or d % n:
        raise ValueError(f"n={n} must divide d={d}")
    p = d // n
    u = np.zeros((n, d))
    for i in range(n):
        u[i, i * p : (i + 1) * p] = 1.0 / np.sqrt(p)
    return u


def sample_isotropic(s: int, d: int, seed: int = 0) -> TokenBatch:
    """``s`` tokens uniform on the unit sphere in ``R^d``."""
    if s < 1 or d < 1:
        raise ValueError(f"s and d must be >= 1, got s={s}, d={d}")
    return TokenBatch(_sphere(substream(seed, 0, _ISO_TAG), s, d))


def cluster_of(s: int, n: int) -> np.ndarray:
    """Cluster index per position: contiguous blocks of ``round(s/n)`` positions, cycling over ``n``."""
    block = max(1, int(round(s / n)))
    return (np.arange(s) // block) % n


def _clustered_rows(rng, centers: np.ndarray, groups: np.ndarray, concentration: float) -> np.ndarray:
    z = _sphere(rng, groups.size, centers.shape[1])
    return _unit_rows(concentration * centers[groups] + z)


def sample_clustered(
    s: int,
    d: int,
    n: int,
    concentration: float,
    seed: int = 0,
    centers: np.ndarray | None = None,
) -> TokenBatch:
    """Block-clustered tokens around ``centers`` (default: the slice directions)."""
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    if concentration < 0:
        raise ValueError(f"concentration must be >= 0, got {concentration}")
    if centers is None:
        centers = slice_directions(d, n)
    elif centers.shape != (n, d):
        raise ValueError(f"centers must have shape {(n, d)}, got {centers.shape}")
    rng = substream(seed, 0, _CLU_TAG)
    return TokenBatch(_clustered_rows(rng, centers, cluster_of(s, n), concentration))


def correlation_matrix(batch) -> np.ndarray:
    """Pearson correlation between token rows, ``(s, s)``."""
    x = batch.tokens if isinstance(batch, TokenBatch) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two tokens")
    flat = np.flatnonzero(np.ptp(x, axis=1) == 0)
    if flat.size:
        raise ValueError(f"token {int(flat[0])} has zero variance")
    c = np.corrcoef(x)
    np.fill_diagonal(c, 1.0)
    return np.clip((c + c.T) / 2.0, -1.0, 1.0)


# -- patch data model -------------------------------------------------------


@dataclass(frozen=True)
class PatternBank:
    patterns: np.ndarray  # (n, d) unit rows, pattern i on slice i
    noise_kind: str = ISOTROPIC
    concentration: float = 0.0
    centers: np.ndarray | None = None  # (n, d) cluster centers for clustered noise

    def __post_init__(self):
        if self.noise_kind not in (ISOTROPIC, CLUSTERED):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        norms = np.linalg.norm(self.patterns, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("patterns must be unit vectors")
        if self.noise_kind == CLUSTERED and self.centers is None:
            object.__setattr__(self, "centers", slice_directions(self.d, self.n))

    @property
    def n(self) -> int:
        return self.patterns.shape[0]

    @property
    def d(self) -> int:
        return self.patterns.shape[1]


@dataclass(frozen=True)
class LabeledSample:
    batch: TokenBatch
    label: int
    disc_position: int


def _in_slice_orthonormal(rng, d: int, n: int, k: int) -> np.ndarray:
    """``k`` orthonormal directions per slice, all orthogonal to the slice's mean direction."""
    p = d // n
    if k > p - 1:
        raise ValueError(f"slice width {p} too small for {k} off-axis directions")
    out = np.zeros((n, k, d))
    for i in range(n):
        basis = np.hstack([np.ones((p, 1)), rng.standard_normal((p, k))])
        q, _ = np.linalg.qr(basis)
        out[i, :, i * p : (i + 1) * p] = q[:, 1:].T
    return out


def make_pattern_bank(
    d: int,
    n: int,
    alignment: float = 1.0,
    noise_kind: str = ISOTROPIC,
    concentration: float = 0.0,
    center_alignment: float = 1.0,
    seed: int = 0,
) -> PatternBank:
    """Build class patterns and (for clustered noise) cluster centers.

    Pattern ``i`` is ``alignment * u_i + sqrt(1 - alignment^2) * v_i`` where
    ``u_i`` is expert ``i``'s slice direction and ``v_i`` a unit vector inside
    the same slice orthogonal to ``u_i``; its affinity with expert ``i`` is
    exactly ``alignment`` and zero with every other expert. Cluster center
    ``g`` is built the same way from ``center_alignment`` with an off-axis
    direction orthogonal to ``v_g``.
    """
    if not 0 <= alignment <= 1 or not 0 <= center_alignment <= 1:
        raise ValueError("alignments must lie in [0, 1]")
    u = slice_directions(d, n)
    need = (alignment < 1) + (noise_kind == CLUSTERED and center_alignment < 1)
    off = _in_slice_orthonormal(substream(seed, 0, _BANK_TAG), d, n, need) if need else None
    patterns = u.copy()
    k = 0
    if alignment < 1:
        patterns = alignment * u + np.sqrt(1 - alignment**2) * off[:, k]
        k += 1
    centers = None
    if noise_kind == CLUSTERED:
        centers = u.copy()
        if center_alignment < 1:
            centers = center_alignment * u + np.sqrt(1 - center_alignment**2) * off[:, k]
    return PatternBank(_unit_rows(patterns), noise_kind, float(concentration), centers)


def _noise_rows(rng, bank: PatternBank, s: int, groups: np.ndarray | None) -> np.ndarray:
    if bank.noise_kind == ISOTROPIC:
        return _sphere(rng, s, bank.d)
    if groups is None:
        groups = rng.integers(0, bank.n, size=s)
    return _clustered_rows(rng, bank.centers, groups, bank.concentration)


def make_sample(s: int, d: int, bank: PatternBank, seed: int = 0, index: int = 0) -> LabeledSample:
    """One labelled sample: uniform position and label, pattern at that position, noise elsewhere.

    ``index`` selects an independent substream of ``seed``, so a training run
    draws sample ``j`` from ``(seed, j)`` without generating the ones before it.
    """
    if d != bank.d:
        raise ValueError(f"d={d} does not match pattern dimension {bank.d}")
    rng = substream(seed, index, _SAMPLE_TAG)
    position = int(rng.integers(0, s))
    label = int(rng.integers(0, bank.n))
    x = _noise_rows(rng, bank, s, cluster_of(s, bank.n))
    x[position] = bank.patterns[label]
    return LabeledSample(TokenBatch(x), label, position)


@dataclass(frozen=True)
class FalsePositiveRate:
    q_hat: np.ndarray
    std_error: np.ndarray
    trials: int


def fp_noise(bank: PatternBank, trials: int, seed: int = 0) -> np.ndarray:
    """The noise draws :func:`estimate_fp_rate` uses for ``(trials, seed)``."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    return _noise_rows(substream(seed, 0, _FP_TAG), bank, trials, None)


def estimate_fp_rate(bank: PatternBank, gw, trials: int = 10_000, seed: int = 0,
                     noise: np.ndarray | None = None) -> FalsePositiveRate:
    """Fraction of noise tokens scoring strictly above pattern ``i`` at expert ``i``.

    Pass ``noise`` (from :func:`fp_noise`) to reuse one set of draws across
    many router states.
    """
    w = gw.weights if isinstance(gw, GatingWeights) else np.asarray(gw, dtype=np.float64)
    if w.shape != bank.patterns.shape:
        raise ValueError(f"gating shape {w.shape} != pattern bank shape {bank.patterns.shape}")
    if noise is None:
        noise = fp_noise(bank, trials, seed)
    threshold = np.diag(affinity_scores(bank.patterns, w))
    q = np.mean(affinity_scores(noise, w) > threshold[None, :], axis=0)
    n_draws = noise.shape[0]
    return FalsePositiveRate(q, np.sqrt(q * (1 - q) / n_draws), n_draws)
