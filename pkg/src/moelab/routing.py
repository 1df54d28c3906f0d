"""Token-choice, expert-choice and hybrid dispatch under a capacity bound.

All routers read an ``(s, n)`` score matrix and return a :class:`DispatchPlan`.
Ties are always broken toward the lower index (expert index for a token's
choice, token index for an expert's choice), so plans are deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TCR",
    "ECR",
    "HYBRID",
    "DispatchPlan",
    "CapacityEstimate",
    "route_tcr",
    "route_ecr",
    "route_hybrid",
    "capacity_lower_bound",
    "adaptive_capacity",
    "DELTA_CLAMP",
]

TCR = "TCR"
ECR = "ECR"
HYBRID = "HYBRID"

DELTA_CLAMP = 1.0 - 1e-6


@dataclass(frozen=True)
class DispatchPlan:
    mode: str
    capacity: int
    experts: tuple[tuple[int, ...], ...]
    dropped: tuple[tuple[int, int], ...] = ()
    ell_star: tuple[int, ...] = ()
    num_tokens: int = 0

    @property
    def n(self) -> int:
        return len(self.experts)

    @property
    def slots(self) -> int:
        """Token-expert pairs actually processed."""
        return sum(len(e) for e in self.experts)

    def pairs(self) -> list[tuple[int, int]]:
        """``(token, expert)`` pairs in expert-major order."""
        return [(t, i) for i, lst in enumerate(self.experts) for t in lst]

    def expert_of(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for t, i in self.pairs():
            out.setdefault(t, []).append(i)
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "capacity": self.capacity,
            "experts": [list(e) for e in self.experts],
            "dropped": [list(d) for d in self.dropped],
            "ell_star": list(self.ell_star),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict, num_tokens: int = 0) -> DispatchPlan:
        return cls(
            mode=d["mode"],
            capacity=int(d["capacity"]),
            experts=tuple(tuple(int(t) for t in e) for e in d["experts"]),
            dropped=tuple((int(t), int(i)) for t, i in d["dropped"]),
            ell_star=tuple(int(v) for v in d.get("ell_star", ())),
            num_tokens=num_tokens,
        )


def _check_scores(scores) -> np.ndarray:
    a = np.asarray(scores, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"scores must be a non-empty s x n matrix, got shape {a.shape}")
    return a


def _check_capacity(C, name="C") -> int:
    if C < 1:
        raise ValueError(f"{name} must be >= 1, got {C}")
    return int(C)


def _group_first_c(tok: np.ndarray, exp: np.ndarray, n: int, C: int):
    """Split (token, expert) candidates per expert, keep the C lowest token indices."""
    order = np.lexsort((tok, exp))
    tok, exp = tok[order], exp[order]
    counts = np.bincount(exp, minlength=n)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(tok.size) - starts[exp]
    keep = rank < C
    experts = tuple(tuple(tok[keep & (exp == i)].tolist()) for i in range(n))
    dropped = sorted(zip(tok[~keep].tolist(), exp[~keep].tolist()))
    return experts, tuple(dropped)


def route_tcr(scores, ell: int = 1, C: int = 1) -> DispatchPlan:
    """Token choice: each token picks its top-``ell`` experts, each expert keeps its first ``C`` arrivals."""
    a = _check_scores(scores)
    s, n = a.shape
    if not 1 <= ell <= n:
        raise ValueError(f"ell must be in [1, {n}], got {ell}")
    C = _check_capacity(C)
    # stable sort on -score: equal scores keep ascending expert order
    top = np.argsort(-a, axis=1, kind="stable")[:, :ell]
    tok = np.repeat(np.arange(s), ell)
    experts, dropped = _group_first_c(tok, top.ravel(), n, C)
    return DispatchPlan(TCR, C, experts, dropped, num_tokens=s)


def route_ecr(scores, C: int = 1) -> DispatchPlan:
    """Expert choice: each expert takes the ``min(C, s)`` best-scoring tokens, best first."""
    a = _check_scores(scores)
    s, n = a.shape
    C = _check_capacity(C)
    k = min(C, s)
    order = np.argsort(-a, axis=0, kind="stable")[:k]
    experts = tuple(tuple(order[:, i].tolist()) for i in range(n))
    return DispatchPlan(ECR, C, experts, (), num_tokens=s)


def route_hybrid(scores, C_max: int, theta: float = 0.7) -> DispatchPlan:
    """Token-choice assignment, then per-expert truncation by a score-mass threshold.

    Stage 1 sends every token to its top-1 expert without a capacity limit.
    Stage 2 ranks each expert's tokens by ``(score + 1) / 2`` and keeps the
    shortest prefix carrying at least ``theta`` of that expert's total, capped
    at ``C_max``. Kept lists are reported in token order; ``ell_star`` holds
    the kept length per expert.
    """
    a = _check_scores(scores)
    s, n = a.shape
    C_max = _check_capacity(C_max, "C_max")
    if not 0 < theta <= 1:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    base = route_tcr(a, 1, s)
    experts: list[tuple[int, ...]] = []
    dropped: list[tuple[int, int]] = []
    ell_star: list[int] = []
    for i, toks in enumerate(base.experts):
        if not toks:
            experts.append(())
            ell_star.append(0)
            continue
        idx = np.asarray(toks)
        sigma = (a[idx, i] + 1.0) / 2.0
        order = np.argsort(-sigma, kind="stable")
        if theta >= 1.0:
            ell = idx.size
        else:
            cum = np.cumsum(sigma[order])
            ell = int(np.searchsorted(cum, theta * cum[-1], side="left")) + 1
        ell = min(ell, idx.size, C_max)
        kept = np.sort(idx[order[:ell]])
        experts.append(tuple(kept.tolist()))
        dropped.extend((int(t), i) for t in idx[order[ell:]])
        ell_star.append(ell)
    return DispatchPlan(HYBRID, C_max, tuple(experts), tuple(sorted(dropped)), tuple(ell_star), num_tokens=s)


# -- capacity ---------------------------------------------------------------


@dataclass(frozen=True)
class CapacityEstimate:
    c_min_real: float
    c_effective: int
    delta_max: float
    d: int
    n: int
    # EMA state: number of batches folded in and the latest raw batch maximum
    updates: int = 0
    last_batch_max: float | None = None


def capacity_lower_bound(d: int, n: int, delta_max: float) -> CapacityEstimate:
    """``C_min = exp(d δ² / (2 - δ²)) / n``; the usable capacity is ``max(1, ceil(C_min))``."""
    if d < 1 or n < 1:
        raise ValueError(f"d and n must be positive, got d={d}, n={n}")
    if not 0 <= delta_max < 1:
        raise ValueError(f"delta_max must be in [0, 1), got {delta_max}")
    dd = delta_max * delta_max
    exponent = d * dd / (2.0 - dd)
    try:
        c_min = math.exp(exponent) / n
    except OverflowError:
        c_min = math.inf
    c_eff = max(1, math.ceil(c_min)) if math.isfinite(c_min) else np.iinfo(np.int64).max
    return CapacityEstimate(c_min, int(c_eff), delta_max, d, n)


def adaptive_capacity(
    scores,
    theta: float,
    prev: CapacityEstimate,
    ema_alpha: float = 1.0,
) -> CapacityEstimate:
    """Update the capacity estimate from one batch of scores.

    ``delta_max`` tracks an exponential moving average of the batch's largest
    affinity (the first batch sets it directly). The capacity is the lower
    bound for that ``delta_max``, capped by the largest hybrid prefix length
    ``ell*`` of this batch.
    """
    a = _check_scores(scores)
    if not 0 < ema_alpha <= 1:
        raise ValueError(f"ema_alpha must be in (0, 1], got {ema_alpha}")
    if a.shape[1] != prev.n:
        raise ValueError(f"scores have {a.shape[1]} experts, estimate has {prev.n}")
    batch_max = float(np.max(a))
    if prev.updates == 0:
        delta = batch_max
    else:
        delta = ema_alpha * batch_max + (1.0 - ema_alpha) * prev.delta_max
    delta = min(max(delta, 0.0), DELTA_CLAMP)
    bound = capacity_lower_bound(prev.d, prev.n, delta)
    plan = route_hybrid(a, a.shape[0], theta)
    cap = max(1, max(plan.ell_star))
    return CapacityEstimate(
        c_min_real=bound.c_min_real,
        c_effective=min(bound.c_effective, cap),
        delta_max=delta,
        d=prev.d,
        n=prev.n,
        updates=prev.updates + 1,
        last_batch_max=batch_max,
    )
