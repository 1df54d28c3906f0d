"""Load-balancing and locality regularizers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from moelab.routing import DispatchPlan

__all__ = [
    "LoadStats",
    "NodeDistribution",
    "aux_loss",
    "locality_loss",
    "load_stats",
    "node_distribution",
    "expert_nodes",
    "LOCALITY_EPS",
]

LOCALITY_EPS = 1e-8


@dataclass(frozen=True)
class LoadStats:
    f: np.ndarray  # fraction of tokens whose argmax expert is i
    P: np.ndarray  # mean gate probability on expert i
    T: int

    @property
    def n(self) -> int:
        return self.f.shape[0]


@dataclass(frozen=True)
class NodeDistribution:
    current: np.ndarray
    localized: np.ndarray
    expert_to_node: np.ndarray

    def __post_init__(self):
        for name in ("current", "localized"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a probability vector, got {v}")
            object.__setattr__(self, name, v)
        if self.current.shape != self.localized.shape:
            raise ValueError("current and localized must have the same number of nodes")

    @property
    def m(self) -> int:
        return self.current.shape[0]


def aux_loss(stats: LoadStats, alpha: float) -> float:
    """``alpha * n * sum_i f_i P_i``."""
    return float(alpha * stats.n * math.fsum((stats.f * stats.P).tolist()))


def locality_loss(nd: NodeDistribution, mu: float, eps: float = LOCALITY_EPS) -> float:
    """``mu * KL(current || localized)``, the target floored at ``eps``."""
    c = nd.current
    target = np.maximum(nd.localized, eps)
    mask = c > 0
    return float(mu * math.fsum((c[mask] * np.log(c[mask] / target[mask])).tolist()))


def load_stats(gate_probs, plan: DispatchPlan | None = None) -> LoadStats:
    """Argmax fractions and mean gate mass per expert.

    ``plan`` is only used to check shapes; ``f`` comes from the gate argmax
    (lower index on ties), not from what survived the capacity limit.
    """
    g = np.asarray(gate_probs, dtype=np.float64)
    T, n = g.shape
    if plan is not None and plan.n != n:
        raise ValueError(f"plan has {plan.n} experts, gate matrix has {n}")
    f = np.bincount(np.argmax(g, axis=1), minlength=n) / T
    return LoadStats(f=f, P=g.mean(axis=0), T=T)


def expert_nodes(n: int, m: int) -> np.ndarray:
    """Place ``n`` experts on ``m`` nodes in contiguous groups."""
    if m < 1 or m > n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    return (np.arange(n) * m) // n


def node_distribution(plan: DispatchPlan, expert_to_node, local_node: int = 0) -> NodeDistribution:
    """Realized traffic per node from a plan, against an all-local target."""
    e2n = np.asarray(expert_to_node, dtype=np.int64)
    if e2n.shape[0] != plan.n:
        raise ValueError(f"expert_to_node has {e2n.shape[0]} entries, plan has {plan.n} experts")
    m = int(e2n.max()) + 1
    counts = np.zeros(m)
    for i, lst in enumerate(plan.experts):
        counts[e2n[i]] += len(lst)
    localized = np.zeros(m)
    localized[local_node] = 1.0
    # nothing dispatched: treat the traffic as already local
    current = counts / counts.sum() if counts.sum() > 0 else localized.copy()
    return NodeDistribution(current, localized, e2n)
