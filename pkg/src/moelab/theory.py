"""Training-success probabilities for token-choice and expert-choice routing.

A sample holds ``s`` tokens: one class-discriminative token ``o_i`` (type
``i`` and position ``k`` both uniform) and ``s - 1`` class-irrelevant tokens.

* TCR: ``o_i`` reaches expert ``i`` with probability ``p_i``; every irrelevant
  token goes to a uniformly random expert. The sample succeeds when ``o_i``
  picks expert ``i`` and fewer than ``C`` earlier tokens were sent there.
* ECR: each irrelevant token outscores ``o_i`` at expert ``i`` with probability
  ``q_i``. The sample succeeds when at most ``C - 1`` irrelevant tokens do.

Exact values, a brute-force enumerator for small cases, Monte-Carlo
estimators and the closed-form bounds of the two success rates live here.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from moelab.rng import substream

__all__ = [
    "SimSpec",
    "SuccessEstimate",
    "TheoremBounds",
    "tcr_success_exact",
    "tcr_success_bruteforce",
    "tcr_success_mc",
    "ecr_success_exact",
    "ecr_success_mc",
    "theorem_bounds",
    "chernoff_tails",
    "MC_CHUNK",
]

# trials per counter-based substream; fixed so results do not depend on workers
MC_CHUNK = 1 << 16

_TCR_TAG = 1
_ECR_TAG = 2


@dataclass(frozen=True)
class SimSpec:
    s: int
    n: int
    C: int
    p: tuple[float, ...] = ()
    q: tuple[float, ...] = ()
    trials: int = 100_000
    seed: int = 0
    # test-only escape hatch for probabilities outside [1/n, 1]
    check_p: bool = field(default=True, compare=False)

    def __post_init__(self):
        if self.s < 1 or self.n < 1 or self.C < 1:
            raise ValueError(f"need s, n, C >= 1 (got s={self.s}, n={self.n}, C={self.C})")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        p = _broadcast(self.p, self.n, 1.0 / self.n, "p")
        q = _broadcast(self.q, self.n, 0.0, "q")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        lo = 1.0 / self.n if self.check_p else 0.0
        for i, pi in enumerate(p):
            if not (lo - 1e-12 <= pi <= 1.0):
                raise ValueError(f"p[{i}]={pi} outside [{lo:g}, 1]")
        for i, qi in enumerate(q):
            if not (0.0 <= qi <= 1.0):
                raise ValueError(f"q[{i}]={qi} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("check_p")
        d["p"] = list(self.p)
        d["q"] = list(self.q)
        return d


def _broadcast(values, n: int, default: float, name: str) -> tuple[float, ...]:
    if values is None:
        return (float(default),) * n
    if np.ndim(values) == 0:
        return (float(values),) * n
    if len(values) == 0:
        return (float(default),) * n
    values = tuple(float(v) for v in values)
    if len(values) == 1:
        return values * n
    if len(values) != n:
        raise ValueError(f"{name} has {len(values)} entries, expected 1 or n={n}")
    return values


@dataclass(frozen=True)
class TheoremBounds:
    tcr_lower: float
    tcr_upper: float
    tcr_lower_valid: bool
    tcr_upper_valid: bool
    ecr_upper_tail: float
    ecr_upper_valid: bool
    ecr_lower_tail: float
    ecr_lower_valid: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SuccessEstimate:
    estimate: float
    std_error: float
    trials: int
    successes: int
    exact: float | None = None
    bounds: TheoremBounds | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.bounds is not None:
            d["bounds"] = self.bounds.to_dict()
        return d


# -- exact values -----------------------------------------------------------


def tcr_success_exact(spec: SimSpec) -> float:
    """Exact TCR success probability.

    ``(1/(n s)) * sum_i p_i * sum_{k=1..s} P(Bin(k-1, 1/n) <= C-1)``. The
    binomial CDF is evaluated by scipy's regularized incomplete beta, which
    stays accurate for ``s`` up to 1e5 and beyond.
    """
    s, n, C = spec.s, spec.n, spec.C
    if s > 10**7:
        raise ValueError(f"s={s} too large for exact summation")
    if C >= s:
        inner = float(s)
    else:
        # positions 1..C always succeed; only k > C can see C earlier tokens
        k_minus_1 = np.arange(C, s, dtype=np.float64)
        tail = stats.binom.cdf(C - 1, k_minus_1, 1.0 / n)
        inner = C + math.fsum(tail.tolist())
    return math.fsum(spec.p) * inner / (n * s)


def tcr_success_bruteforce(spec: SimSpec) -> float:
    """Exact TCR success by enumerating every routing of irrelevant tokens.

    Walks all ``n**(s-1)`` assignments of the irrelevant tokens to experts,
    every position of the discriminative token and every type. Independent of
    any binomial formula; meant for ``s <= 12``, ``n <= 4``.
    """
    s, n, C = spec.s, spec.n, spec.C
    if n ** (s - 1) > 1 << 24:
        raise ValueError(f"n**(s-1) = {n ** (s - 1)} routes is too many to enumerate")
    m = s - 1
    codes = np.arange(n**m, dtype=np.int64)
    total = 0.0
    for i, pi in enumerate(spec.p):
        # running[r] = irrelevant tokens of route r sent to expert i so far
        running = np.zeros(codes.shape[0], dtype=np.int16)
        good = int(np.count_nonzero(running < C))  # discriminative token first
        for j in range(m):
            running += ((codes // n**j) % n == i).astype(np.int16)
            good += int(np.count_nonzero(running < C))
        total += pi * good
    return total / (n * s * n**m)


def ecr_success_exact(spec: SimSpec) -> float:
    """Exact ECR success: ``(1/n) * sum_i P(Bin(s-1, q_i) <= C-1)``."""
    q = np.asarray(spec.q, dtype=np.float64)
    cdf = stats.binom.cdf(spec.C - 1, spec.s - 1, q)
    return math.fsum(np.atleast_1d(cdf).tolist()) / spec.n


# -- Monte Carlo ------------------------------------------------------------


def _chunks(trials: int) -> list[tuple[int, int]]:
    return [(j, min(MC_CHUNK, trials - j * MC_CHUNK)) for j in range(-(-trials // MC_CHUNK))]


def _run_chunks(kernel, spec: SimSpec, tag: int, workers: int) -> int:
    jobs = _chunks(spec.trials)

    def run(job):
        j, size = job
        return kernel(substream(spec.seed, j, tag), size)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(run, jobs))
    else:
        counts = [run(job) for job in jobs]
    return int(sum(counts))


def _estimate(successes: int, trials: int, exact: float, bounds: TheoremBounds) -> SuccessEstimate:
    est = successes / trials
    return SuccessEstimate(
        estimate=est,
        std_error=math.sqrt(est * (1.0 - est) / trials),
        trials=trials,
        successes=successes,
        exact=exact,
        bounds=bounds,
    )


def tcr_success_mc(spec: SimSpec, workers: int = 1, with_exact: bool = True) -> SuccessEstimate:
    """Monte-Carlo TCR success rate.

    Per trial: position ``k ~ U{1..s}``, type ``i ~ U{0..n-1}``; success iff
    ``U < p_i`` and ``Bin(k-1, 1/n) < C``. Trials are split in fixed chunks of
    :data:`MC_CHUNK`, chunk ``j`` drawing from substream ``j`` of the seed.
    """
    p = np.asarray(spec.p, dtype=np.float64)
    s, n, C = spec.s, spec.n, spec.C

    def kernel(rng: np.random.Generator, size: int) -> int:
        k = rng.integers(1, s + 1, size=size)
        i = rng.integers(0, n, size=size)
        routed = rng.random(size) < p[i]
        earlier = rng.binomial(k - 1, 1.0 / n)
        return int(np.count_nonzero(routed & (earlier < C)))

    hits = _run_chunks(kernel, spec, _TCR_TAG, workers)
    exact = tcr_success_exact(spec) if with_exact else None
    return _estimate(hits, spec.trials, exact, theorem_bounds(spec))


def ecr_success_mc(spec: SimSpec, workers: int = 1, with_exact: bool = True) -> SuccessEstimate:
    """Monte-Carlo ECR success rate: ``i ~ U[n]``, ``Bin(s-1, q_i) <= C-1``."""
    q = np.asarray(spec.q, dtype=np.float64)
    s, n, C = spec.s, spec.n, spec.C

    def kernel(rng: np.random.Generator, size: int) -> int:
        i = rng.integers(0, n, size=size)
        outscored = rng.binomial(s - 1, q[i])
        return int(np.count_nonzero(outscored <= C - 1))

    hits = _run_chunks(kernel, spec, _ECR_TAG, workers)
    exact = ecr_success_exact(spec) if with_exact else None
    return _estimate(hits, spec.trials, exact, theorem_bounds(spec))


# -- bounds -----------------------------------------------------------------


def theorem_bounds(spec: SimSpec) -> TheoremBounds:
    """Closed-form bounds on both success rates, each with its validity flag.

    TCR: ``C * sum(p) / (5 s) <= P <= 10 C sum(p) / s``, the lower side
    requiring ``C >= 48``. ECR: ``P <= mean_i exp(-(s-1) q_i / 8)`` when
    ``C <= (s-1) q_i / 2 + 1`` for all i, and ``P >= 1 - exp(-3C/16)`` when
    ``C >= 2 (s-1) q_i`` for all i.

    The TCR lower bound sums over positions ``1 + nC/4 <= k <= 1 + nC/2``, so
    besides ``C >= 48`` it needs those positions to exist: ``2 (s-1) >= n C``.
    """
    s, n, C = spec.s, spec.n, spec.C
    psum = math.fsum(spec.p)
    q = spec.q
    return TheoremBounds(
        tcr_lower=C * psum / (5 * s),
        tcr_upper=10 * C * psum / s,
        tcr_lower_valid=C >= 48 and 2 * (s - 1) >= n * C,
        tcr_upper_valid=True,
        ecr_upper_tail=math.fsum(math.exp(-(s - 1) * qi / 8) for qi in q) / n,
        ecr_upper_valid=all(C <= (s - 1) * qi / 2 + 1 for qi in q),
        ecr_lower_tail=1.0 - math.exp(-3 * C / 16),
        ecr_lower_valid=all(C >= 2 * (s - 1) * qi for qi in q),
    )


def chernoff_tails(expectation: float, lam: float) -> tuple[float, float]:
    """Chernoff bounds for a sum of independent Bernoulli variables.

    Returns ``(lower, upper)`` where ``P(X <= E - lam) <= lower`` and
    ``P(X >= E + lam) <= upper``.
    """
    if expectation < 0:
        raise ValueError(f"expectation must be >= 0, got {expectation}")
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    # X >= 0, so the event X <= -lam is empty when E = 0
    lower = 0.0 if expectation == 0 else math.exp(-lam * lam / (2 * expectation))
    upper = math.exp(-lam * lam / (2 * (expectation + lam / 3)))
    return lower, upper
