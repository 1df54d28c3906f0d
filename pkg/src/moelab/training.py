"""Toy mixture-of-experts classifier trained on the synthetic patch model.

The router scores tokens by cosine affinity with its weight rows (GrAP at
initialization), gates are the softmax of those scores, and each expert is a
linear classifier. A sample's logits are the mean, over dispatched
token-expert slots, of ``gate * expert(x)``. Dispatch decisions are treated
as constants when differentiating.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from moelab import losses
from moelab.gating import affinity_scores, grap_weights, softmax
from moelab.routing import (
    ECR,
    HYBRID,
    TCR,
    CapacityEstimate,
    DispatchPlan,
    adaptive_capacity,
    capacity_lower_bound,
    route_ecr,
    route_hybrid,
    route_tcr,
)
from moelab.rng import substream
from moelab.synthetic import (
    CLUSTERED,
    LabeledSample,
    PatternBank,
    estimate_fp_rate,
    fp_noise,
    make_pattern_bank,
    make_sample,
)

__all__ = [
    "RouterMode",
    "ToyMoE",
    "TrainConfig",
    "MetricsLog",
    "TrainingDiverged",
    "init_model",
    "dispatch",
    "forward",
    "loss_and_grads",
    "grad_check",
    "switch_policy",
    "train",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = (
    "step",
    "task_loss",
    "aux_loss",
    "loc_loss",
    "dispatch_success",
    "capacity",
    "mode",
    "q_hat_max",
)

_INIT_TAG = 21


@dataclass(frozen=True)
class RouterMode:
    kind: str
    capacity: int
    theta: float = 0.7

    def __post_init__(self):
        if self.kind not in (TCR, ECR, HYBRID):
            raise ValueError(f"unknown router mode {self.kind!r}")
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")

    def label(self) -> str:
        if self.kind == HYBRID:
            return f"{self.kind}({self.capacity},{self.theta:g})"
        return f"{self.kind}({self.capacity})"


@dataclass
class ToyMoE:
    router: np.ndarray  # (n, d)
    A: np.ndarray  # (n experts, n classes, d)
    b: np.ndarray  # (n experts, n classes)
    mode: RouterMode
    learn_router: bool = True

    @property
    def n(self) -> int:
        return self.router.shape[0]

    @property
    def d(self) -> int:
        return self.router.shape[1]

    def copy(self) -> ToyMoE:
        return ToyMoE(self.router.copy(), self.A.copy(), self.b.copy(), self.mode, self.learn_router)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.router, self.A, self.b):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


def init_model(d: int, n: int, mode: RouterMode, init_scale: float = 0.01, seed: int = 0,
               learn_router: bool = True) -> ToyMoE:
    rng = substream(seed, 0, _INIT_TAG)
    A = init_scale * rng.standard_normal((n, n, d))
    return ToyMoE(grap_weights(d, n).weights.copy(), A, np.zeros((n, n)), mode, learn_router)


def dispatch(scores: np.ndarray, mode: RouterMode) -> DispatchPlan:
    if mode.kind == TCR:
        return route_tcr(scores, 1, mode.capacity)
    if mode.kind == ECR:
        return route_ecr(scores, mode.capacity)
    return route_hybrid(scores, mode.capacity, mode.theta)


@dataclass
class _Pass:
    """Forward intermediates for one sample."""

    x: np.ndarray
    scores: np.ndarray
    gates: np.ndarray
    plan: DispatchPlan
    tok: np.ndarray
    exp: np.ndarray
    outputs: np.ndarray  # (slots, classes): expert outputs before gating
    logits: np.ndarray
    probs: np.ndarray


def _forward(model: ToyMoE, x: np.ndarray, plan: DispatchPlan | None = None) -> _Pass:
    scores = affinity_scores(x, model.router)
    gates = softmax(scores, axis=1)
    if plan is None:
        plan = dispatch(scores, model.mode)
    pairs = plan.pairs()
    tok = np.array([t for t, _ in pairs], dtype=np.int64)
    exp = np.array([i for _, i in pairs], dtype=np.int64)
    if tok.size:
        outputs = np.einsum("scd,sd->sc", model.A[exp], x[tok]) + model.b[exp]
        logits = (gates[tok, exp][:, None] * outputs).mean(axis=0)
    else:
        outputs = np.zeros((0, model.A.shape[1]))
        logits = np.zeros(model.A.shape[1])
    return _Pass(x, scores, gates, plan, tok, exp, outputs, logits, softmax(logits))


def forward(model: ToyMoE, sample: LabeledSample | np.ndarray) -> tuple[np.ndarray, DispatchPlan]:
    """Class probabilities and the dispatch plan; all tokens dropped gives uniform output."""
    x = sample.batch.tokens if isinstance(sample, LabeledSample) else np.asarray(sample, dtype=np.float64)
    fp = _forward(model, x)
    return fp.probs, fp.plan


@dataclass
class Grads:
    router: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __iadd__(self, other: Grads) -> Grads:
        self.router += other.router
        self.A += other.A
        self.b += other.b
        return self

    def scaled(self, c: float) -> Grads:
        return Grads(c * self.router, c * self.A, c * self.b)


def _zero_grads(model: ToyMoE) -> Grads:
    return Grads(np.zeros_like(model.router), np.zeros_like(model.A), np.zeros_like(model.b))


def _backward(model: ToyMoE, fp: _Pass, dlogits: np.ndarray, dgates_extra: np.ndarray | None = None) -> Grads:
    """Back-propagate ``dL/dlogits`` (and any direct ``dL/dgates``) to the parameters."""
    g = _zero_grads(model)
    S = fp.tok.size
    dgates = np.zeros_like(fp.gates) if dgates_extra is None else dgates_extra.copy()
    if S:
        gsel = fp.gates[fp.tok, fp.exp] / S
        onehot = np.zeros((S, model.n))
        onehot[np.arange(S), fp.exp] = 1.0
        # every slot of expert i shares dlogits, so its gradient is an outer product
        g.A += dlogits[None, :, None] * (onehot.T @ (gsel[:, None] * fp.x[fp.tok]))[:, None, :]
        g.b += np.outer(onehot.T @ gsel, dlogits)
        # (token, expert) pairs are unique within a plan
        dgates[fp.tok, fp.exp] += fp.outputs @ dlogits / S
    # softmax over experts, then cosine affinity
    dscores = fp.gates * (dgates - np.sum(fp.gates * dgates, axis=1, keepdims=True))
    w = model.router
    wn = np.linalg.norm(w, axis=1)
    xhat = fp.x / np.linalg.norm(fp.x, axis=1, keepdims=True)
    what = w / wn[:, None]
    # d cos(x, w_i) / d w_i = (xhat - cos * what_i) / |w_i|
    g.router = (dscores.T @ xhat - np.sum(dscores * fp.scores, axis=0)[:, None] * what) / wn[:, None]
    return g


def loss_and_grads(model: ToyMoE, samples: list[LabeledSample], alpha: float = 0.0,
                   plans: list[DispatchPlan] | None = None):
    """Mean cross-entropy plus ``alpha`` times the load-balancing loss, and its gradients.

    Returns ``(total, task, aux, passes, grads)``. The argmax fractions in the
    balancing loss are constants; only the mean gate mass carries gradient.
    """
    B = len(samples)
    passes = [
        _forward(model, smp.batch.tokens, None if plans is None else plans[j])
        for j, smp in enumerate(samples)
    ]
    # log-sum-exp form stays exact when a probability underflows
    task = sum(float(logsumexp(fp.logits) - fp.logits[smp.label]) for fp, smp in zip(passes, samples)) / B
    all_gates = np.vstack([fp.gates for fp in passes])
    stats = losses.load_stats(all_gates)
    aux = losses.aux_loss(stats, alpha)
    # d aux / d gate[t, i] = alpha * n * f_i / T
    dg_aux = np.broadcast_to(alpha * model.n * stats.f / stats.T, passes[0].gates.shape)
    grads = _zero_grads(model)
    for fp, smp in zip(passes, samples):
        dlogits = fp.probs.copy()
        dlogits[smp.label] -= 1.0
        grads += _backward(model, fp, dlogits / B, dg_aux)
    if not model.learn_router:
        grads.router[:] = 0.0
    return task + aux, task, aux, passes, grads


def grad_check(model: ToyMoE, sample: LabeledSample, h: float = 1e-4, alpha: float = 0.0,
               return_details: bool = False):
    """Largest relative gap between analytic and central-difference gradients.

    The dispatch plan is computed once and held fixed. Relative error per
    entry is ``|a - f| / max(|a| + |f|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    probe = replace(model.copy(), learn_router=True)
    plan = _forward(probe, sample.batch.tokens).plan
    _, _, _, _, grads = loss_and_grads(probe, [sample], alpha, [plan])

    def loss_at() -> float:
        return loss_and_grads(probe, [sample], alpha, [plan])[0]

    worst = 0.0
    details = {}
    for name in ("router", "A", "b"):
        param = getattr(probe, name)
        analytic = getattr(grads, name)
        numeric = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = param[idx]
            param[idx] = orig + h
            up = loss_at()
            param[idx] = orig - h
            down = loss_at()
            param[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
        worst = max(worst, float(rel.max()))
        details[name] = (analytic, numeric)
    return (worst, details) if return_details else worst


def switch_policy(q_hat, s: int, C_star: float) -> RouterMode:
    """ECR with capacity ``ceil(2 C*)`` once every ``s * q_i <= C*``, otherwise TCR with ``C = s``."""
    q = np.asarray(q_hat, dtype=np.float64)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("q_hat entries must lie in [0, 1]")
    if C_star <= 0:
        raise ValueError(f"C_star must be > 0, got {C_star}")
    if np.all(s * q <= C_star):
        return RouterMode(ECR, max(1, math.ceil(2 * C_star)))
    return RouterMode(TCR, s)


# -- training loop ----------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, record: dict):
        super().__init__(f"training diverged at step {step}: {record}")
        self.step = step
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    s: int = 64
    d: int = 64
    n: int = 4
    steps: int = 500
    batch_size: int = 16
    learning_rate: float = 5.0
    router_learning_rate: float | None = None
    seed: int = 0
    mode_schedule: tuple[tuple[int, RouterMode], ...] = ()
    alpha: float = 0.01
    mu: float = 0.0
    capacity_policy: str = "fixed"  # or "adaptive"
    adaptive_theta: float = 0.7
    ema_alpha: float = 0.5
    learn_router: bool = True
    noise_kind: str = CLUSTERED
    concentration: float = 10.0
    pattern_alignment: float = 0.5
    center_alignment: float = 0.7
    init_scale: float = 0.01
    q_trials: int = 4096
    nodes: int = 2
    switch_c_star: float | None = None
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.capacity_policy not in ("fixed", "adaptive"):
            raise ValueError(f"unknown capacity policy {self.capacity_policy!r}")
        sched = tuple((int(st), m if isinstance(m, RouterMode) else RouterMode(*m)) for st, m in self.mode_schedule)
        if not sched:
            sched = ((0, RouterMode(TCR, self.s)),)
        steps = [st for st, _ in sched]
        if steps[0] != 0:
            raise ValueError("mode_schedule must start at step 0")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("mode_schedule steps must be strictly increasing")
        object.__setattr__(self, "mode_schedule", sched)

    def mode_at(self, step: int) -> RouterMode:
        mode = self.mode_schedule[0][1]
        for st, m in self.mode_schedule:
            if st <= step:
                mode = m
        return mode

    def bank(self) -> PatternBank:
        return make_pattern_bank(
            self.d, self.n, self.pattern_alignment, self.noise_kind, self.concentration,
            self.center_alignment, seed=self.seed,
        )


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)
    initial_hash: str = ""
    final_hash: str = ""

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            for r in self.records:
                writer.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sgd(model: ToyMoE, grads: Grads, lr: float, router_lr: float) -> None:
    model.A -= lr * grads.A
    model.b -= lr * grads.b
    if model.learn_router and router_lr:
        model.router -= router_lr * grads.router


def train(cfg: TrainConfig, model: ToyMoE | None = None) -> tuple[MetricsLog, ToyMoE]:
    """SGD on cross-entropy + alpha * balancing loss; returns the per-step log and final model.

    Locality loss is logged from realized node traffic and, being a function
    of discrete counts, adds no gradient.
    """
    bank = cfg.bank()
    if model is None:
        model = init_model(cfg.d, cfg.n, cfg.mode_at(0), cfg.init_scale, cfg.seed, cfg.learn_router)
    router_lr = cfg.learning_rate if cfg.router_learning_rate is None else cfg.router_learning_rate
    n_nodes = min(cfg.nodes, cfg.n)
    e2n = losses.expert_nodes(cfg.n, n_nodes)
    estimate: CapacityEstimate = capacity_lower_bound(cfg.d, cfg.n, 0.0)
    log = MetricsLog(initial_hash=model.param_hash())
    switched: RouterMode | None = None
    # same draws every step, so q_hat moves only with the router
    fp_draws = fp_noise(bank, cfg.q_trials, seed=cfg.seed)

    for step in range(cfg.steps):
        q = estimate_fp_rate(bank, model.router, noise=fp_draws).q_hat
        mode = cfg.mode_at(step)
        if cfg.switch_c_star is not None:
            if switched is None and switch_policy(q, cfg.s, cfg.switch_c_star).kind == ECR:
                switched = switch_policy(q, cfg.s, cfg.switch_c_star)
            mode = switched or mode
        samples = [make_sample(cfg.s, cfg.d, bank, cfg.seed, step * cfg.batch_size + j) for j in range(cfg.batch_size)]

        plans = []
        capacities = []
        for smp in samples:
            m = mode
            if cfg.capacity_policy == "adaptive":
                scores = affinity_scores(smp.batch.tokens, model.router)
                estimate = adaptive_capacity(scores, cfg.adaptive_theta, estimate, cfg.ema_alpha)
                m = replace(mode, capacity=estimate.c_effective, theta=cfg.adaptive_theta)
                plans.append(dispatch(scores, m))
            else:
                plans.append(dispatch(affinity_scores(smp.batch.tokens, model.router), m))
            capacities.append(m.capacity)
        model.mode = mode
        total, task, aux, passes, grads = loss_and_grads(model, samples, cfg.alpha, plans)

        # sample j originates on node j mod m
        loc = float(np.mean([
            losses.locality_loss(losses.node_distribution(fp.plan, e2n, j % n_nodes), cfg.mu)
            for j, fp in enumerate(passes)
        ]))
        hits = [smp.disc_position in fp.plan.experts[smp.label] for smp, fp in zip(samples, passes)]
        record = {
            "step": step,
            "task_loss": float(task),
            "aux_loss": float(aux),
            "loc_loss": loc,
            "dispatch_success": float(np.mean(hits)),
            "capacity": float(np.mean(capacities)),
            "mode": mode.kind,
            "q_hat_max": float(np.max(q)),
            "q_hat_mean": float(np.mean(q)),
            "slots": float(np.mean([fp.plan.slots for fp in passes])),
        }
        log.records.append(record)
        loss = total + loc
        if not math.isfinite(loss) or loss > cfg.divergence_limit:
            log.final_hash = model.param_hash()
            raise TrainingDiverged(step, record)
        _sgd(model, grads, cfg.learning_rate, router_lr)

    log.final_hash = model.param_hash()
    return log, model
