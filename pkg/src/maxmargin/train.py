"""Free-embedding contrastive training with sigmoid and InfoNCE losses."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._io import atomic_write_text
from .embedding import EmbeddingPair, certify, certify_scores, materialize_queries
from .errors import MaxMarginError, ParameterError
from .relevance import RelevanceMatrix, snk

__all__ = [
    "LOSSES",
    "TrainConfig",
    "TrainTrace",
    "TrainingDiverged",
    "sigmoid_loss",
    "infonce_loss",
    "train",
    "SweepResult",
    "sweep_min_dim",
    "sigmoid_rate_check",
    "infonce_divergence_check",
]

LOSSES = ("sigmoid", "infonce")
TRACE_FIELDS = ("step", "loss", "inv_temp", "margin", "best_tau", "best_tau_margin")
SWEEP_FIELDS = ("n", "k", "d", "loss", "seed", "max_margin")
FULL_BATCH_CAP = 5_000_000


class TrainingDiverged(MaxMarginError, FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _arrays(E: EmbeddingPair):
    if not E.dense:
        E = materialize_queries(E)
    return np.asarray(E.U), np.asarray(E.V), E.matrix.dense().astype(float)


# ----------------------------------------------------------------------------
# Losses on raw arrays.  Gradients are w.r.t. U, V and log t.


def _sigmoid(U, V, A, t, b=0.0, grad=True, value=True):
    S = U @ V.T
    sign = 1.0 - 2.0 * A
    z = sign * (t * S - b)
    loss = float(np.logaddexp(0.0, z).sum()) if value else None
    if not grad:
        return loss, None
    # logistic via tanh: overflow-free and much cheaper than expit here
    G = (0.5 * t) * (1.0 + np.tanh(0.5 * z)) * sign  # dL/dS
    return loss, (G @ V, G.T @ U, float((G * S).sum()))


def _infonce(U, V, A, t, grad=True, value=True):
    S = U @ V.T
    logits = t * S
    logits -= logits.max(axis=1, keepdims=True)
    E = np.exp(logits)
    Z = E.sum(axis=1, keepdims=True)
    loss = float((A * (np.log(Z) - logits)).sum()) if value else None
    if not grad:
        return loss, None
    k = A.sum(axis=1, keepdims=True)
    G = (k * E / Z - A) * t
    return loss, (G @ V, G.T @ U, float((G * S).sum()))


def sigmoid_loss(E: EmbeddingPair, t: float, b: float = 0.0, grad: bool = False):
    """Sum over all pairs of ``log(1 + exp((-1)^A (t<U,V> - b)))``.

    With ``grad=True`` returns ``(value, (dU, dV, dlog_t))``.
    """
    if not t > 0:
        raise ParameterError("inverse temperature must be positive")
    value, g = _sigmoid(*_arrays(E), t, b, grad)
    return (value, g) if grad else value


def infonce_loss(E: EmbeddingPair, t: float, grad: bool = False):
    """Negative log-softmax over documents, summed over relevant pairs."""
    if not t > 0:
        raise ParameterError("inverse temperature must be positive")
    value, g = _infonce(*_arrays(E), t, grad)
    return (value, g) if grad else value


# ----------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    matrix: RelevanceMatrix
    d: int
    loss: str = "sigmoid"
    steps: int = 20_000
    base_lr: float = 0.03
    seed: int = 0
    checkpoint_every: int = 100
    b: float = 0.0
    t0: float = 10.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ParameterError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.steps < 1 or self.checkpoint_every < 1:
            raise ParameterError("steps and checkpoint_every must be >= 1")
        if self.d < 1:
            raise ParameterError("dimension must be >= 1")
        if not self.t0 > 0:
            raise ParameterError("t0 must be positive")
        if self.loss == "sigmoid" and self.b != 0.0:
            raise ParameterError("the sigmoid bias is fixed at 0 during training")


@dataclass
class TrainTrace:
    config: TrainConfig
    rows: list = field(default_factory=list)
    final: EmbeddingPair | None = None
    final_loss: float = math.nan
    final_t: float = math.nan

    @property
    def margin_key(self) -> str:
        # sigmoid trains with b = 0; InfoNCE is judged with a free bias
        return "margin" if self.config.loss == "sigmoid" else "best_tau_margin"

    @property
    def max_margin(self) -> float:
        return max(r[self.margin_key] for r in self.rows)

    @property
    def max_bias0_margin(self) -> float:
        return max(r["margin"] for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def _sphere(rng, count, dim):
    X = rng.standard_normal((count, dim))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def train(config: TrainConfig) -> TrainTrace:
    """Full-batch Adam with cosine annealing; rows renormalized after each step."""
    A = config.matrix
    N, n, d = A.N, A.n, config.d
    if N * n > FULL_BATCH_CAP:
        raise ParameterError(f"N*n = {N * n} exceeds the full-batch cap {FULL_BATCH_CAP}")
    mask = A.dense().astype(bool)
    Af = mask.astype(float)
    rng = np.random.default_rng(config.seed)

    # one flat buffer so Adam runs as a handful of vector ops
    P = np.empty(N * d + n * d + 1)
    U = P[: N * d].reshape(N, d)
    V = P[N * d : -1].reshape(n, d)
    U[:] = _sphere(rng, N, d)
    V[:] = _sphere(rng, n, d)
    P[-1] = math.log(config.t0)
    Gbuf = np.empty_like(P)
    gU = Gbuf[: N * d].reshape(N, d)
    gV = Gbuf[N * d : -1].reshape(n, d)
    m1 = np.zeros_like(P)
    m2 = np.zeros_like(P)
    b1, b2, eps = 0.9, 0.999, 1e-8
    sigmoid = config.loss == "sigmoid"

    def loss_grad(grad=True):
        t = math.exp(P[-1])
        if sigmoid:
            return _sigmoid(U, V, Af, t, config.b, grad, value=not grad)
        return _infonce(U, V, Af, t, grad, value=not grad)

    trace = TrainTrace(config=config)

    def checkpoint(step):
        value, _ = loss_grad(grad=False)
        t = math.exp(P[-1])
        cert = certify_scores(U @ V.T, mask)
        trace.rows.append(
            {
                "step": step,
                "loss": value,
                "inv_temp": t,
                "margin": cert.bias0_margin,
                "best_tau": cert.best_tau,
                "best_tau_margin": cert.best_tau_margin,
            }
        )
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}", trace)
        return value

    checkpoint(0)
    for step in range(1, config.steps + 1):
        _, (dU, dV, dlt) = loss_grad()
        gU[:] = dU
        gV[:] = dV
        Gbuf[-1] = dlt
        lr = config.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / config.steps))
        m1 *= b1
        m1 += (1 - b1) * Gbuf
        m2 *= b2
        m2 += (1 - b2) * Gbuf * Gbuf
        step_size = lr * math.sqrt(1 - b2**step) / (1 - b1**step)
        P -= step_size * m1 / (np.sqrt(m2) + eps)
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        if step % config.checkpoint_every == 0 or step == config.steps:
            last = checkpoint(step)

    trace.final_loss = last
    trace.final_t = math.exp(P[-1])
    trace.final = EmbeddingPair(
        A,
        V.copy(),
        U=U.copy(),
        meta={"method": "train", "loss": config.loss, "seed": config.seed, "steps": config.steps, "inv_temp": trace.final_t},
    )
    return trace


# ----------------------------------------------------------------------------
# Dimension sweeps


def _cell(args):
    n, k, d, loss, seed, steps, kw = args
    tr = train(TrainConfig(snk(n, k), d=d, loss=loss, steps=steps, seed=seed, **kw))
    return {
        "n": n,
        "k": k,
        "d": d,
        "loss": loss,
        "seed": seed,
        "max_margin": tr.max_margin,
        "max_bias0_margin": tr.max_bias0_margin,
    }


@dataclass
class SweepResult:
    n: int
    k: int
    loss: str
    rows: list
    best: dict
    min_dim: int | None

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, extrasaction="ignore", lineterminator="\n")
        if header:
            w.writeheader()
        for r in self.rows:
            w.writerow({**r, "max_margin": repr(r["max_margin"])})
        return buf.getvalue()


def sweep_min_dim(
    n: int,
    k: int,
    loss: str,
    d_range,
    steps: int = 20_000,
    seeds=(0, 1, 2),
    jobs: int = 1,
    **train_kw,
) -> SweepResult:
    """Train every (d, seed) cell; report the least d whose best margin is positive."""
    d_range = list(d_range)
    if not d_range:
        raise ParameterError("d_range is empty")
    cells = [(n, k, d, loss, s, steps, train_kw) for d in d_range for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_cell, cells))
    else:
        rows = [_cell(c) for c in cells]
    best = {d: max(r["max_margin"] for r in rows if r["d"] == d) for d in d_range}
    positive = [d for d in d_range if best[d] > 0]
    return SweepResult(n, k, loss, rows, best, min(positive) if positive else None)


# ----------------------------------------------------------------------------
# Temperature-limit checks


def _log_softplus(z):
    # log(log(1 + e^z)), accurate when e^z underflows
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < -30
    out[small] = z[small] - 0.5 * np.exp(z[small])
    out[~small] = np.log(np.logaddexp(0.0, z[~small]))
    return out


def sigmoid_rate_check(E: EmbeddingPair, T_values=(10, 50, 200), tau=None, m=None) -> list[dict]:
    """Compare ``log L(T, T tau)`` with ``-T m*`` at each temperature."""
    U, V, A = _arrays(E)
    if tau is None or m is None:
        cert = certify(E)
        tau = cert.best_tau if tau is None else tau
        m = cert.margin_at(tau) if m is None else m
    if not m > 0:
        raise ParameterError("rate check needs a positive margin")
    S = U @ V.T
    sign = 1.0 - 2.0 * A
    Nn = S.size
    out = []
    for T in T_values:
        logL = float(logsumexp(_log_softplus(sign * (T * S - T * tau))))
        lo, hi = -T * m - math.log(2), -T * m + math.log(Nn)
        out.append(
            {
                "T": T,
                "log_loss": logL,
                "rate": logL / T,
                "lower": lo,
                "upper": hi,
                "ok": lo <= logL <= hi,
            }
        )
    return out


def infonce_divergence_check(E: EmbeddingPair, T_values=(50, 100)) -> list[dict]:
    """Check ``L(T) >= log(1 + exp(T gap))`` on the row with the widest positive gap."""
    U, V, A = _arrays(E)
    S = U @ V.T
    pos_max = np.where(A > 0, S, -np.inf).max(axis=1)
    pos_min = np.where(A > 0, S, np.inf).min(axis=1)
    gaps = pos_max - pos_min
    j = int(np.argmax(gaps))
    gap = float(gaps[j])
    if not gap > 1e-12:
        raise ParameterError("no row has two distinct positive similarities")
    out = []
    prev = None
    for T in sorted(T_values):
        value, _ = _infonce(U, V, A, T, grad=False)
        bound = float(np.logaddexp(0.0, T * gap))
        out.append(
            {
                "T": T,
                "loss": value,
                "lower_bound": bound,
                "row": j,
                "gap": gap,
                "ok": value >= bound,
                "increased": prev is None or value > prev,
            }
        )
        prev = value
    return out
