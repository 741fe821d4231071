"""Consequences of a large margin: composition, downward closure, robustness, quantization."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import EmbeddingPair, certify, materialize_queries
from .errors import CapExceeded, ParameterError
from .relevance import colex_rank

__all__ = [
    "SeparationWitness",
    "compositional_range",
    "downward_range",
    "compositional_witness",
    "downward_witness",
    "RobustnessReport",
    "robustness_check",
    "QuantizeReport",
    "quantize_check",
]

ENUM_CAP = 10**6


@dataclass
class SeparationWitness:
    h: np.ndarray
    c: float
    inside_min: float
    outside_max: float
    T: tuple
    kind: str
    c_proof: float
    terms: int

    @property
    def valid(self) -> bool:
        return self.inside_min >= self.c >= self.outside_max

    def recheck(self, E: EmbeddingPair) -> bool:
        """Recompute both sides from scratch against ``E``'s documents."""
        proj = np.asarray(E.V) @ self.h
        inside = np.zeros(E.n, dtype=bool)
        inside[list(self.T)] = True
        return bool(proj[inside].min() >= self.c >= proj[~inside].max())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": list(self.T),
            "h": self.h.tolist(),
            "c": self.c,
            "c_proof": self.c_proof,
            "inside_min": self.inside_min,
            "outside_max": self.outside_max,
            "terms": self.terms,
            "valid": self.valid,
        }


def _snk_margin(E: EmbeddingPair, m: float | None) -> tuple[int, float]:
    if E.matrix.kind != "snk":
        raise ParameterError("separation witnesses need an S_{n,k} embedding")
    if m is None:
        m = certify(E).bias0_margin
    if not 0 < m < 1:
        raise ParameterError(f"need a margin in (0, 1), got {m}")
    return E.matrix.k, m


def compositional_range(n: int, k: int, m: float) -> tuple[int, int]:
    hi = min(k + 2 * k * m / (1 - m), n - 1)
    return k, math.floor(hi + 1e-12)


def downward_range(n: int, k: int, m: float) -> tuple[int, int]:
    lo = max(1.0, k - 2 * m * (n - k) / (1 - m))
    return math.ceil(lo - 1e-12), k


def _sum_queries(E: EmbeddingPair, supports, chunk: int = 4096) -> np.ndarray:
    h = np.zeros(E.d)
    buf = []
    for S in supports:
        buf.append(S)
        if len(buf) == chunk:
            h += E.query_block([colex_rank(s) for s in buf], buf).sum(axis=0)
            buf = []
    if buf:
        h += E.query_block([colex_rank(s) for s in buf], buf).sum(axis=0)
    return h


def _witness(E, T, h_raw, c_raw, kind, terms) -> SeparationWitness:
    norm = float(np.linalg.norm(h_raw))
    if norm == 0.0:
        raise ParameterError("witness direction vanished")
    h = h_raw / norm
    proj = np.asarray(E.V) @ h
    inside = np.zeros(E.n, dtype=bool)
    inside[list(T)] = True
    lo, hi = float(proj[inside].min()), float(proj[~inside].max())
    return SeparationWitness(
        h=h,
        c=(lo + hi) / 2,
        inside_min=lo,
        outside_max=hi,
        T=tuple(T),
        kind=kind,
        c_proof=c_raw / norm,
        terms=terms,
    )


def _target(E, T) -> tuple[int, ...]:
    T = tuple(sorted({int(i) for i in T}))
    if not T or T[0] < 0 or T[-1] >= E.n:
        raise ParameterError(f"target set must be non-empty indices in [0, {E.n})")
    return T


def compositional_witness(E: EmbeddingPair, T, m: float | None = None, cap: int = ENUM_CAP) -> SeparationWitness:
    """Separate a superset T of query supports using the sum of their queries."""
    k, m = _snk_margin(E, m)
    T = _target(E, T)
    lo, hi = compositional_range(E.n, k, m)
    if not lo <= len(T) <= hi:
        raise ParameterError(f"|T| = {len(T)} outside the admissible range [{lo}, {hi}] for m = {m}")
    terms = math.comb(len(T), k)
    if terms > cap:
        raise CapExceeded(f"{terms} subsets exceed the enumeration cap {cap}")
    h = _sum_queries(E, itertools.combinations(T, k))
    return _witness(E, T, h, -m * terms, "compositional", terms)


def downward_witness(E: EmbeddingPair, T, m: float | None = None, cap: int = ENUM_CAP) -> SeparationWitness:
    """Separate a subset T of a query support using the queries that contain it."""
    k, m = _snk_margin(E, m)
    T = _target(E, T)
    lo, hi = downward_range(E.n, k, m)
    if not lo <= len(T) <= hi:
        raise ParameterError(f"|T| = {len(T)} outside the admissible range [{lo}, {hi}] for m = {m}")
    rest = [i for i in range(E.n) if i not in T]
    terms = math.comb(len(rest), k - len(T))
    if terms > cap:
        raise CapExceeded(f"{terms} supersets exceed the enumeration cap {cap}")
    sups = (tuple(sorted(T + extra)) for extra in itertools.combinations(rest, k - len(T)))
    h = _sum_queries(E, sups)
    c_raw = 0.0 if len(T) == k else m * terms
    return _witness(E, T, h, c_raw, "downward", terms)


# ----------------------------------------------------------------------------
# Robustness


@dataclass
class RobustnessReport:
    perturbation_norm: float
    tau: float
    margin: float
    trials: int
    violations: int
    worst_slack: float
    adversarial: dict | None = None

    @property
    def clean(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {
            "perturbation_norm": self.perturbation_norm,
            "tau": self.tau,
            "margin": self.margin,
            "trials": self.trials,
            "violations": self.violations,
            "worst_slack": self.worst_slack,
            "clean": self.clean,
            "adversarial": self.adversarial,
        }


def robustness_check(
    E: EmbeddingPair,
    perturbation_norm: float,
    trials: int = 100,
    seed: int = 0,
    tau: float | None = None,
    m: float | None = None,
    expect_violation: bool = False,
) -> RobustnessReport:
    """Perturb random queries by vectors of a fixed norm and re-check every score.

    Perturbed queries are deliberately not renormalized.  ``expect_violation``
    allows norms at or above the margin and adds a perturbation aimed at the
    tightest relevant pair.
    """
    cert = certify(E)
    if tau is None:
        tau = cert.best_tau
    if m is None:
        m = cert.margin_at(tau)
    if not m > 0:
        raise ParameterError("robustness check needs a positive margin")
    if perturbation_norm < 0:
        raise ParameterError("perturbation norm must be non-negative")
    if perturbation_norm >= m and not expect_violation:
        raise ParameterError(f"perturbation {perturbation_norm} is not below the margin {m}")
    V = np.asarray(E.V)
    rng = np.random.default_rng([seed, 0x0B])
    violations = 0
    worst = math.inf
    for _ in range(trials):
        j = int(rng.integers(E.N))
        e = rng.standard_normal(E.d)
        e *= perturbation_norm / np.linalg.norm(e)
        violations_j, slack = _side_check(E, j, E.query(j) + e, V, tau)
        violations += violations_j
        worst = min(worst, slack)
    adversarial = None
    if expect_violation:
        j, i = cert.positive_witness
        q = E.query(j) - perturbation_norm * V[i]
        bad, slack = _side_check(E, j, q, V, tau)
        adversarial = {"row": j, "document": i, "violations": bad, "slack": slack}
    return RobustnessReport(perturbation_norm, float(tau), float(m), trials, violations, float(worst), adversarial)


def _side_check(E, j, q, V, tau):
    scores = V @ q
    rel = np.zeros(E.n, dtype=bool)
    rel[list(E.matrix.row_support(j))] = True
    slack = np.where(rel, scores - tau, tau - scores)
    return int(np.count_nonzero(slack <= 0)), float(slack.min())


# ----------------------------------------------------------------------------
# Quantization


@dataclass
class QuantizeReport:
    step: float
    margin: float
    max_error: float
    error_bound: float
    quantized_margin: float
    codebook_exponent_bits: float
    errors_ok: bool = field(init=False)
    margin_ok: bool = field(init=False)

    def __post_init__(self):
        self.errors_ok = self.max_error <= self.error_bound
        self.margin_ok = self.quantized_margin >= self.margin / 2 - 1e-9

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _quantize(X: np.ndarray, step: float) -> np.ndarray:
    Q = np.round(X / step) * step
    norms = np.linalg.norm(Q, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ParameterError("quantization step too coarse: a vector rounded to zero")
    return Q / norms


def quantize_check(E: EmbeddingPair, step: float | None = None, m: float | None = None, cap: int = 100_000):
    """Round every coordinate to a grid of spacing ``step`` and renormalize.

    The default ``m / (8 sqrt(d))`` keeps each vector within ``m/4`` of the
    original.  Returns ``(quantized_embedding, report)``.
    """
    if m is None:
        m = certify(E).bias0_margin
    if not m > 0:
        raise ParameterError("quantization check needs a positive margin")
    if step is None:
        step = m / (8 * math.sqrt(E.d))
    if not step > 0:
        raise ParameterError("step must be positive")
    D = materialize_queries(E, cap=cap) if not E.dense else E
    U, V = np.asarray(D.U), np.asarray(D.V)
    Uq, Vq = _quantize(U, step), _quantize(V, step)
    err = max(float(np.linalg.norm(Uq - U, axis=1).max()), float(np.linalg.norm(Vq - V, axis=1).max()))
    Q = EmbeddingPair(E.matrix, Vq, U=Uq, meta={**E.meta, "quantize_step": step})
    qm = certify(Q).bias0_margin
    report = QuantizeReport(
        step=float(step),
        margin=float(m),
        max_error=err,
        error_bound=m / 4,
        quantized_margin=qm,
        codebook_exponent_bits=E.d * math.log2(1 + 8 / m),
    )
    return Q, report
