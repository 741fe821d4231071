"""Dimension reduction of margin embeddings.

Documents are pushed through a Gaussian random projection and renormalized;
each query is then re-derived from scratch as the direction of the minimum
norm point of the convex hull of its signed documents.  That direction is
the best possible query for the projected documents, and its margin is
reported by an exact certification pass, never by the projection analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import EmbeddingPair, MarginCertificate, QueryRule, certify, register_rule
from .errors import ConstructionError, ParameterError

__all__ = [
    "MnpResult",
    "min_norm_point",
    "min_norm_point_gram",
    "min_norm_point_batch",
    "jl_project",
    "jl_matrix",
    "maurey_sample",
    "maurey_retry",
    "theory_dim",
    "ReduceParams",
    "ReduceReport",
    "reduce_embedding",
    "MinNormRule",
]


@dataclass
class MnpResult:
    direction: np.ndarray
    certified: float
    norm_at_solution: float
    weights: np.ndarray
    iterations: int
    gap: float
    history: list[float] | None = None


def min_norm_point_gram(G: np.ndarray, tol: float = 1e-10, max_iter: int | None = None, track: bool = False):
    """Away-step Frank-Wolfe on ``min w^T G w`` over the probability simplex.

    Works purely with the Gram matrix of the points.  Returns
    ``(weights, iterations, gap, history)``.
    """
    m = G.shape[0]
    if max_iter is None:
        max_iter = 100 * m
    diag = np.diag(G).copy()
    start = int(np.argmin(diag))
    w = np.zeros(m)
    w[start] = 1.0
    Gw = G[:, start].copy()
    f = float(diag[start])
    history = [f] if track else None
    gap = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        s = int(np.argmin(Gw))
        gap = f - Gw[s]
        if gap <= tol:
            it -= 1
            break
        active = w > 0
        a = int(np.flatnonzero(active)[np.argmax(Gw[active])])
        away_gap = Gw[a] - f
        if gap >= away_gap:
            # toward vertex s
            slope = Gw[s] - f
            curv = diag[s] - 2 * Gw[s] + f
            gmax = 1.0
            gamma = gmax if curv <= 0 else min(gmax, -slope / curv)
            w *= 1 - gamma
            w[s] += gamma
            Gw = (1 - gamma) * Gw + gamma * G[:, s]
        else:
            # away from vertex a
            slope = f - Gw[a]
            curv = f - 2 * Gw[a] + diag[a]
            gmax = w[a] / (1 - w[a]) if w[a] < 1 else math.inf
            gamma = gmax if curv <= 0 else min(gmax, -slope / curv)
            w *= 1 + gamma
            w[a] -= gamma
            if gamma == gmax:
                w[a] = 0.0
            Gw = (1 + gamma) * Gw - gamma * G[:, a]
        np.maximum(w, 0.0, out=w)
        if it % 50 == 0:
            w /= w.sum()
            Gw = G @ w
        f = float(w @ Gw)
        if track:
            history.append(f)
    w /= w.sum()
    return w, it, float(max(gap, 0.0)), history


def min_norm_point_batch(G: np.ndarray, signs: np.ndarray, tol: float = 1e-10, max_iter: int | None = None):
    """Row-parallel away-step Frank-Wolfe.

    Row ``r`` solves ``min w^T (G * s_r s_r^T) w`` over the simplex, i.e. the
    min-norm point of ``{s_ri V_i}`` when ``G = V V^T``.  All updates are
    elementwise per row.  Returns ``(weights, iterations, gaps)``.
    """
    S = np.asarray(signs, dtype=float)
    b, m = S.shape
    if max_iter is None:
        max_iter = 100 * m
    rows = np.arange(b)
    diag = np.diag(G).copy()
    start = int(np.argmin(diag))
    w = np.zeros((b, m))
    w[:, start] = 1.0
    g = S * S[:, start : start + 1] * G[start][None, :]
    f = np.full(b, diag[start])
    gap = np.full(b, np.inf)
    live = np.ones(b, dtype=bool)
    iters = np.zeros(b, dtype=int)
    for it in range(1, max_iter + 1):
        s = np.argmin(g, axis=1)
        gs = g[rows, s]
        gap = np.where(live, f - gs, gap)
        live &= gap > tol
        if not live.any():
            break
        iters += live
        a = np.argmax(np.where(w > 0, g, -np.inf), axis=1)
        ga = g[rows, a]
        wa = w[rows, a]
        fw = gap >= ga - f
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(fw, gs - f, f - ga)
            curv = np.where(fw, diag[s] - 2 * gs + f, f - 2 * ga + diag[a])
            gmax = np.where(fw, 1.0, np.where(wa < 1, wa / (1 - wa), np.inf))
            gamma = np.where(curv > 0, np.minimum(gmax, -slope / curv), gmax)
        gamma = np.where(live, gamma, 0.0)
        v = np.where(fw, s, a)
        alpha = np.where(fw, 1 - gamma, 1 + gamma)
        beta = np.where(fw, gamma, -gamma)
        col = S * S[rows, v][:, None] * G[v]
        w = alpha[:, None] * w
        w[rows, v] += beta
        drop = ~fw & (gamma == gmax) & live
        w[rows[drop], a[drop]] = 0.0
        g = alpha[:, None] * g + beta[:, None] * col
        np.maximum(w, 0.0, out=w)
        if it % 50 == 0:
            w /= w.sum(axis=1, keepdims=True)
            g = S * ((S * w)[:, :, None] * G[None, :, :]).sum(axis=1)
        f = (w * g).sum(axis=1)
    w /= w.sum(axis=1, keepdims=True)
    return w, iters, np.maximum(gap, 0.0)


def min_norm_point(
    signed_vectors,
    tol: float = 1e-10,
    max_iter: int | None = None,
    track: bool = False,
) -> MnpResult:
    """Minimum-norm point of the convex hull of ``signed_vectors``.

    The returned ``certified`` value is ``min_i <U, W_i>`` for the unit
    direction ``U`` of the located point, a valid margin for every ``W_i``
    no matter how far the solver got.
    """
    W = np.asarray(signed_vectors, dtype=float)
    if W.ndim == 1:
        W = W[None, :]
    if W.size == 0 or W.shape[0] == 0:
        raise ParameterError("min_norm_point needs at least one vector")
    if not np.all(np.isfinite(W)):
        raise ParameterError("min_norm_point input contains non-finite values")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    G = W @ W.T
    w, iters, gap, hist = min_norm_point_gram(G, tol=tol, max_iter=max_iter, track=track)
    x = w @ W
    norm = float(np.linalg.norm(x))
    if norm > 0:
        U = x / norm
    else:
        U = W[0] / np.linalg.norm(W[0]) if np.linalg.norm(W[0]) > 0 else np.eye(W.shape[1])[0]
    certified = float(np.min(W @ U))
    return MnpResult(U, certified, norm, w, iters, gap, hist)


# ----------------------------------------------------------------------------
# Johnson-Lindenstrauss and Maurey


def jl_matrix(D: int, d_out: int, seed: int) -> np.ndarray:
    if d_out < 1:
        raise ParameterError("d_out must be at least 1")
    rng = np.random.default_rng([int(seed), 0x4A4C])
    return rng.standard_normal((d_out, D)) / math.sqrt(d_out)


def jl_project(vectors, d_out: int, seed: int) -> np.ndarray:
    """Apply a seeded Gaussian map with entry variance 1/d_out to each row."""
    X = np.atleast_2d(np.asarray(vectors, dtype=float))
    Pi = jl_matrix(X.shape[1], d_out, seed)
    return X @ Pi.T


def maurey_sample(weights, points, T: int, seed: int) -> tuple[np.ndarray, float]:
    """Empirical mean of ``T`` i.i.d. draws from ``weights``, and its distance to the weighted mean."""
    w = np.asarray(weights, dtype=float)
    Y = np.atleast_2d(np.asarray(points, dtype=float))
    if w.ndim != 1 or len(w) != len(Y) or np.any(w < -1e-12) or abs(w.sum() - 1) > 1e-9:
        raise ParameterError("weights must be a probability vector matching the points")
    if np.any(np.linalg.norm(Y, axis=1) > 1 + 1e-9):
        raise ParameterError("points must have norm at most 1")
    if T < 1:
        raise ParameterError("T must be at least 1")
    w = np.clip(w, 0, None)
    w /= w.sum()
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(w), size=T, p=w)
    avg = Y[idx].mean(axis=0)
    return avg, float(np.linalg.norm(avg - w @ Y))


def maurey_retry(weights, points, T: int, seed: int, max_tries: int = 1000) -> tuple[np.ndarray, float, int]:
    """Redraw until the sample mean is within 1/sqrt(T) of the target."""
    bound = 1 / math.sqrt(T)
    for attempt in range(max_tries):
        avg, dist = maurey_sample(weights, points, T, seed=[int(seed), attempt])
        if dist <= bound + 1e-12:
            return avg, dist, attempt + 1
    raise ConstructionError(f"no draw within 1/sqrt(T) after {max_tries} tries")


def theory_dim(m: float, eps: float, n: int) -> dict:
    """Sample count and projection dimension from the existence argument.

    ``T = ceil(128 / (m eps)^2)`` and ``d = ceil(32 T ln(2n) / (eps/2)^2)``;
    this is a sufficient recipe, far from tight.
    """
    if not 0 < eps < 1:
        raise ParameterError("eps must lie in (0, 1)")
    if m <= 0:
        raise ParameterError("margin must be positive")
    T = math.ceil(128 / (m * m * eps * eps))
    d_out = math.ceil(32 * T * math.log(2 * n) / (eps / 2) ** 2)
    return {"T": T, "d_out": d_out, "log_points": T * math.log(2 * n)}


# ----------------------------------------------------------------------------
# Reduction pipeline


@register_rule("min-norm")
class MinNormRule(QueryRule):
    """Query = direction of the min-norm point of the row's signed documents."""

    def __init__(self, V: np.ndarray, tol: float = 1e-10, max_iter: int | None = None):
        self.V = np.asarray(V, dtype=float)
        self.G = self.V @ self.V.T
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, support):
        return self.block([support])[0]

    def block(self, supports):
        S = -np.ones((len(supports), len(self.V)))
        for r, sup in enumerate(supports):
            S[r, list(sup)] = 1.0
        w, _, _ = min_norm_point_batch(self.G, S, tol=self.tol, max_iter=self.max_iter)
        X = ((w * S)[:, :, None] * self.V[None, :, :]).sum(axis=1)
        nx = np.linalg.norm(X, axis=1)
        for r in np.flatnonzero(nx == 0):
            # hull contains the origin; any relevant document direction will do
            X[r] = self.V[supports[r][0]]
            nx[r] = 1.0
        return X / nx[:, None]

    def to_meta(self):
        return {"name": self.name, "tol": self.tol, "max_iter": self.max_iter}

    @classmethod
    def from_meta(cls, meta, V):
        return cls(V, float(meta.get("tol", 1e-10)), meta.get("max_iter"))


@dataclass
class ReduceParams:
    eps: float = 0.5
    d_out: int | None = None
    T: int | None = None
    seed: int = 0
    max_retries: int = 5
    identity: bool = False
    tol: float = 1e-10
    max_iter: int | None = None


@dataclass
class ReduceReport:
    input_margin: float
    eps: float
    T: int
    d_out: int
    target: float
    attempts: list[dict] = field(default_factory=list)
    chosen_seed: int | None = None
    certified_margin: float = float("nan")
    below_target: bool = False
    identity: bool = False
    certificate: MarginCertificate | None = None

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "certificate"}
        out["certificate"] = self.certificate.to_dict() if self.certificate else None
        return out


def _attempt_seed(seed: int, attempt: int) -> int:
    # retries draw from a stream disjoint from every other base seed
    if attempt == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), attempt]).generate_state(1, np.uint32)[0])


def reduce_embedding(E: EmbeddingPair, params: ReduceParams | None = None, m: float | None = None):
    """Project documents to ``params.d_out`` dimensions and re-solve every query.

    Returns ``(reduced_embedding, report)``.  Attempts with fresh projection
    seeds continue until the exact certified margin reaches ``(1 - eps) m`` or
    ``max_retries`` is spent; the best attempt is returned either way and
    flagged when below target.
    """
    params = params or ReduceParams()
    if m is None:
        m = certify(E).bias0_margin
    if m <= 0:
        raise ParameterError(f"input margin must be positive, got {m}")
    if not 0 < params.eps < 1:
        raise ParameterError("eps must lie in (0, 1)")
    D = E.d
    theory = theory_dim(m, params.eps, E.n)
    T = params.T or theory["T"]
    d_out = params.d_out or theory["d_out"]
    identity = params.identity or d_out == D
    if identity:
        d_out = D
    if d_out < 2:
        raise ParameterError("d_out must be at least 2")
    target = (1 - params.eps) * m
    report = ReduceReport(input_margin=m, eps=params.eps, T=T, d_out=d_out, target=target, identity=identity)

    best = None
    for attempt in range(1 if identity else 1 + params.max_retries):
        seed = _attempt_seed(params.seed, attempt)
        Vt = E.V.copy() if identity else jl_project(E.V, d_out, seed)
        norms = np.linalg.norm(Vt, axis=1)
        Vt = Vt / norms[:, None]
        rule = MinNormRule(Vt, tol=params.tol, max_iter=params.max_iter)
        meta = {
            "method": "reduce",
            "seed": seed,
            "source_method": E.meta.get("method"),
            "eps": params.eps,
            "d_out": d_out,
            "identity": identity,
        }
        R = EmbeddingPair(E.matrix, Vt, rule=rule, meta=meta)
        cert = certify(R)
        report.attempts.append(
            {
                "seed": seed,
                "certified_margin": cert.bias0_margin,
                "min_doc_norm": float(norms.min()),
                "max_doc_norm": float(norms.max()),
            }
        )
        if best is None or cert.bias0_margin > best[1].bias0_margin:
            best = (R, cert, seed)
        if cert.bias0_margin >= target:
            break
    R, cert, seed = best
    report.chosen_seed = seed
    report.certified_margin = cert.bias0_margin
    report.below_target = cert.bias0_margin < target
    report.certificate = cert
    return R, report
