"""Explicit large-margin embeddings of k-sparse relevance matrices.

* :func:`simplex_baseline` - dimension n+1, margin about 1/(2 sqrt k).
* :func:`vandermonde` - dimension 2k+1 from sign-pattern polynomials.
* :func:`khatri_rao` - random rank-one lifts vec(a a^T) against projectors.
* :func:`gaussian_rip` - Gaussian documents with least-norm interpolating queries.

Every construction returns an :class:`~maxmargin.embedding.EmbeddingPair`
whose queries are produced on demand by a registered :class:`QueryRule`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict
from itertools import combinations
from math import comb

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import gammaln

from .embedding import EmbeddingPair, QueryRule, register_rule
from .errors import CapExceeded, ConstructionError, ParameterError
from .relevance import RelevanceMatrix

log = logging.getLogger(__name__)

RANK_TOL = 1e-10

__all__ = [
    "simplex_baseline",
    "simplex_inner_products",
    "vandermonde",
    "vandermonde_nodes",
    "vandermonde_margin_bound",
    "sign_change_polynomial",
    "khatri_rao",
    "khatri_rao_dims",
    "khatri_rao_delta",
    "khatri_rao_margin",
    "KhatriRaoParams",
    "sym_vec",
    "gaussian_rip",
    "RipParams",
    "rip_estimate",
]


def _rng(seed: int, attempt: int = 0) -> np.random.Generator:
    # one independent stream per (seed, attempt) pair
    return np.random.default_rng([int(seed), int(attempt)])


def sphere(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    X = rng.standard_normal((count, dim))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# Simplex baseline


def simplex_inner_products(k: int) -> tuple[float, float]:
    """Closed-form (relevant, irrelevant) scores of the simplex baseline."""
    c = (4 * k) ** -0.5
    return (1 - c) / math.sqrt(k) - c, -c


@register_rule("simplex")
class SimplexRule(QueryRule):
    def __init__(self, n: int, k: int):
        self.n, self.k = n, k
        c = (4 * k) ** -0.5
        self._w = math.sqrt(1 - c) / math.sqrt(k)
        self._last = -((4 * k) ** -0.25)

    def __call__(self, support):
        u = np.zeros(self.n + 1)
        u[list(support)] = self._w
        u[-1] = self._last
        return u

    def block(self, supports):
        U = np.zeros((len(supports), self.n + 1))
        for r, s in enumerate(supports):
            U[r, list(s)] = self._w
        U[:, -1] = self._last
        return U

    def to_meta(self):
        return {"name": self.name, "n": self.n, "k": self.k}

    @classmethod
    def from_meta(cls, meta, V):
        return cls(int(meta["n"]), int(meta["k"]))


def simplex_baseline(A: RelevanceMatrix) -> EmbeddingPair:
    """Scaled standard basis plus a shared bias coordinate (dimension n+1)."""
    k = A.require_uniform("the simplex baseline")
    if k == 1:
        log.warning("simplex baseline with k=1 has relevant-pair score exactly 0")
    c = (4 * k) ** -0.5
    V = np.zeros((A.n, A.n + 1))
    V[np.arange(A.n), np.arange(A.n)] = math.sqrt(1 - c)
    V[:, -1] = (4 * k) ** -0.25
    return EmbeddingPair(A, V, rule=SimplexRule(A.n, k), meta={"method": "simplex", "k": k})


# ----------------------------------------------------------------------------
# Vandermonde (moment curve) construction


def vandermonde_nodes(n: int) -> np.ndarray:
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def vandermonde_margin_bound(n: int, k: int) -> float:
    return (2 * k) ** -0.25 * (2 * n) ** (-2 * k)


def sign_change_polynomial(support, n: int, nodes=None):
    """Coefficients (increasing degree) of the sign-pattern polynomial of a row.

    The polynomial is positive at the nodes of documents in ``support`` and
    negative elsewhere, with one root at the midpoint of every gap where the
    row pattern flips.
    """
    t = vandermonde_nodes(n) if nodes is None else nodes
    row = np.zeros(n, dtype=int)
    row[list(support)] = 1
    flips = np.flatnonzero(row[:-1] != row[1:])
    mids = (t[flips] + t[flips + 1]) / 2
    sign = 1.0 if row[0] == 1 else -1.0
    # prod (s_l - s) = (-1)^r prod (s - s_l)
    sign *= (-1.0) ** len(mids)
    return sign * P.polyfromroots(mids) if len(mids) else np.array([sign])


@register_rule("vandermonde")
class VandermondeRule(QueryRule):
    def __init__(self, n: int, k: int):
        self.n, self.k = n, k
        self._t = vandermonde_nodes(n)

    def __call__(self, support):
        coef = sign_change_polynomial(support, self.n, self._t)
        if len(coef) > 2 * self.k + 1:
            raise ParameterError(f"row {list(support)} needs more than {2 * self.k} sign changes")
        u = np.zeros(2 * self.k + 1)
        u[: len(coef)] = coef
        return u / np.linalg.norm(u)

    def to_meta(self):
        return {"name": self.name, "n": self.n, "k": self.k}

    @classmethod
    def from_meta(cls, meta, V):
        return cls(int(meta["n"]), int(meta["k"]))


def vandermonde(A: RelevanceMatrix) -> EmbeddingPair:
    """Documents on the moment curve at equally spaced nodes, dimension 2k+1.

    Rows of any sparsity up to ``k = A.max_k`` are accepted, since a row with
    at most k ones flips sign at most 2k times along the nodes.
    """
    if A.n < 2:
        raise ParameterError("the Vandermonde construction needs n >= 2")
    k = A.max_k
    t = vandermonde_nodes(A.n)
    V = np.vander(t, 2 * k + 1, increasing=True)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    return EmbeddingPair(
        A,
        V,
        rule=VandermondeRule(A.n, k),
        meta={"method": "vandermonde", "k": k, "margin_bound": vandermonde_margin_bound(A.n, k)},
    )


# ----------------------------------------------------------------------------
# Khatri-Rao lift


def sym_vec(M: np.ndarray) -> np.ndarray:
    """Diagonal entries then sqrt(2) times the strict upper triangle.

    Inner products of images equal Frobenius inner products of symmetric inputs.
    """
    r = M.shape[-1]
    iu = np.triu_indices(r, 1)
    return np.concatenate([np.diagonal(M, axis1=-2, axis2=-1), math.sqrt(2) * M[..., iu[0], iu[1]]], axis=-1)


def khatri_rao_dims(d: int) -> int:
    """Base sphere dimension r = floor((sqrt(8d - 7) - 1) / 2)."""
    r = (math.isqrt(8 * d - 7) - 1) // 2
    return r


def khatri_rao_delta(n: int, k: int, r: int, N: int) -> float:
    """The separation parameter, evaluated in log-Gamma space."""
    log_inner = gammaln(k / 2) + gammaln((r - k) / 2) - math.log(2 * N * (n - k)) - gammaln(r / 2)
    return math.exp(2.0 / (r - k) * log_inner)


def khatri_rao_margin(delta: float, k: int) -> float:
    return delta / (2 * (math.sqrt(k) + 1) - delta)


@dataclass
class KhatriRaoParams:
    d: int
    r: int
    Delta: float
    beta: float
    seed: int
    retries: int
    margin: float

    def to_dict(self) -> dict:
        return asdict(self)


def _projector(a_rows: np.ndarray) -> np.ndarray | None:
    """Orthonormal basis (r x k) of the span of the given rows, or None if dependent."""
    Q, R = np.linalg.qr(a_rows.T)
    if np.min(np.abs(np.diag(R))) < RANK_TOL:
        return None
    return Q


@register_rule("khatri-rao")
class KhatriRaoRule(QueryRule):
    def __init__(self, a: np.ndarray, k: int, beta: float, d: int):
        self.a = np.asarray(a, dtype=float)
        self.k, self.beta, self.d = k, float(beta), d
        self.r = self.a.shape[1]
        self._bias = -math.sqrt(1 - self.beta**2)

    def __call__(self, support):
        Q = _projector(self.a[list(support)])
        if Q is None:
            raise ConstructionError(f"support {list(support)} spans fewer than {len(support)} dimensions")
        u = np.zeros(self.d)
        vec = sym_vec(Q @ Q.T)
        u[: len(vec)] = self.beta / math.sqrt(self.k) * vec
        u[len(vec)] = self._bias
        return u

    def to_meta(self):
        return {"name": self.name, "k": self.k, "beta": self.beta, "d": self.d, "a": self.a.tolist()}

    @classmethod
    def from_meta(cls, meta, V):
        return cls(np.asarray(meta["a"]), int(meta["k"]), float(meta["beta"]), int(meta["d"]))


def khatri_rao(
    A: RelevanceMatrix,
    d: int,
    seed: int = 0,
    max_retries: int = 20,
) -> tuple[EmbeddingPair, KhatriRaoParams]:
    """Random Khatri-Rao lift embedding in dimension ``d``.

    Draws a_1..a_n uniformly on S^{r-1} and verifies that every irrelevant
    document projects onto each query span with squared norm at most
    1 - Delta.  Failed draws are discarded wholesale and redrawn.
    """
    k = A.require_uniform("the Khatri-Rao construction")
    if max_retries < 1:
        raise ParameterError("max_retries must be at least 1")
    if k < 2:
        raise ParameterError("the Khatri-Rao construction needs k >= 2")
    if 2 * d < k * k + 5 * k + 7:
        raise ParameterError(f"dimension {d} is below (k^2 + 5k + 7)/2 = {(k * k + 5 * k + 7) / 2}")
    n, N = A.n, A.N
    r = khatri_rao_dims(d)
    delta = khatri_rao_delta(n, k, r, N)
    if not 0 < delta <= 1:
        raise ParameterError(f"Delta = {delta} outside (0, 1]")
    beta = math.sqrt(2 * math.sqrt(k) / (2 * (math.sqrt(k) + 1) - delta))
    vec_dim = r * (r + 1) // 2
    threshold = 1 - delta

    worst = None
    for attempt in range(max_retries):
        a = sphere(_rng(seed, attempt), n, r)
        ok, worst_here = True, None
        for j, S in A.rows():
            Q = _projector(a[list(S)])
            if Q is None:
                ok = False
                worst_here = (j, None, math.inf)
                break
            proj = np.sum((a @ Q) ** 2, axis=1)
            proj[list(S)] = -np.inf
            i = int(np.argmax(proj))
            if worst_here is None or proj[i] > worst_here[2]:
                worst_here = (j, i, float(proj[i]))
            if proj[i] > threshold:
                ok = False
                break
        if ok:
            V = np.zeros((n, d))
            V[:, :vec_dim] = beta * sym_vec(a[:, :, None] * a[:, None, :])
            V[:, vec_dim] = math.sqrt(1 - beta**2)
            params = KhatriRaoParams(
                d=d, r=r, Delta=delta, beta=beta, seed=seed, retries=attempt, margin=khatri_rao_margin(delta, k)
            )
            meta = {"method": "khatri-rao", "seed": seed, **params.to_dict()}
            return EmbeddingPair(A, V, rule=KhatriRaoRule(a, k, beta, d), meta=meta), params
        if worst is None or worst_here[2] > worst[2]:
            worst = worst_here
    raise ConstructionError(
        f"Khatri-Rao verification failed on all {max_retries} draws "
        f"(worst irrelevant projection {worst[2]:.6g} > {threshold:.6g} at row {worst[0]}, doc {worst[1]})",
        worst=worst,
    )


# ----------------------------------------------------------------------------
# Gaussian RIP construction


@dataclass
class RipParams:
    d: int
    delta3k: float
    delta3k_mode: str
    rip_condition_met: bool
    seed: int
    offsupport_cap: float
    offsupport_max: float
    max_query_norm: float
    retries: int

    def to_dict(self) -> dict:
        return asdict(self)


def _interpolator(Vt: np.ndarray, S, k: int) -> np.ndarray | None:
    VT = Vt[:, list(S)]
    G = VT.T @ VT
    if np.linalg.cond(G) > 1 / RANK_TOL:
        return None
    c = np.full(len(S), 1 / math.sqrt(k))
    return VT @ np.linalg.solve(G, c)


@register_rule("gaussian-rip")
class GaussianRipRule(QueryRule):
    def __init__(self, Vt: np.ndarray, k: int):
        self.Vt = np.asarray(Vt, dtype=float)
        self.k = k
        self._lift = math.sqrt(5 / 8) * k ** -0.25

    def __call__(self, support):
        u = _interpolator(self.Vt, support, self.k)
        if u is None:
            raise ConstructionError(f"singular Gram matrix for support {list(support)}")
        u = np.append(u, -self._lift)
        return u / np.linalg.norm(u)

    def to_meta(self):
        return {"name": self.name, "k": self.k, "V_raw": self.Vt.tolist()}

    @classmethod
    def from_meta(cls, meta, V):
        return cls(np.asarray(meta["V_raw"]), int(meta["k"]))


def gaussian_rip(
    A: RelevanceMatrix,
    d: int,
    seed: int = 0,
    max_retries: int = 20,
    offsupport_cap: float | None = None,
    rip_samples: int = 2000,
) -> tuple[EmbeddingPair, RipParams]:
    """Gaussian documents with least-norm interpolating queries, dimension ``d``.

    ``d - 1`` Gaussian coordinates (variance 1/(d-1)) carry the documents; the
    last coordinate is the bias lift.  A draw is accepted when every
    interpolating query stays within ``offsupport_cap`` (default 1/(4 sqrt k))
    of zero on every irrelevant document.
    """
    k = A.require_uniform("the Gaussian-RIP construction")
    if max_retries < 1:
        raise ParameterError("max_retries must be at least 1")
    if d < 2:
        raise ParameterError("dimension must be at least 2")
    if offsupport_cap is None:
        offsupport_cap = 1 / (4 * math.sqrt(k))
    n = A.n
    dg = d - 1
    if dg < k:
        raise ParameterError(f"need at least k + 1 = {k + 1} dimensions")
    lift = math.sqrt(5 / 8) * k ** -0.25

    worst = None
    for attempt in range(max_retries):
        rng = _rng(seed, attempt)
        Vt = rng.standard_normal((dg, n)) / math.sqrt(dg)
        ok, off_max, u_max, worst_here = True, 0.0, 0.0, None
        for j, S in A.rows():
            u = _interpolator(Vt, S, k)
            if u is None:
                ok, worst_here = False, (j, None, math.inf)
                break
            s = np.abs(u @ Vt)
            s[list(S)] = 0.0
            i = int(np.argmax(s))
            if s[i] > off_max:
                off_max, worst_here = float(s[i]), (j, i, float(s[i]))
            u_max = max(u_max, float(np.linalg.norm(u)))
            if s[i] > offsupport_cap:
                ok = False
                break
        if ok:
            s3 = min(3 * k, n)
            exhaustive = comb(n, s3) <= rip_samples
            delta3k = rip_estimate(Vt, s3, sample=None if exhaustive else rip_samples, seed=seed)
            mode = "exhaustive" if exhaustive else f"sampled({rip_samples})"
            params = RipParams(
                d=d,
                delta3k=delta3k,
                delta3k_mode=mode,
                rip_condition_met=bool(delta3k <= 1 / 3),
                seed=seed,
                offsupport_cap=offsupport_cap,
                offsupport_max=off_max,
                max_query_norm=u_max,
                retries=attempt,
            )
            V = np.hstack([Vt.T, np.full((n, 1), lift)])
            V /= np.linalg.norm(V, axis=1, keepdims=True)
            meta = {"method": "gaussian-rip", "seed": seed, **params.to_dict()}
            return EmbeddingPair(A, V, rule=GaussianRipRule(Vt, k), meta=meta), params
        if worst is None or worst_here[2] > worst[2]:
            worst = worst_here
    raise ConstructionError(
        f"Gaussian-RIP off-support check failed on all {max_retries} draws "
        f"(worst |<U_j, V_i>| = {worst[2]:.6g} > cap {offsupport_cap:.6g})",
        worst=worst,
    )


def rip_estimate(
    V: np.ndarray,
    s: int,
    sample: int | None = None,
    seed: int = 0,
    cap: int = 200_000,
) -> float:
    """Restricted isometry constant of the columns of ``V`` at sparsity ``s``.

    Exhaustive over all s-column subsets when ``sample`` is None (exact);
    otherwise the max over ``sample`` random subsets, which can only
    underestimate the true constant.
    """
    V = np.asarray(V, dtype=float)
    n = V.shape[1]
    if not 1 <= s <= n:
        raise ParameterError(f"need 1 <= s <= {n}, got {s}")
    if sample is None:
        if comb(n, s) > cap:
            raise CapExceeded(f"binom({n}, {s}) = {comb(n, s)} subsets exceed the cap of {cap}")
        subsets = combinations(range(n), s)
    else:
        rng = np.random.default_rng(seed)
        subsets = (rng.choice(n, size=s, replace=False) for _ in range(sample))
    worst = 0.0
    for T in subsets:
        sv = np.linalg.svd(V[:, list(T)], compute_uv=False)
        smin2 = sv[-1] ** 2 if len(sv) == s else 0.0
        worst = max(worst, 1 - smin2, sv[0] ** 2 - 1)
    return float(worst)
