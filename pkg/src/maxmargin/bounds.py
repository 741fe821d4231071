"""Margin upper bounds, dimension lower bounds and the packing audit."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln

from .embedding import EmbeddingPair, certify
from .errors import ParameterError
from .relevance import RelevanceMatrix

__all__ = [
    "BoundReport",
    "PackingAudit",
    "SignIncompatible",
    "operator_norm",
    "snk_J",
    "identity_J",
    "spectral_bound",
    "weller_dim_bound",
    "packing_dim_bound",
    "disjoint_family",
    "packing_audit",
    "beta_tail_bound",
    "beta_tail_montecarlo",
    "gamma_ratio",
]

UPPER = "upper-on-margin"
LOWER = "lower-on-dimension"


class SignIncompatible(ParameterError):
    def __init__(self, message, witness):
        super().__init__(message)
        self.witness = witness


@dataclass
class BoundReport:
    name: str
    inputs: dict
    value: float
    direction: str
    notes: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ParameterError(f"{self.name}: non-finite bound value")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# Spectral bound


def operator_norm(J: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``J^T J``."""
    J = np.asarray(J, dtype=float)
    M = J.T @ J if J.shape[0] >= J.shape[1] else J @ J.T
    x = np.random.default_rng(seed).standard_normal(M.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = M @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        new = float(x @ y)
        x = y / ny
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return math.sqrt(max(lam, 0.0))


def snk_weights(n: int, k: int) -> tuple[float, float]:
    """Entries of the built-in S_{n,k} test matrix: (relevant, irrelevant)."""
    N = math.comb(n, k)
    if k == n:
        return 1.0 / (N * k), 0.0
    y = 0.5 - 0.5 * (n - 2 * k) / (n - 2 * k + 2 * math.sqrt((n - 1) * k * (n - k)))
    return y / (N * k), -(1 - y) / (N * (n - k))


def snk_J(n: int, k: int, cap: int = 10**7) -> np.ndarray:
    from .relevance import snk

    pos, neg = snk_weights(n, k)
    A = snk(n, k).dense(cap)
    return np.where(A == 1, pos, neg)


def identity_J(n: int) -> np.ndarray:
    return np.eye(n) / (3 * n - 4) - 2.0 * np.ones((n, n)) / (n * (3 * n - 4))


def spectral_bound(
    A: RelevanceMatrix,
    J: np.ndarray | None = None,
    cap: int = 10**7,
    tol: float = 1e-10,
) -> BoundReport:
    """``||J||_op sqrt(N n)``, an upper bound on the bias-0 margin of any embedding of A.

    With ``J=None`` the built-in choice is used (S_{n,k}, or I_n when A is
    the identity pattern).
    """
    if A.N * A.n > cap:
        raise ParameterError(f"N*n = {A.N * A.n} exceeds the materialization cap {cap}")
    dense = A.dense(cap)
    builtin = J is None
    if builtin:
        k = A.uniform_k
        if A.kind == "snk":
            J = snk_J(A.n, A.k, cap)
        elif A.N == A.n and k == 1 and np.array_equal(dense, np.eye(A.n, dtype=dense.dtype)):
            J = identity_J(A.n)
        else:
            raise ParameterError("no built-in J for this relevance matrix; pass one explicitly")
    J = np.asarray(J, dtype=float)
    if J.shape != dense.shape:
        raise ParameterError(f"J has shape {J.shape}, expected {dense.shape}")
    bad = np.argwhere(((dense == 1) & (J < 0)) | ((dense == 0) & (J > 0)))
    if len(bad):
        j, i = (int(v) for v in bad[0])
        raise SignIncompatible(f"J[{j},{i}] = {J[j, i]!r} has the wrong sign for A[{j},{i}] = {dense[j, i]}", (j, i))
    total = float(np.abs(J).sum())
    if abs(total - 1.0) > 1e-9:
        raise ParameterError(f"sum of |J| is {total!r}, expected 1")
    norm = operator_norm(J, tol=tol)
    return BoundReport(
        name="spectral",
        inputs={"n": A.n, "N": A.N, "J": "built-in" if builtin else "user"},
        value=norm * math.sqrt(A.N * A.n),
        direction=UPPER,
        notes="bounds the bias-0 margin in any dimension",
    )


# ----------------------------------------------------------------------------
# Dimension lower bounds


def _log_comb(n: int, k: int) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def weller_dim_bound(n: int, k: int, m: float) -> BoundReport:
    if not m > 0:
        raise ParameterError("margin must be positive")
    if not 1 <= k <= n:
        raise ParameterError("need 1 <= k <= n")
    num = math.log(math.comb(n, k)) if n < 10**4 else _log_comb(n, k)
    return BoundReport(
        name="weller",
        inputs={"n": n, "k": k, "m": m},
        value=num / math.log1p(1.0 / m),
        direction=LOWER,
    )


def packing_dim_bound(n: int, k: int, m: float, C: float) -> BoundReport:
    if n < 3 * k:
        raise ParameterError(f"packing bound needs n >= 3k (got n={n}, k={k})")
    if not m > 0 or not C > 0:
        raise ParameterError("m and C must be positive")
    value = C * k * math.log(n / k) / math.log1p(2.0 / (m * math.sqrt(k)))
    return BoundReport(
        name="packing",
        inputs={"n": n, "k": k, "m": m, "C": C},
        value=value,
        direction=LOWER,
        notes="C is an unspecified universal constant; value is only meaningful up to it",
    )


# ----------------------------------------------------------------------------
# Packing audit


def family_target(n: int, s: int) -> int:
    return math.ceil((n / (4 * s)) ** (s / 2))


def disjoint_family(n: int, s: int, seed: int = 0, max_attempts: int = 100_000):
    """Greedy random family of s-subsets with pairwise intersections below s/2.

    Returns ``(family, short)`` where ``short`` flags an exhausted budget.
    """
    if not 1 <= s < n:
        raise ParameterError("need 1 <= s < n")
    target = family_target(n, s)
    rng = np.random.default_rng([seed, 0xFA])
    family: list[tuple[int, ...]] = []
    sets: list[frozenset] = []
    for _ in range(max_attempts):
        if len(family) >= target:
            break
        T = frozenset(int(i) for i in rng.choice(n, size=s, replace=False))
        if all(2 * len(T & other) < s for other in sets):
            sets.append(T)
            family.append(tuple(sorted(T)))
    return family, len(family) < target


def _sign_patterns(s: int) -> np.ndarray:
    return np.array(list(itertools.product((1.0, -1.0), repeat=s)))


@dataclass
class PackingAudit:
    s: int
    family: list
    y_norms: list
    min_pairwise_distance: float | None
    target_separation: float
    family_size_target: float
    margin: float
    pairs_checked: int = 0
    norm_violations: list = field(default_factory=list)
    separation_violations: list = field(default_factory=list)
    family_short: bool = False
    notes: str = ""

    @property
    def violations(self) -> int:
        return len(self.norm_violations) + len(self.separation_violations)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["family"] = [list(T) for T in self.family]
        out["violations"] = self.violations
        return out


def packing_audit(
    E: EmbeddingPair,
    s: int | None = None,
    m: float | None = None,
    seed: int = 0,
    max_attempts: int = 100_000,
) -> PackingAudit:
    """Rebuild the packing objects ``y_T`` and check their norm and separation.

    The separation ``||y_T - y_T'|| >= m s`` is only claimed when the signed
    difference ``x_T - x_T'`` is supported on at most k documents, which is
    where ``||V x|| >= m ||x||_1`` holds.
    """
    k = E.matrix.require_uniform("packing audit")
    if m is None:
        m = certify(E).bias0_margin
    if not m > 0:
        raise ParameterError("packing audit needs a positive certified margin")
    notes = ""
    if s is None:
        s = max(1, k // 8)
        if k // 8 < 1:
            notes = "s = floor(k/8) is 0 at this k; clamped to 1"
    if s > 20:
        raise ParameterError("s > 20 makes the 2^s sign search too large")
    if s >= E.n:
        raise ParameterError("need s < n")
    family, short = disjoint_family(E.n, s, seed=seed, max_attempts=max_attempts)
    V = np.asarray(E.V)
    signs = _sign_patterns(s)

    xs, ys, norms = [], [], []
    norm_bad = []
    for T in family:
        cand = signs @ V[list(T)]
        best = int(np.argmin(np.einsum("ij,ij->i", cand, cand)))
        y = cand[best]
        x = np.zeros(E.n)
        x[list(T)] = signs[best]
        nrm = float(np.linalg.norm(y))
        xs.append(x)
        ys.append(y)
        norms.append(nrm)
        if nrm > math.sqrt(s) + 1e-9:
            norm_bad.append({"T": list(T), "norm": nrm})

    sep_bad = []
    checked = 0
    dmin = None
    for a, b in itertools.combinations(range(len(family)), 2):
        diff = xs[a] - xs[b]
        if np.count_nonzero(diff) > k:
            continue
        checked += 1
        dist = float(np.linalg.norm(ys[a] - ys[b]))
        # ||x_T - x_T'||_1 >= s because |T & T'| < s/2
        need = m * float(np.abs(diff).sum())
        dmin = dist if dmin is None else min(dmin, dist)
        if dist < m * s - 1e-9 or dist < need - 1e-9:
            sep_bad.append({"T": list(family[a]), "T_prime": list(family[b]), "distance": dist})

    return PackingAudit(
        s=s,
        family=family,
        y_norms=norms,
        min_pairwise_distance=dmin,
        target_separation=m * s,
        family_size_target=(E.n / (4 * s)) ** (s / 2),
        margin=m,
        pairs_checked=checked,
        norm_violations=norm_bad,
        separation_violations=sep_bad,
        family_short=short,
        notes=notes,
    )


# ----------------------------------------------------------------------------
# Beta / Gamma estimates


def _check_beta(s: int, r: int, delta: float) -> None:
    if not (2 <= s <= r - 2):
        raise ParameterError(f"need 2 <= s <= r-2 (got s={s}, r={r})")
    if not 0 < delta <= 1:
        raise ParameterError("delta must lie in (0, 1]")


def beta_tail_bound(s: int, r: int, delta: float) -> float:
    """Upper bound on P[z_1^2 + ... + z_s^2 <= delta] for z uniform on S^{r-1}."""
    _check_beta(s, r, delta)
    logc = gammaln(r / 2) - gammaln(s / 2) - gammaln((r - s) / 2)
    return float(math.exp(logc + (s / 2) * math.log(delta)))


def beta_tail_montecarlo(s: int, r: int, delta: float, trials: int = 100_000, seed: int = 0, chunk: int = 50_000):
    """Returns ``(estimate, standard_error)``."""
    _check_beta(s, r, delta)
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    rng = np.random.default_rng([seed, s, r])
    hits = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        z = rng.standard_normal((b, r))
        frac = (z[:, :s] ** 2).sum(axis=1) / (z**2).sum(axis=1)
        hits += int(np.count_nonzero(frac <= delta))
        done += b
    p = hits / trials
    return p, math.sqrt(p * (1 - p) / trials)


def gamma_ratio(x: float, y: float) -> float:
    """``(Gamma(x) Gamma(y) / Gamma(x + y)) ** (1 / y)``."""
    if x < 0.5 or y < 0.5:
        raise ParameterError("gamma_ratio needs x, y >= 1/2")
    return float(math.exp((gammaln(x) + gammaln(y) - gammaln(x + y)) / y))
