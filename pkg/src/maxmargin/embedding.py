"""Embedding pairs, exact margin certification, and the emb-v1 file format.

Document vectors ``V`` are always stored densely (``n x d``).  Query vectors
are either a dense ``N x d`` table or a :class:`QueryRule` that maps a row
support to its unit query vector on demand, which is what lets ``S_{n,k}``
embeddings exist without ``binom(n, k)`` stored rows.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ._io import atomic_write_text, fmt_float, fmt_matrix
from .errors import CapExceeded, FormatError, ParameterError
from .relevance import RelevanceMatrix

log = logging.getLogger(__name__)

UNIT_TOL = 1e-9
DEFAULT_BLOCK = 2048

__all__ = [
    "QueryRule",
    "register_rule",
    "rule_from_meta",
    "EmbeddingPair",
    "MarginCertificate",
    "certify",
    "certify_scores",
    "support_mask",
    "bias_lift",
    "materialize_queries",
    "save_embedding",
    "load_embedding",
    "dumps_embedding",
    "loads_embedding",
    "unit_rows",
]


def unit_rows(X: np.ndarray, what: str = "vectors") -> np.ndarray:
    """Return ``X`` with every row on the unit sphere.

    Rows already within ``UNIT_TOL`` are returned untouched; others are
    renormalized with a warning.
    """
    X = np.array(X, dtype=float, copy=True)
    if X.ndim == 1:
        X = X[None, :]
    if not np.all(np.isfinite(X)):
        raise ParameterError(f"{what} contain non-finite entries")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ParameterError(f"{what} contain a zero vector")
    off = np.abs(norms - 1.0) > UNIT_TOL
    if np.any(off):
        log.warning("renormalizing %d %s that were not unit norm", int(off.sum()), what)
        X[off] /= norms[off, None]
    return X


# ----------------------------------------------------------------------------
# Query rules


_RULES: dict[str, Callable[[dict, np.ndarray], "QueryRule"]] = {}


def register_rule(name: str):
    """Class decorator registering a rule for reconstruction from file meta."""

    def deco(cls):
        cls.name = name
        _RULES[name] = cls.from_meta
        return cls

    return deco


def rule_from_meta(meta: dict, V: np.ndarray) -> "QueryRule":
    name = meta.get("name")
    if name not in _RULES:
        # constructions register their rules on import
        from . import constructions, reduce  # noqa: F401
    if name not in _RULES:
        raise FormatError(f"unknown query rule {name!r}")
    return _RULES[name](meta, V)


class QueryRule:
    """Deterministic map from a row support to a unit query vector."""

    name = "abstract"

    def __call__(self, support: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def block(self, supports: Sequence[tuple[int, ...]]) -> np.ndarray:
        return np.stack([self(s) for s in supports])

    def to_meta(self) -> dict:
        return {"name": self.name}

    @classmethod
    def from_meta(cls, meta: dict, V: np.ndarray) -> "QueryRule":
        raise NotImplementedError


@register_rule("lifted")
class LiftedRule(QueryRule):
    """Relative-bias lift of another rule (appends one coordinate)."""

    def __init__(self, base: QueryRule, tau: float):
        self.base = base
        self.tau = float(tau)
        a = abs(self.tau)
        self._scale = 1.0 / np.sqrt(1.0 + a)
        self._last = -np.sign(self.tau) * np.sqrt(a / (1.0 + a))

    def __call__(self, support):
        u = self.base(support)
        return np.append(u * self._scale, self._last)

    def block(self, supports):
        U = self.base.block(supports) * self._scale
        return np.hstack([U, np.full((U.shape[0], 1), self._last)])

    def to_meta(self):
        return {"name": self.name, "tau": fmt_float(self.tau), "base": self.base.to_meta()}

    @classmethod
    def from_meta(cls, meta, V):
        base = rule_from_meta(meta["base"], V[:, :-1] * np.sqrt(1.0 + abs(float(meta["tau"]))))
        return cls(base, float(meta["tau"]))


# ----------------------------------------------------------------------------
# Data model


@dataclass(frozen=True, eq=False)
class EmbeddingPair:
    """Unit document vectors ``V`` (n x d) plus queries for every row of ``matrix``."""

    matrix: RelevanceMatrix
    V: np.ndarray
    U: np.ndarray | None = None
    rule: QueryRule | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        V = unit_rows(self.V, "document vectors")
        if V.shape[0] != self.matrix.n:
            raise ParameterError(f"expected {self.matrix.n} document vectors, got {V.shape[0]}")
        V.setflags(write=False)
        object.__setattr__(self, "V", V)
        if (self.U is None) == (self.rule is None):
            raise ParameterError("provide exactly one of a dense query table or a query rule")
        if self.U is not None:
            U = unit_rows(self.U, "query vectors")
            if U.shape != (self.matrix.N, V.shape[1]):
                raise ParameterError(
                    f"query table has shape {U.shape}, expected {(self.matrix.N, V.shape[1])}"
                )
            U.setflags(write=False)
            object.__setattr__(self, "U", U)

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def n(self) -> int:
        return self.matrix.n

    @property
    def N(self) -> int:
        return self.matrix.N

    @property
    def dense(self) -> bool:
        return self.U is not None

    def query(self, j: int) -> np.ndarray:
        if self.U is not None:
            return self.U[j]
        return self._checked(self.rule(self.matrix.row_support(j))[None, :])[0]

    def query_for(self, support: Sequence[int]) -> np.ndarray:
        support = tuple(sorted(int(i) for i in support))
        if self.rule is not None:
            return self._checked(self.rule(support)[None, :])[0]
        if self.matrix.kind == "snk" and len(support) == self.matrix.k:
            from .relevance import colex_rank

            return self.U[colex_rank(support)]
        try:
            return self.U[self.matrix.supports.index(support)]
        except ValueError:
            raise ParameterError(f"support {list(support)} is not a row of this matrix") from None

    def query_block(self, js: Sequence[int], supports: Sequence[tuple[int, ...]]) -> np.ndarray:
        if self.U is not None:
            return self.U[np.asarray(js, dtype=np.int64)]
        return self._checked(self.rule.block(supports))

    def _checked(self, U: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(U, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            return unit_rows(U, "generated query vectors")
        return U

    def iter_blocks(self, js: Iterable[int] | None = None, block: int = DEFAULT_BLOCK):
        """Yield ``(row_indices, supports, U_block)`` over all (or the given) rows."""
        if js is None:
            source = self.matrix.rows()
        else:
            source = ((j, self.matrix.row_support(j)) for j in js)
        buf_j, buf_s = [], []
        for j, s in source:
            buf_j.append(j)
            buf_s.append(s)
            if len(buf_j) == block:
                yield buf_j, buf_s, self.query_block(buf_j, buf_s)
                buf_j, buf_s = [], []
        if buf_j:
            yield buf_j, buf_s, self.query_block(buf_j, buf_s)

    def replace(self, **changes) -> "EmbeddingPair":
        kw = dict(matrix=self.matrix, V=self.V, U=self.U, rule=self.rule, meta=dict(self.meta))
        kw.update(changes)
        return EmbeddingPair(**kw)


def support_mask(supports: Sequence[tuple[int, ...]], n: int) -> np.ndarray:
    mask = np.zeros((len(supports), n), dtype=bool)
    for r, s in enumerate(supports):
        mask[r, list(s)] = True
    return mask


@dataclass(frozen=True)
class MarginCertificate:
    """Exact (or row-sampled) margin statistics of an embedding.

    ``min_positive`` is the smallest relevant-pair score, ``max_negative`` the
    largest irrelevant-pair score; witnesses are the attaining ``(j, i)``.
    """

    bias0_margin: float
    best_tau: float
    best_tau_margin: float
    min_positive: float
    max_negative: float
    positive_witness: tuple[int, int] | None
    negative_witness: tuple[int, int] | None
    mode: str = "exact"
    rows_scanned: int = 0
    seed: int | None = None

    @property
    def exact(self) -> bool:
        return self.mode == "exact"

    def margin_at(self, tau: float) -> float:
        return min(self.min_positive - tau, tau - self.max_negative)

    def to_dict(self) -> dict:
        return {
            "bias0_margin": self.bias0_margin,
            "best_tau": self.best_tau,
            "best_tau_margin": self.best_tau_margin,
            "min_positive": self.min_positive,
            "max_negative": self.max_negative,
            "positive_witness": list(self.positive_witness) if self.positive_witness else None,
            "negative_witness": list(self.negative_witness) if self.negative_witness else None,
            "mode": self.mode,
            "rows_scanned": self.rows_scanned,
            "seed": self.seed,
        }


def _certificate(min_pos, pos_w, max_neg, neg_w, mode, rows, seed) -> MarginCertificate:
    # With k = n there are no irrelevant pairs; -1 (the smallest possible
    # score of unit vectors) stands in for the empty maximum.
    if neg_w is None:
        max_neg = -1.0
    return MarginCertificate(
        bias0_margin=float(min(min_pos, -max_neg)),
        best_tau=float((min_pos + max_neg) / 2),
        best_tau_margin=float((min_pos - max_neg) / 2),
        min_positive=float(min_pos),
        max_negative=float(max_neg),
        positive_witness=pos_w,
        negative_witness=neg_w,
        mode=mode,
        rows_scanned=rows,
        seed=seed,
    )


def _scan(S: np.ndarray, mask: np.ndarray):
    pos = np.where(mask, S, np.inf)
    r, c = np.unravel_index(np.argmin(pos), pos.shape)
    out = [float(pos[r, c]), (int(r), int(c)), -np.inf, None]
    if not mask.all():
        neg = np.where(mask, -np.inf, S)
        r, c = np.unravel_index(np.argmax(neg), neg.shape)
        out[2:] = float(neg[r, c]), (int(r), int(c))
    return out


def certify_scores(S: np.ndarray, mask: np.ndarray) -> MarginCertificate:
    """Exact certificate from a full score table ``S[j, i] = <U_j, V_i>``."""
    return _certificate(*_scan(np.asarray(S, dtype=float), np.asarray(mask, dtype=bool)), "exact", S.shape[0], None)


def certify(
    E: EmbeddingPair,
    sample: int | None = None,
    seed: int = 0,
    block: int = DEFAULT_BLOCK,
) -> MarginCertificate:
    """Scan query-document pairs and report the margin statistics.

    With ``sample=None`` every one of the N*n pairs is checked and the result is
    a certificate.  With ``sample=c`` only ``c`` seeded uniformly chosen rows
    are scanned; the margins are then upper-bound estimates.
    """
    N = E.N
    if N == 0:
        raise ParameterError("empty relevance matrix")
    if sample is not None:
        if sample < 1:
            raise ParameterError("sampled certification needs at least one row")
        if sample >= N:
            js = None
        else:
            js = sorted(random.Random(seed).sample(range(N), sample))
    else:
        js = None

    min_pos, pos_w = np.inf, None
    max_neg, neg_w = -np.inf, None
    scanned = 0
    for bj, bs, U in E.iter_blocks(js, block=block):
        p, pw, q, qw = _scan(U @ E.V.T, support_mask(bs, E.n))
        if p < min_pos:
            min_pos, pos_w = p, (int(bj[pw[0]]), pw[1])
        if qw is not None and q > max_neg:
            max_neg, neg_w = q, (int(bj[qw[0]]), qw[1])
        scanned += len(bj)

    if js is None:
        mode, seed_out = "exact", None
    else:
        mode, seed_out = f"sampled({len(js)},seed={seed})", seed
    return _certificate(min_pos, pos_w, max_neg, neg_w, mode, scanned, seed_out)


def bias_lift(E: EmbeddingPair, tau: float, m: float | None = None) -> EmbeddingPair:
    """Turn a relative-bias-``tau`` embedding into a bias-0 one in dimension d+1.

    Scores become ``(<U,V> - tau) / (1 + |tau|)``, so a margin-``m`` input gives
    bias-0 margin ``m / (1 + |tau|)``.
    """
    tau = float(tau)
    if abs(tau) > 1:
        raise ParameterError(f"|tau| must be at most 1, got {tau}")
    a = abs(tau)
    scale = 1.0 / np.sqrt(1.0 + a)
    extra = np.sqrt(a / (1.0 + a))
    V = np.hstack([E.V * scale, np.full((E.n, 1), extra)])
    meta = dict(E.meta)
    meta["bias_lift"] = {"tau": tau, "input_margin": m}
    if E.U is not None:
        U = np.hstack([E.U * scale, np.full((E.N, 1), -np.sign(tau) * extra)])
        return EmbeddingPair(E.matrix, V, U=U, meta=meta)
    return EmbeddingPair(E.matrix, V, rule=LiftedRule(E.rule, tau), meta=meta)


def materialize_queries(E: EmbeddingPair, cap: int = 100_000) -> EmbeddingPair:
    if E.U is not None:
        return E
    if E.N > cap:
        raise CapExceeded(f"{E.N} query rows exceed the materialization cap of {cap}")
    U = np.empty((E.N, E.d))
    for bj, _, Ub in E.iter_blocks():
        U[bj] = Ub
    return EmbeddingPair(E.matrix, E.V, U=U, meta=dict(E.meta))


# ----------------------------------------------------------------------------
# emb-v1 files


def _meta_jsonable(meta: dict) -> dict:
    def conv(x):
        if isinstance(x, dict):
            return {str(k): conv(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [conv(v) for v in x]
        if isinstance(x, np.ndarray):
            return conv(x.tolist())
        if isinstance(x, (np.integer,)):
            return int(x)
        if isinstance(x, (np.floating,)):
            return float(x)
        return x

    return conv(meta)


def dumps_embedding(E: EmbeddingPair, write_queries: bool | None = None, dense_cap: int = 100_000) -> str:
    """Serialize to emb-v1 JSON text.

    Dense query tables are written when present.  Rule-backed queries are
    stored as a rule descriptor in ``meta.query_rule``; pass
    ``write_queries=True`` to evaluate and store them instead.
    """
    if write_queries is None:
        write_queries = E.U is not None
    meta = _meta_jsonable(dict(E.meta))
    if E.rule is not None:
        meta["query_rule"] = E.rule.to_meta()
    parts = [
        '{"format":"emb-v1"',
        f'"d":{E.d}',
        f'"matrix":{json.dumps(E.matrix.to_descriptor(), separators=(",", ":"))}',
        f'"V":{fmt_matrix(E.V)}',
    ]
    if write_queries:
        parts.append(f'"U":{fmt_matrix(materialize_queries(E, dense_cap).U)}')
    parts.append(f'"meta":{json.dumps(meta, sort_keys=True)}')
    return ",\n".join(parts) + "}\n"


def save_embedding(E: EmbeddingPair, path, write_queries: bool | None = None) -> None:
    atomic_write_text(path, dumps_embedding(E, write_queries))


def _require(obj, key, kind, where="top level"):
    if key not in obj:
        raise FormatError(f"emb-v1: missing field {key!r} at {where}")
    val = obj[key]
    if not isinstance(val, kind):
        raise FormatError(f"emb-v1: field {key!r} has type {type(val).__name__}")
    return val


def loads_embedding(text: str) -> EmbeddingPair:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        byte = len(text[: exc.pos].encode("utf-8"))
        raise FormatError(f"emb-v1: invalid JSON at byte offset {byte}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise FormatError("emb-v1: top level must be an object")
    if obj.get("format") != "emb-v1":
        raise FormatError(f"emb-v1: unsupported format tag {obj.get('format')!r}")
    d = _require(obj, "d", int)
    try:
        A = RelevanceMatrix.from_descriptor(_require(obj, "matrix", dict))
    except (KeyError, TypeError, ParameterError) as exc:
        raise FormatError(f"emb-v1: bad matrix descriptor: {exc}") from None
    V = np.asarray(_require(obj, "V", list), dtype=float)
    if V.ndim != 2 or V.shape[1] != d:
        raise FormatError(f"emb-v1: V has shape {V.shape}, expected (n, {d})")
    meta = obj.get("meta", {})
    if "U" in obj:
        U = np.asarray(obj["U"], dtype=float)
        if U.ndim != 2 or U.shape[1] != d:
            raise FormatError(f"emb-v1: U has shape {U.shape}, expected (N, {d})")
        meta = {k: v for k, v in meta.items() if k != "query_rule"}
        return EmbeddingPair(A, V, U=U, meta=meta)
    if "query_rule" not in meta:
        raise FormatError("emb-v1: file has neither a U table nor meta.query_rule")
    rule_meta = meta.pop("query_rule")
    return EmbeddingPair(A, V, rule=rule_from_meta(rule_meta, V), meta=meta)


def load_embedding(path) -> EmbeddingPair:
    with open(path, encoding="utf-8") as fh:
        return loads_embedding(fh.read())
