"""Sparse query-document relevance matrices.

A relevance matrix ``A`` in {0,1}^{N x n} is stored by its row supports.
The complete matrix ``S_{n,k}`` (every k-subset of documents appears as a
row exactly once) is implicit: row ``j`` is the ``j``-th k-subset of
``range(n)`` in colexicographic order, obtained by unranking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Iterator, Sequence

import numpy as np

from .errors import ParameterError

__all__ = [
    "RelevanceMatrix",
    "snk",
    "explicit",
    "row_support",
    "rows",
    "colex_rank",
    "colex_unrank",
]


def colex_unrank(j: int, k: int) -> tuple[int, ...]:
    """Return the ``j``-th k-subset of the naturals in colex order."""
    out = []
    for i in range(k, 0, -1):
        # largest c with comb(c, i) <= j
        c = i - 1
        while comb(c + 1, i) <= j:
            c += 1
        out.append(c)
        j -= comb(c, i)
    return tuple(reversed(out))


def colex_rank(support: Sequence[int]) -> int:
    return sum(comb(c, i + 1) for i, c in enumerate(sorted(support)))


def _colex_subsets(n: int, k: int) -> Iterator[tuple[int, ...]]:
    # Revolving through the max element keeps the output in colex order.
    if k == 0:
        yield ()
        return
    for top in range(k - 1, n):
        for rest in _colex_subsets(top, k - 1):
            yield rest + (top,)


@dataclass(frozen=True)
class RelevanceMatrix:
    """Relevance matrix with k-sparse rows.

    ``kind`` is ``"snk"`` (implicit complete matrix, ``k`` required) or
    ``"explicit"`` (``supports`` holds every row).
    """

    n: int
    kind: str
    k: int | None = None
    supports: tuple[tuple[int, ...], ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"n must be positive, got {self.n}")
        if self.kind == "snk":
            if self.k is None or not 1 <= self.k <= self.n:
                raise ParameterError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        elif self.kind == "explicit":
            if not self.supports:
                raise ParameterError("explicit matrix needs at least one row")
            seen = set()
            for s in self.supports:
                if not s:
                    raise ParameterError("empty row support")
                if any(b <= a for a, b in zip(s, s[1:])):
                    raise ParameterError(f"support {list(s)} is not strictly increasing")
                if s[0] < 0 or s[-1] >= self.n:
                    raise ParameterError(f"support {list(s)} has an index outside [0, {self.n})")
                if s in seen:
                    raise ParameterError(f"duplicate support {list(s)}")
                seen.add(s)
        else:
            raise ParameterError(f"unknown matrix kind {self.kind!r}")

    @property
    def N(self) -> int:
        if self.kind == "snk":
            return comb(self.n, self.k)
        return len(self.supports)

    @property
    def uniform_k(self) -> int | None:
        """Common row sparsity, or ``None`` if rows differ in size."""
        if self.kind == "snk":
            return self.k
        sizes = {len(s) for s in self.supports}
        return sizes.pop() if len(sizes) == 1 else None

    @property
    def max_k(self) -> int:
        if self.kind == "snk":
            return self.k
        return max(len(s) for s in self.supports)

    def require_uniform(self, what: str = "this operation") -> int:
        k = self.uniform_k
        if k is None:
            raise ParameterError(f"{what} requires every row to have the same number of ones")
        return k

    def row_support(self, j: int) -> tuple[int, ...]:
        if not 0 <= j < self.N:
            raise IndexError(f"row {j} out of range [0, {self.N})")
        if self.kind == "snk":
            return colex_unrank(j, self.k)
        return self.supports[j]

    def rows(self) -> Iterator[tuple[int, tuple[int, ...]]]:
        if self.kind == "snk":
            yield from enumerate(_colex_subsets(self.n, self.k))
        else:
            yield from enumerate(self.supports)

    def support_list(self, cap: int | None = None) -> list[tuple[int, ...]]:
        if cap is not None and self.N > cap:
            raise ParameterError(f"{self.N} rows exceed the cap of {cap}")
        return [s for _, s in self.rows()]

    def dense(self, cap: int = 10**7) -> np.ndarray:
        """Materialize the N x n 0/1 matrix (small instances only)."""
        if self.N * self.n > cap:
            raise ParameterError(f"{self.N} x {self.n} matrix exceeds the cap of {cap} entries")
        out = np.zeros((self.N, self.n), dtype=np.int8)
        for j, s in self.rows():
            out[j, list(s)] = 1
        return out

    def to_descriptor(self) -> dict:
        if self.kind == "snk":
            return {"type": "snk", "n": self.n, "k": self.k}
        return {"type": "explicit", "n": self.n, "rows": [list(s) for s in self.supports]}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "RelevanceMatrix":
        kind = desc.get("type")
        if kind == "snk":
            return snk(int(desc["n"]), int(desc["k"]))
        if kind == "explicit":
            return explicit(int(desc["n"]), desc["rows"])
        raise ParameterError(f"unknown matrix descriptor type {kind!r}")

    def submatrix(self, keep_rows: Sequence[int]) -> "RelevanceMatrix":
        return explicit(self.n, [self.row_support(j) for j in keep_rows])


def snk(n: int, k: int) -> RelevanceMatrix:
    """The complete k-sparse relevance matrix on ``n`` documents."""
    return RelevanceMatrix(n=int(n), kind="snk", k=int(k))


def explicit(n: int, supports: Sequence[Sequence[int]]) -> RelevanceMatrix:
    return RelevanceMatrix(
        n=int(n),
        kind="explicit",
        supports=tuple(tuple(int(i) for i in s) for s in supports),
    )


def row_support(A: RelevanceMatrix, j: int) -> tuple[int, ...]:
    return A.row_support(j)


def rows(A: RelevanceMatrix) -> Iterator[tuple[int, tuple[int, ...]]]:
    return A.rows()
