"""Patterned-matrix calculus.

vec / upsilon operators, generalized duplication and elimination matrices for
arbitrarily patterned matrices, commutation matrices and the handful of
matrix-derivative rules the estimator is built from.

Conventions
-----------
``vec`` stacks columns (Fortran order).  A pattern assigns every cell of a
``rows x cols`` matrix either a free index ``k >= 1`` (cells sharing an index
are duplicates of one another) or ``0`` for a constant cell whose value lives
in ``constants``.  ``upsilon(X)`` is the vector of free elements ordered by
free index, so ``vec(X) = D @ upsilon(X) + vec(C)`` where ``C`` holds the
constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "PatternError",
    "PatternSpec",
    "LStructure",
    "build_lstructure",
    "commutation_matrix",
    "vec",
    "unvec",
    "vec_apply",
    "unvec_apply",
    "numdiff",
    "d_product",
    "d_inverse",
    "d_quadratic_sym",
    "d_sandwich_inverse",
]


class PatternError(ValueError):
    """Malformed pattern or a matrix that does not conform to its pattern."""


def vec(x: np.ndarray) -> np.ndarray:
    return np.asarray(x).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v).reshape((rows, cols), order="F")


@dataclass(frozen=True)
class PatternSpec:
    """Cell layout of a patterned matrix.

    ``index[i, j] = k > 0`` marks a free (or duplicated) element with free
    index ``k``; ``index[i, j] = 0`` marks a constant with value
    ``constants[i, j]``.
    """

    index: np.ndarray
    constants: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        idx = np.array(self.index, dtype=int, copy=True)
        if idx.ndim != 2:
            raise PatternError("pattern index must be two-dimensional")
        const = (
            np.zeros(idx.shape)
            if self.constants is None
            else np.array(self.constants, dtype=float, copy=True)
        )
        if const.shape != idx.shape:
            raise PatternError("constants must have the same shape as the index grid")
        if np.any(idx < 0):
            raise PatternError("negative free index in pattern")
        used = np.unique(idx[idx > 0])
        n_free = used.size
        if n_free and (used[0] != 1 or used[-1] != n_free):
            missing = sorted(set(range(1, int(used[-1]) + 1)) - set(used.tolist()))
            raise PatternError(
                f"free indices must cover 1..{int(used[-1])}; dangling reference(s) {missing}"
            )
        const[idx > 0] = 0.0
        idx.setflags(write=False)
        const.setflags(write=False)
        object.__setattr__(self, "index", idx)
        object.__setattr__(self, "constants", const)

    @property
    def rows(self) -> int:
        return self.index.shape[0]

    @property
    def cols(self) -> int:
        return self.index.shape[1]

    @property
    def n_free(self) -> int:
        return int(self.index.max(initial=0))

    @property
    def n_constant(self) -> int:
        return int(np.sum(self.index == 0))

    @property
    def n_duplicate(self) -> int:
        return int(np.sum(self.index > 0)) - self.n_free

    # -- common patterns -------------------------------------------------
    @classmethod
    def from_mask(cls, free: np.ndarray, constants: np.ndarray | None = None) -> PatternSpec:
        """Every ``True`` cell is its own free element, numbered column-major."""
        free = np.asarray(free, dtype=bool)
        idx = np.zeros(free.shape, dtype=int)
        flat = vec(free)
        order = np.flatnonzero(flat)
        v = np.zeros(flat.size, dtype=int)
        v[order] = np.arange(1, order.size + 1)
        idx[:] = unvec(v, *free.shape)
        return cls(idx, constants)

    @classmethod
    def symmetric(
        cls,
        p: int,
        fixed_diagonal: np.ndarray | None = None,
        free_mask: np.ndarray | None = None,
        constants: np.ndarray | None = None,
    ) -> PatternSpec:
        """Symmetric ``p x p`` pattern numbered in vech order.

        ``fixed_diagonal`` (boolean, length p) turns diagonal cells into
        constants; ``free_mask`` (boolean, p x p, symmetric) restricts the
        free lower-triangle cells, everything else becoming a constant.
        """
        mask = np.ones((p, p), dtype=bool) if free_mask is None else np.asarray(free_mask, bool)
        if fixed_diagonal is not None:
            mask = mask.copy()
            fd = np.asarray(fixed_diagonal, dtype=bool)
            mask[np.arange(p), np.arange(p)] &= ~fd
        idx = np.zeros((p, p), dtype=int)
        k = 0
        for j in range(p):
            for i in range(j, p):
                if mask[i, j]:
                    k += 1
                    idx[i, j] = idx[j, i] = k
        return cls(idx, constants)

    @classmethod
    def correlation(cls, p: int) -> PatternSpec:
        return cls.symmetric(p, fixed_diagonal=np.ones(p, bool), constants=np.eye(p))

    @classmethod
    def strict_lower(cls, p: int) -> PatternSpec:
        return cls.from_mask(np.tril(np.ones((p, p), bool), -1))

    @classmethod
    def diagonal(cls, p: int, free: np.ndarray | None = None, constants: np.ndarray | None = None) -> PatternSpec:
        f = np.ones(p, bool) if free is None else np.asarray(free, bool)
        return cls.from_mask(np.diag(f), None if constants is None else np.diag(constants))

    @classmethod
    def vector(cls, free: np.ndarray, constants: np.ndarray | None = None) -> PatternSpec:
        f = np.asarray(free, bool).reshape(-1, 1)
        c = None if constants is None else np.asarray(constants, float).reshape(-1, 1)
        return cls.from_mask(f, c)

    def free_cells(self) -> list[tuple[int, int]]:
        """Representative cell (first in column-major scan) of each free index."""
        out: list[tuple[int, int] | None] = [None] * self.n_free
        for flat in range(self.rows * self.cols):
            i, j = flat % self.rows, flat // self.rows
            k = self.index[i, j]
            if k and out[k - 1] is None:
                out[k - 1] = (i, j)
        return out  # type: ignore[return-value]


@dataclass(frozen=True)
class LStructure:
    pattern: PatternSpec
    duplication: np.ndarray
    elimination: np.ndarray

    @property
    def n_free(self) -> int:
        return self.pattern.n_free


def build_lstructure(pattern: PatternSpec) -> LStructure:
    """Duplication and elimination matrices of ``pattern``.

    The duplication matrix has one column per free index; row ``r`` of a
    column is 1 when vec-position ``r`` carries that index.  The elimination
    matrix is its Moore-Penrose inverse, which averages over duplicates.
    """
    flat = vec(pattern.index)
    n = pattern.n_free
    dup = np.zeros((flat.size, n))
    rows = np.flatnonzero(flat)
    dup[rows, flat[rows] - 1] = 1.0
    counts = dup.sum(axis=0)
    elim = dup.T / counts[:, None] if n else np.zeros((0, flat.size))
    dup.setflags(write=False)
    elim.setflags(write=False)
    return LStructure(pattern, dup, elim)


def commutation_matrix(m: int, n: int) -> np.ndarray:
    """``K`` with ``K @ vec(X.T) == vec(X)`` for every ``m x n`` matrix X."""
    if m < 1 or n < 1:
        raise ValueError("commutation matrix dimensions must be positive")
    k = np.zeros((m * n, m * n))
    # vec(X)[i + j*m] = X[i, j] = X.T[j, i] = vec(X.T)[j + i*n]
    i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    k[(i + j * m).ravel(), (j + i * n).ravel()] = 1.0
    return k


def vec_apply(x: np.ndarray, ls: LStructure, atol: float = 1e-12) -> np.ndarray:
    """upsilon(X); raises if X breaks the constants or duplicates of the pattern."""
    x = np.asarray(x, dtype=float)
    pat = ls.pattern
    if x.shape != (pat.rows, pat.cols):
        raise PatternError(f"matrix shape {x.shape} does not match pattern {(pat.rows, pat.cols)}")
    const = pat.index == 0
    if not np.allclose(x[const], pat.constants[const], atol=atol, rtol=0):
        raise PatternError("matrix violates the constant cells of its pattern")
    v = vec(x)
    u = ls.elimination @ v
    if not np.allclose(ls.duplication @ u, np.where(vec(const), 0.0, v), atol=atol, rtol=1e-12):
        raise PatternError("matrix violates the duplicate cells of its pattern")
    return u


def unvec_apply(u: np.ndarray, ls: LStructure) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != ls.n_free:
        raise PatternError(f"expected {ls.n_free} free elements, got {u.size}")
    pat = ls.pattern
    return unvec(ls.duplication @ u + vec(pat.constants), pat.rows, pat.cols)


def numdiff(
    f: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    step: float | np.ndarray | None = None,
) -> np.ndarray:
    """Central-difference Jacobian ``df/dx'`` (rows: outputs, columns: inputs).

    Default step is ``eps**(1/3) * max(1, |x_i|)`` per coordinate.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if step is None:
        h = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(x0))
    else:
        h = np.broadcast_to(np.asarray(step, dtype=float), x0.shape).copy()
        if np.any(h <= 0):
            raise ValueError("numdiff step must be positive")
    f0 = np.asarray(f(x0), dtype=float).reshape(-1)
    jac = np.empty((f0.size, x0.size))
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        fp = np.asarray(f(xp), dtype=float).reshape(-1)
        fm = np.asarray(f(xm), dtype=float).reshape(-1)
        jac[:, i] = (fp - fm) / (xp[i] - xm[i])
    return jac


# -- derivative rules: all return d vec(Y) / d vec(X)' --------------------

def d_product(u: np.ndarray, v: np.ndarray, du: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Product rule for ``Y = U V`` given the Jacobians of U and V."""
    p = u.shape[0]
    r = v.shape[1]
    return np.kron(v, np.eye(p)).T @ du + np.kron(np.eye(r), u) @ dv


def d_inverse(x: np.ndarray) -> np.ndarray:
    xi = np.linalg.inv(x)
    return -np.kron(xi.T, xi)


def d_quadratic_sym(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``Y = X A X`` for symmetric X and constant A."""
    n = x.shape[0]
    eye = np.eye(n)
    return np.kron(a @ x, eye).T + np.kron(eye, x @ a)


def d_sandwich_inverse(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``Y = A' X^{-1} B`` for constant A and B."""
    xi = np.linalg.inv(x)
    return -np.kron(b.T @ xi.T, a.T @ xi)
