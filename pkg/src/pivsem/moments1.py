"""Stage-one statistics for mixed ordinal / continuous data.

Thresholds come from the univariate margins; polychoric and polyserial
correlations are then estimated pairwise with those thresholds held fixed
(two-stage pseudo-ML).  The asymptotic covariance of the whole statistic
vector ``omega`` is an estimating-equation sandwich ``A^{-1} B A^{-T} / N``
with a block-triangular ``A`` reflecting the two-stage conditioning; a
nonparametric bootstrap is available as an independent check.

Layout
------
Variables are ordered ordinal-first, then continuous.  ``omega`` stacks

* ``("mu", name)`` for every continuous variable,
* ``("tau", name, k)`` for every ordinal threshold, ``k = 1..C-1``,
* ``("sigma", a, b)`` for the free cells of ``Sigma_y*`` in vech order
  (ordinal diagonals are the constant 1 and are omitted).

Ordinal-continuous cells of ``Sigma_y*`` hold the covariance
``rho_tilde * sd(x)`` so the matrix is a proper covariance matrix of the
latent responses (unit variance) and the observed continuous variables.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .gauss import bvn_cdf, bvn_cdf_da, bvn_pdf, norm_cdf, norm_pdf, norm_quantile
from .patcalc import PatternSpec

__all__ = [
    "Stage1Error",
    "CategoryCollapseError",
    "PairwiseError",
    "VariableMeta",
    "UnivariateResult",
    "PairResult",
    "StageOneStats",
    "estimate_univariate",
    "estimate_pairwise",
    "assemble_omega",
    "bootstrap_acov",
]

log = logging.getLogger(__name__)

_RHO_MAX = 1.0 - 1e-8
_Z_MAX = float(np.arctanh(_RHO_MAX))


class Stage1Error(ValueError):
    """Failure while computing stage-one statistics."""


class CategoryCollapseError(Stage1Error):
    """An ordinal category has zero observed frequency."""


class PairwiseError(Stage1Error):
    """The pairwise correlation optimizer failed; ``trace`` holds the iterates."""

    def __init__(self, message: str, trace: list[tuple[float, float]] | None = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class VariableMeta:
    """Name and measurement level of one observed variable.

    For ordinal variables ``categories`` lists the admissible integer codes
    in order.  When left empty it is inferred from the data as every integer
    between the smallest and largest observed code.
    """

    name: str
    kind: str = "continuous"
    categories: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("continuous", "ordinal"):
            raise ValueError(f"{self.name}: kind must be 'continuous' or 'ordinal', got {self.kind!r}")
        if self.kind == "ordinal" and self.categories and len(self.categories) < 2:
            raise ValueError(f"{self.name}: an ordinal variable needs at least 2 categories")
        object.__setattr__(self, "categories", tuple(int(c) for c in self.categories))

    @property
    def is_ordinal(self) -> bool:
        return self.kind == "ordinal"

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def with_categories(self, column: np.ndarray) -> VariableMeta:
        if not self.is_ordinal or self.categories:
            return self
        col = np.asarray(column)
        if not np.all(np.isfinite(col)) or np.any(col != np.round(col)):
            raise Stage1Error(f"{self.name}: ordinal codes must be integers")
        lo, hi = int(col.min()), int(col.max())
        if hi == lo:
            raise Stage1Error(f"{self.name}: needs at least 2 distinct observed values")
        return replace(self, categories=tuple(range(lo, hi + 1)))


@dataclass(frozen=True)
class UnivariateResult:
    meta: VariableMeta
    mean: float
    variance: float
    thresholds: np.ndarray
    codes: np.ndarray | None = None  # 0-based category index per row (ordinal)
    values: np.ndarray | None = None  # raw column (continuous)


@dataclass(frozen=True)
class PairResult:
    value: float
    rho: float
    kind: str  # "polychoric" | "polyserial" | "covariance"
    iterations: int = 0
    boundary: bool = False


def estimate_univariate(column, meta: VariableMeta) -> UnivariateResult:
    """Mean, variance and thresholds of one margin.

    Ordinal thresholds are ``norm_quantile`` of the cumulative proportions
    (the closed-form ML solution for a single margin); mean 0 and variance 1
    are the standard identification.  Continuous margins use the sample
    mean and the (n-1)-denominator variance.
    """
    col = np.asarray(column, dtype=float).reshape(-1)
    if col.size == 0 or not np.all(np.isfinite(col)):
        raise Stage1Error(f"{meta.name}: column is empty or contains missing values")
    if np.unique(col).size < 2:
        raise Stage1Error(f"{meta.name}: needs at least 2 distinct observed values")
    if not meta.is_ordinal:
        return UnivariateResult(meta, float(col.mean()), float(col.var(ddof=1)), np.empty(0), values=col)

    meta = meta.with_categories(col)
    cats = np.asarray(meta.categories)
    pos = np.searchsorted(cats, col)
    pos_c = np.clip(pos, 0, cats.size - 1)
    if np.any(cats[pos_c] != col):
        bad = sorted(set(col[cats[pos_c] != col].tolist()))
        raise Stage1Error(f"{meta.name}: codes {bad} are not among the declared categories {list(cats)}")
    counts = np.bincount(pos_c, minlength=cats.size)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise CategoryCollapseError(
            f"{meta.name}: category {int(cats[empty[0]])} has zero observed frequency; "
            "its thresholds would be infinite (collapse or recode the category)"
        )
    cum = np.cumsum(counts)[:-1] / col.size
    return UnivariateResult(meta, 0.0, 1.0, np.asarray(norm_quantile(cum), float).reshape(-1), codes=pos_c)


# -- pairwise estimation ------------------------------------------------------

def _newton_fisher_z(score_info, label: str, max_iter: int = 100, tol: float = 1e-10):
    """Root of a correlation score on the Fisher-z scale.

    ``score_info(rho)`` returns (score, information).  Newton steps use the
    expected information; a step leaving the current sign bracket falls back
    to bisection.
    """
    lo, hi = -_Z_MAX, _Z_MAX
    z = 0.0
    trace: list[tuple[float, float]] = []
    for it in range(1, max_iter + 1):
        rho = np.tanh(z)
        s, info = score_info(rho)
        trace.append((float(rho), float(s)))
        if not np.isfinite(s):
            raise PairwiseError(f"{label}: score is not finite at rho={rho:.6g}", trace)
        if s > 0:
            lo = z
        else:
            hi = z
        jac = 1.0 - rho * rho
        sz, iz = s * jac, info * jac * jac
        step = sz / iz if iz > 0 else np.inf
        z_new = z + step
        if not (lo < z_new < hi) or not np.isfinite(z_new):
            z_new = 0.5 * (lo + hi)
        if abs(z_new - z) < tol or hi - lo < tol:
            boundary = abs(z_new) > _Z_MAX - 1e-6
            return float(np.tanh(np.clip(z_new, -_Z_MAX, _Z_MAX))), it, boundary
        z = z_new
    raise PairwiseError(f"{label}: correlation optimizer did not converge in {max_iter} iterations", trace)


def _cuts(thresholds: np.ndarray) -> np.ndarray:
    return np.concatenate(([-np.inf], thresholds, [np.inf]))


def _polychoric_parts(tj: np.ndarray, tk: np.ndarray, rho: float):
    """Cell probabilities and their derivatives in rho, tau_j and tau_k."""
    cj, ck = _cuts(tj), _cuts(tk)
    a, b = cj[:, None], ck[None, :]
    f = bvn_cdf(a, b, rho)
    d = bvn_pdf(a, b, rho)
    p = f[1:, 1:] - f[:-1, 1:] - f[1:, :-1] + f[:-1, :-1]
    dp_rho = d[1:, 1:] - d[:-1, 1:] - d[1:, :-1] + d[:-1, :-1]
    # dF(x, y)/dx on the grid (zero on infinite x)
    gx = bvn_cdf_da(a, b, rho)
    gy = bvn_cdf_da(b.T, a.T, rho).T
    # dP[r, c]/dtau_j[t]: only rows r = t (upper bound) and r = t + 1 (lower bound)
    nj, nk = tj.size, tk.size
    dp_tj = np.zeros((nj,) + p.shape)
    for t in range(nj):
        edge = gx[t + 1, 1:] - gx[t + 1, :-1]
        dp_tj[t, t, :] += edge
        dp_tj[t, t + 1, :] -= edge
    dp_tk = np.zeros((nk,) + p.shape)
    for t in range(nk):
        edge = gy[1:, t + 1] - gy[:-1, t + 1]
        dp_tk[t, :, t] += edge
        dp_tk[t, :, t + 1] -= edge
    return p, dp_rho, dp_tj, dp_tk


def _polyserial_parts(tau: np.ndarray, z: np.ndarray, rho: float):
    """Conditional category probabilities given standardized x and derivatives.

    Returns P (n x C), dP/drho, dP/dtau (n_tau x n x C) and dP/dz.
    """
    s = np.sqrt(1.0 - rho * rho)
    cuts = _cuts(tau)
    u = (cuts[None, :] - rho * z[:, None]) / s
    phi_u = norm_pdf(u)
    cdf = norm_cdf(u)
    p = cdf[:, 1:] - cdf[:, :-1]
    fin = np.isfinite(cuts)
    finite_cuts = np.where(fin, cuts, 0.0)
    du_rho = np.where(fin[None, :], (rho * finite_cuts[None, :] - z[:, None]) / s**3, 0.0)
    g_rho = phi_u * du_rho
    dp_rho = g_rho[:, 1:] - g_rho[:, :-1]
    g_z = phi_u * (-rho / s)
    dp_z = g_z[:, 1:] - g_z[:, :-1]
    nt = tau.size
    dp_tau = np.zeros((nt,) + p.shape)
    for t in range(nt):
        e = phi_u[:, t + 1] / s
        dp_tau[t, :, t] += e
        dp_tau[t, :, t + 1] -= e
    return p, dp_rho, dp_tau, dp_z


def _polychoric(uj: UnivariateResult, uk: UnivariateResult, label: str) -> PairResult:
    cj, ck = uj.thresholds.size + 1, uk.thresholds.size + 1
    table = np.bincount(uj.codes * ck + uk.codes, minlength=cj * ck).reshape(cj, ck)
    n = table.sum()

    def score_info(rho):
        p, dp, _, _ = _polychoric_parts(uj.thresholds, uk.thresholds, rho)
        p = np.maximum(p, 1e-300)
        return float(np.sum(table * dp / p)), float(n * np.sum(dp * dp / p))

    rho, it, boundary = _newton_fisher_z(score_info, label)
    return PairResult(rho, rho, "polychoric", it, boundary)


def _standardize(u: UnivariateResult) -> np.ndarray:
    return (u.values - u.mean) / np.sqrt(u.variance)


def _polyserial(uo: UnivariateResult, uc: UnivariateResult, label: str) -> PairResult:
    z = _standardize(uc)
    rows = np.arange(z.size)
    codes = uo.codes

    def score_info(rho):
        p, dp, _, _ = _polyserial_parts(uo.thresholds, z, rho)
        p = np.maximum(p, 1e-300)
        score = float(np.sum(dp[rows, codes] / p[rows, codes]))
        return score, float(np.sum(dp * dp / p))

    rho, it, boundary = _newton_fisher_z(score_info, label)
    return PairResult(rho * np.sqrt(uc.variance), rho, "polyserial", it, boundary)


def estimate_pairwise(col_j, col_k, uni_j: UnivariateResult, uni_k: UnivariateResult) -> PairResult:
    """Association of two variables given their (fixed) univariate results.

    ordinal-ordinal gives the polychoric correlation, ordinal-continuous the
    polyserial correlation (``value`` then holds the covariance
    ``rho * sd(x)``), continuous-continuous the sample covariance.  The
    columns are only used for continuous variables; ordinal codes come from
    the univariate results.
    """
    label = f"({uni_j.meta.name}, {uni_k.meta.name})"
    oj, ok = uni_j.meta.is_ordinal, uni_k.meta.is_ordinal
    if oj and ok:
        return _polychoric(uni_j, uni_k, label)
    if oj or ok:
        uo, uc = (uni_j, uni_k) if oj else (uni_k, uni_j)
        return _polyserial(uo, uc, label)
    x = np.asarray(col_j, float)
    y = np.asarray(col_k, float)
    cov = float(np.sum((x - x.mean()) * (y - y.mean())) / (x.size - 1))
    return PairResult(cov, cov / np.sqrt(uni_j.variance * uni_k.variance), "covariance")


# -- assembled statistics ------------------------------------------------------

@dataclass(frozen=True)
class StageOneStats:
    """Stage-one estimates ``omega`` and their asymptotic covariance.

    ``omega_acov`` is the finite-sample covariance (asymptotic covariance
    divided by ``n_obs``), so standard errors are square roots of its
    diagonal.
    """

    metas: tuple[VariableMeta, ...]
    means: np.ndarray
    variances: np.ndarray
    thresholds: dict[str, np.ndarray]
    sigma: np.ndarray
    n_obs: int
    omega_acov: np.ndarray | None = None
    boundary_pairs: tuple[tuple[str, str], ...] = ()
    omega_labels: tuple[tuple, ...] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "omega_labels", tuple(_omega_labels(self.metas, self.thresholds)))

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.metas]

    @property
    def p(self) -> int:
        return len(self.metas)

    @property
    def ordinal(self) -> np.ndarray:
        return np.array([m.is_ordinal for m in self.metas])

    @property
    def omega_order(self) -> dict[tuple, int]:
        return {lab: i for i, lab in enumerate(self.omega_labels)}

    def sigma_pattern(self) -> PatternSpec:
        return PatternSpec.symmetric(self.p, fixed_diagonal=self.ordinal, constants=np.diag(self.ordinal.astype(float)))

    @property
    def omega(self) -> np.ndarray:
        idx = {n: i for i, n in enumerate(self.names)}
        out = np.empty(len(self.omega_labels))
        for r, lab in enumerate(self.omega_labels):
            if lab[0] == "mu":
                out[r] = self.means[idx[lab[1]]]
            elif lab[0] == "tau":
                out[r] = self.thresholds[lab[1]][lab[2] - 1]
            else:
                out[r] = self.sigma[idx[lab[1]], idx[lab[2]]]
        return out

    def with_omega(self, omega: np.ndarray) -> StageOneStats:
        """Copy with the statistics replaced by ``omega`` (acov dropped)."""
        omega = np.asarray(omega, float).reshape(-1)
        if omega.size != len(self.omega_labels):
            raise ValueError("omega has the wrong length")
        idx = {n: i for i, n in enumerate(self.names)}
        means = self.means.copy()
        sigma = self.sigma.copy()
        thr = {k: v.copy() for k, v in self.thresholds.items()}
        for val, lab in zip(omega, self.omega_labels):
            if lab[0] == "mu":
                means[idx[lab[1]]] = val
            elif lab[0] == "tau":
                thr[lab[1]][lab[2] - 1] = val
            else:
                i, j = idx[lab[1]], idx[lab[2]]
                sigma[i, j] = sigma[j, i] = val
        return StageOneStats(self.metas, means, np.diag(sigma).copy(), thr, sigma, self.n_obs, None, self.boundary_pairs)


def _omega_labels(metas: Sequence[VariableMeta], thresholds: Mapping[str, np.ndarray]) -> list[tuple]:
    labels: list[tuple] = [("mu", m.name) for m in metas if not m.is_ordinal]
    for m in metas:
        if m.is_ordinal:
            labels.extend(("tau", m.name, k + 1) for k in range(len(thresholds[m.name])))
    for j, mj in enumerate(metas):
        for i in range(j, len(metas)):
            if i == j and mj.is_ordinal:
                continue
            labels.append(("sigma", metas[i].name, mj.name))
    return labels


def _as_columns(data, names: Sequence[str]) -> dict[str, np.ndarray]:
    if isinstance(data, pd.DataFrame):
        missing = [n for n in names if n not in data.columns]
        if missing:
            raise Stage1Error(f"data has no column(s) {missing}")
        return {n: data[n].to_numpy(dtype=float) for n in names}
    out = {}
    for n in names:
        if n not in data:
            raise Stage1Error(f"data has no column {n!r}")
        out[n] = np.asarray(data[n], dtype=float)
    return out


def _ordered(metas: Sequence[VariableMeta]) -> list[VariableMeta]:
    return [m for m in metas if m.is_ordinal] + [m for m in metas if not m.is_ordinal]


def assemble_omega(
    data,
    metas: Sequence[VariableMeta],
    acov: str | None = "sandwich",
    workers: int | None = None,
    bootstrap_reps: int = 500,
    seed: int = 0,
) -> StageOneStats:
    """Stage-one statistics of ``data`` and (optionally) their covariance.

    Parameters
    ----------
    data : DataFrame or mapping of column name to array
        Complete cases only.
    metas : sequence of VariableMeta
        Variables to use; output is reordered ordinal-first.
    acov : {"sandwich", "bootstrap", None}
        How to compute ``omega_acov``.
    workers : int, optional
        Thread count for the pairwise pass; results are merged in index
        order so the output does not depend on scheduling.
    """
    metas = _ordered(metas)
    cols = _as_columns(data, [m.name for m in metas])
    n = len(next(iter(cols.values())))
    if any(len(c) != n for c in cols.values()):
        raise Stage1Error("columns have unequal lengths")
    unis = [estimate_univariate(cols[m.name], m) for m in metas]
    metas = [u.meta for u in unis]
    p = len(metas)

    pairs = [(i, j) for j in range(p) for i in range(j + 1, p)]

    def run(ij):
        i, j = ij
        try:
            return estimate_pairwise(cols[metas[i].name], cols[metas[j].name], unis[i], unis[j])
        except Stage1Error as exc:
            raise type(exc)(f"pair ({metas[i].name}, {metas[j].name}): {exc}") from exc

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(ij) for ij in pairs]

    sigma = np.diag([u.variance for u in unis])
    boundary = []
    pair_res = {}
    for (i, j), res in zip(pairs, results):
        sigma[i, j] = sigma[j, i] = res.value
        pair_res[(i, j)] = res
        if res.boundary:
            boundary.append((metas[i].name, metas[j].name))
            log.warning("pair (%s, %s) hit the correlation boundary", metas[i].name, metas[j].name)

    stats = StageOneStats(
        tuple(metas),
        np.array([u.mean for u in unis]),
        np.array([u.variance for u in unis]),
        {u.meta.name: u.thresholds for u in unis if u.meta.is_ordinal},
        sigma,
        n,
        None,
        tuple(boundary),
    )
    if acov == "sandwich":
        stats = replace(stats, omega_acov=_sandwich(stats, unis, pair_res))
    elif acov == "bootstrap":
        stats = replace(stats, omega_acov=bootstrap_acov(cols, metas, bootstrap_reps, seed))
    elif acov is not None:
        raise ValueError(f"unknown acov method {acov!r}")
    return stats


def _sandwich(stats: StageOneStats, unis: list[UnivariateResult], pair_res) -> np.ndarray:
    """Two-stage estimating-equation sandwich for omega.

    Natural parameters coincide with omega except that polyserial cells
    carry the correlation; the final delta step maps them to covariances.
    """
    labels = stats.omega_labels
    pos = stats.omega_order
    names = stats.names
    n = stats.n_obs
    q = len(labels)
    psi = np.zeros((n, q))
    a = np.zeros((q, q))
    rows = np.arange(n)

    cont = [i for i, m in enumerate(stats.metas) if not m.is_ordinal]
    centered = {i: unis[i].values - unis[i].mean for i in cont}
    for i in cont:
        r = pos[("mu", names[i])]
        psi[:, r] = centered[i]
        a[r, r] = 1.0
        r = pos[("sigma", names[i], names[i])]
        psi[:, r] = centered[i] ** 2 - stats.variances[i]
        a[r, r] = 1.0

    for i, u in enumerate(unis):
        if not u.meta.is_ordinal:
            continue
        for t, tau in enumerate(u.thresholds):
            r = pos[("tau", names[i], t + 1)]
            psi[:, r] = (u.codes <= t) - norm_cdf(tau)
            a[r, r] = norm_pdf(tau)

    g = np.eye(q)
    for (i, j), res in pair_res.items():
        r = pos[("sigma", names[i], names[j])]
        ui, uj = unis[i], unis[j]
        if res.kind == "covariance":
            psi[:, r] = centered[i] * centered[j] - res.value
            a[r, r] = 1.0
        elif res.kind == "polychoric":
            p, dp, dti, dtj = _polychoric_parts(ui.thresholds, uj.thresholds, res.rho)
            p = np.maximum(p, 1e-300)
            psi[:, r] = (dp / p)[ui.codes, uj.codes]
            a[r, r] = np.sum(dp * dp / p)
            for t in range(ui.thresholds.size):
                a[r, pos[("tau", names[i], t + 1)]] = np.sum(dp * dti[t] / p)
            for t in range(uj.thresholds.size):
                a[r, pos[("tau", names[j], t + 1)]] = np.sum(dp * dtj[t] / p)
        else:
            (io, ic) = (i, j) if ui.meta.is_ordinal else (j, i)
            uo, uc = unis[io], unis[ic]
            sd = np.sqrt(uc.variance)
            z = centered[ic] / sd
            p, dp, dtau, dz = _polyserial_parts(uo.thresholds, z, res.rho)
            p = np.maximum(p, 1e-300)
            psi[:, r] = dp[rows, uo.codes] / p[rows, uo.codes]
            w = dp / p
            a[r, r] = np.sum(w * dp) / n
            for t in range(uo.thresholds.size):
                a[r, pos[("tau", names[io], t + 1)]] = np.sum(w * dtau[t]) / n
            a[r, pos[("mu", names[ic])]] = np.sum(w * dz * (-1.0 / sd)) / n
            var_pos = pos[("sigma", names[ic], names[ic])]
            a[r, var_pos] = np.sum(w * dz * (-z[:, None] / (2.0 * uc.variance))) / n
            g[r, r] = sd
            g[r, var_pos] = res.rho / (2.0 * sd)

    b = psi.T @ psi / n
    a_inv = np.linalg.inv(a)
    v = a_inv @ b @ a_inv.T / n
    out = g @ v @ g.T
    return 0.5 * (out + out.T)


def bootstrap_acov(data, metas: Sequence[VariableMeta], reps: int = 500, seed: int = 0) -> np.ndarray:
    """Nonparametric bootstrap covariance of omega (rows resampled with replacement).

    Resamples that lose an ordinal category are redrawn.
    """
    metas = _ordered(metas)
    cols = _as_columns(data, [m.name for m in metas])
    n = len(next(iter(cols.values())))
    base = assemble_omega(cols, metas, acov=None)
    fixed = list(base.metas)
    rng = np.random.default_rng(seed)
    draws = []
    attempts = 0
    while len(draws) < reps:
        attempts += 1
        if attempts > 20 * reps:
            raise Stage1Error("bootstrap: too many resamples lost an ordinal category")
        idx = rng.integers(0, n, n)
        try:
            s = assemble_omega({k: v[idx] for k, v in cols.items()}, fixed, acov=None)
        except CategoryCollapseError:
            continue
        draws.append(s.omega)
    return np.cov(np.array(draws), rowvar=False)
