"""PIV point estimates and analytic-derivative standard errors.

``theta1`` (intercepts, loadings, regression coefficients) comes from
equation-by-equation MIIV-2SLS on the moment matrix; ``theta2`` (disturbance
and error covariances) from a closed-form generalized least squares fit of
the implied covariances given ``theta1``.  Both covariance matrices follow
from the delta method with analytic Jacobians:

* ``Var(theta1) = K Var(sigma) K'`` with ``K = d theta1 / d sigma'``,
* ``Var(theta2) = H (I - J1 K) Var(sigma) (I - J1 K)' H'`` with
  ``H = (J2' W J2)^{-1} J2' W``.

``sigma`` stacks the free means and the free cells of ``Sigma*`` (vech
order); the ordering travels with the data as explicit labels.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .modelir import (
    MiivEquation,
    ModelSpec,
    SpecificationError,
    InstrumentError,
    IdentificationError,
    build_system,
    shea_r2,
)
from .moments1 import VariableMeta, assemble_omega
from .patcalc import PatternSpec, build_lstructure, commutation_matrix, vec
from .reparam import ReparamSpec, ReparamStats, transform_moments

__all__ = [
    "EstimationError",
    "MomentInput",
    "ParamRow",
    "FitResult",
    "ModelMatrices",
    "fit_theta1",
    "theta1_jacobian",
    "implied_moments",
    "implied_jacobian",
    "fit_theta2",
    "vcov_theta1",
    "vcov_theta2",
    "fit",
    "fit_moments",
    "resolve_reparam",
]

log = logging.getLogger(__name__)

NPD_TOL = 1e-10


class EstimationError(RuntimeError):
    """Estimation failure; ``stage`` names the step that failed."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# -- moment input --------------------------------------------------------------

@dataclass(frozen=True)
class MomentInput:
    """Moment matrices of the (latent) responses plus ``Var(sigma)``.

    ``labels`` give the order of ``sigma`` = free means, then free cells of
    ``Sigma*`` in vech order.  ``mu_free`` / ``var_free`` mark which means and
    variances are statistics rather than identification constants.
    """

    names: tuple[str, ...]
    sigma: np.ndarray
    mu: np.ndarray
    mu_free: np.ndarray
    var_free: np.ndarray
    acov: np.ndarray | None = None
    ordinal: tuple[str, ...] = ()
    thresholds: dict[str, np.ndarray] = field(default_factory=dict)
    threshold_se: dict[str, np.ndarray] = field(default_factory=dict)
    threshold_fixed: dict[str, tuple[int, ...]] = field(default_factory=dict)
    n_obs: int | None = None

    def __post_init__(self) -> None:
        sig = np.asarray(self.sigma, float)
        p = len(self.names)
        if sig.shape != (p, p):
            raise ValueError(f"sigma must be {p} x {p}")
        if not np.allclose(sig, sig.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        if np.any(np.diag(sig) <= 0):
            raise ValueError("sigma must have a positive diagonal")
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "mu", np.asarray(self.mu, float).reshape(-1))
        object.__setattr__(self, "mu_free", np.asarray(self.mu_free, bool).reshape(-1))
        object.__setattr__(self, "var_free", np.asarray(self.var_free, bool).reshape(-1))
        if self.acov is not None:
            a = np.asarray(self.acov, float)
            if a.shape != (len(self.labels),) * 2:
                raise ValueError(f"acov must be {len(self.labels)} x {len(self.labels)} to match the labels")
            if not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
                raise ValueError("acov must be symmetric")
            object.__setattr__(self, "acov", a)

    @property
    def p(self) -> int:
        return len(self.names)

    @property
    def labels(self) -> tuple[tuple, ...]:
        out: list[tuple] = [("mu", n) for n, f in zip(self.names, self.mu_free) if f]
        for j in range(self.p):
            for i in range(j, self.p):
                if i == j and not self.var_free[j]:
                    continue
                out.append(("sigma", self.names[i], self.names[j]))
        return tuple(out)

    @property
    def n_mu(self) -> int:
        return int(self.mu_free.sum())

    def sigma_pattern(self) -> PatternSpec:
        fixed = ~self.var_free
        return PatternSpec.symmetric(self.p, fixed_diagonal=fixed, constants=np.diag(np.where(fixed, np.diag(self.sigma), 0.0)))

    @property
    def vector(self) -> np.ndarray:
        ls = build_lstructure(self.sigma_pattern())
        return np.concatenate([self.mu[self.mu_free], ls.elimination @ vec(self.sigma)])

    def with_vector(self, v: np.ndarray) -> MomentInput:
        v = np.asarray(v, float).reshape(-1)
        k = self.n_mu
        mu = self.mu.copy()
        mu[self.mu_free] = v[:k]
        ls = build_lstructure(self.sigma_pattern())
        pat = ls.pattern
        sig = (ls.duplication @ v[k:] + vec(pat.constants)).reshape(self.p, self.p, order="F")
        return MomentInput(self.names, sig, mu, self.mu_free, self.var_free, None, self.ordinal, self.thresholds, {}, self.threshold_fixed, self.n_obs)

    @classmethod
    def from_reparam(cls, rs: ReparamStats) -> MomentInput:
        acov = None
        se: dict[str, np.ndarray] = {}
        if rs.pi_acov is not None:
            order = rs.pi_order
            keep = [order[lab] for lab in rs.pi_labels if lab[0] != "tau"]
            acov = rs.pi_acov[np.ix_(keep, keep)]
            for name, t in rs.tau_ddot.items():
                s = np.zeros(t.size)
                for k in range(1, t.size + 1):
                    r = order.get(("tau", name, k))
                    if r is not None:
                        s[k - 1] = np.sqrt(max(rs.pi_acov[r, r], 0.0))
                se[name] = s
        fixed = {n: tuple(sorted(rs.spec.anchored_positions(n))) for n in rs.tau_ddot}
        ordinal = tuple(m.name for m in rs.metas if m.is_ordinal)
        mi = cls(
            tuple(rs.names), rs.sigma_ddot, rs.mu_ddot, rs.mu_free, rs.var_free, acov, ordinal,
            dict(rs.tau_ddot), se, fixed, rs.n_obs,
        )
        if acov is not None:
            expect = tuple(lab for lab in rs.pi_labels if lab[0] != "tau")
            if mi.labels != expect:
                raise AssertionError("moment ordering mismatch between reparam and fit input")
        return mi

    def to_json(self) -> dict:
        return {
            "names": list(self.names),
            "sigma": self.sigma.tolist(),
            "mu": self.mu.tolist(),
            "mu_free": self.mu_free.tolist(),
            "var_free": self.var_free.tolist(),
            "labels": [list(lab) for lab in self.labels],
            "acov": None if self.acov is None else self.acov.tolist(),
            "ordinal": list(self.ordinal),
            "thresholds": {k: v.tolist() for k, v in self.thresholds.items()},
            "threshold_se": {k: v.tolist() for k, v in self.threshold_se.items()},
            "threshold_fixed": {k: list(v) for k, v in self.threshold_fixed.items()},
            "n_obs": self.n_obs,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> MomentInput:
        mi = cls(
            tuple(obj["names"]),
            np.array(obj["sigma"], float),
            np.array(obj["mu"], float),
            np.array(obj["mu_free"], bool),
            np.array(obj["var_free"], bool),
            None if obj.get("acov") is None else np.array(obj["acov"], float),
            tuple(obj.get("ordinal", ())),
            {k: np.array(v, float) for k, v in obj.get("thresholds", {}).items()},
            {k: np.array(v, float) for k, v in obj.get("threshold_se", {}).items()},
            {k: tuple(v) for k, v in obj.get("threshold_fixed", {}).items()},
            obj.get("n_obs"),
        )
        if "labels" in obj and [tuple(x) for x in obj["labels"]] != list(mi.labels):
            raise ValueError("moment labels do not match the declared free means / variances")
        return mi


# -- model matrices ------------------------------------------------------------

@dataclass(frozen=True)
class ModelMatrices:
    lam: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    alpha_y: np.ndarray
    alpha_eta: np.ndarray


def implied_moments(mats: ModelMatrices) -> tuple[np.ndarray, np.ndarray]:
    """``Sigma = Lam F Psi F' Lam' + Theta`` and ``mu = alpha_y + Lam F alpha_eta``, ``F = (I - B)^{-1}``."""
    m = mats.beta.shape[0]
    ib = np.eye(m) - mats.beta
    if abs(np.linalg.det(ib)) < 1e-12:
        raise SpecificationError("I - B is singular")
    f = np.linalg.inv(ib)
    lf = mats.lam @ f
    sigma = lf @ mats.psi @ lf.T + mats.theta
    return 0.5 * (sigma + sigma.T), mats.alpha_y + lf @ mats.alpha_eta


def implied_jacobian(model: ModelSpec, mats: ModelMatrices, sigma_pattern: PatternSpec, theta_pattern: PatternSpec | None = None):
    """Analytic derivatives of ``upsilon(Sigma(theta))``.

    Returns a dict with blocks ``"lambda"``, ``"beta"`` (J1) and ``"psi"``,
    ``"theta"`` (J2), columns following the free indices of the model
    patterns (``theta_pattern`` overrides the error pattern).
    """
    p, m = model.p, model.m
    f = np.linalg.inv(np.eye(m) - mats.beta)
    lf = mats.lam @ f
    lfpf = lf @ mats.psi @ f.T  # Lam F Psi F'
    elim = build_lstructure(sigma_pattern).elimination
    eye_p = np.eye(p)
    out = {}
    ls_lam = build_lstructure(model.lam)
    # d vec(Lam M Lam') / d vec(Lam)' = (Lam M (x) I) + (I (x) Lam M) K, M = F Psi F'
    mmat = f @ mats.psi @ f.T
    lm = mats.lam @ mmat
    kt = commutation_matrix(m, p)  # maps vec(Lam) to vec(Lam')
    d_lam = np.kron(lm, eye_p) + np.kron(eye_p, lm) @ kt
    out["lambda"] = elim @ d_lam @ ls_lam.duplication
    ls_beta = build_lstructure(model.beta)
    kb = commutation_matrix(m, m)
    d_beta = np.kron(lfpf, lf) + np.kron(lf, lfpf) @ kb
    out["beta"] = elim @ d_beta @ ls_beta.duplication
    ls_psi = build_lstructure(model.psi)
    out["psi"] = elim @ np.kron(lf, lf) @ ls_psi.duplication
    ls_theta = build_lstructure(theta_pattern or model.theta)
    out["theta"] = elim @ ls_theta.duplication
    return out


# -- theta1 -------------------------------------------------------------------

@dataclass(frozen=True)
class _EqFit:
    eq: MiivEquation
    coef: np.ndarray
    intercept: float | None
    d_sigma_full: np.ndarray  # d coef / d vec(Sigma)'  (k x p^2)
    d_int_full: np.ndarray | None  # d intercept / d vec(Sigma)'
    d_int_mu: np.ndarray | None  # d intercept / d mu'  (p)


def _fit_equation(eq: MiivEquation, mi: MomentInput, idx: Mapping[str, int]) -> _EqFit:
    p = mi.p
    s = mi.sigma
    y = idx[eq.dependent]
    z = [idx[n] for n in eq.regressors]
    fx = [idx[n] for n, _ in eq.fixed]
    c = np.array([v for _, v in eq.fixed])
    v = [idx[n] for n in eq.instruments]
    k = len(z)
    d_full = np.zeros((k, p * p))
    coef = np.zeros(0)
    if k:
        s_vv = s[np.ix_(v, v)]
        if np.linalg.cond(s_vv) > 1e12:
            raise InstrumentError(f"equation {eq.label}: instrument covariance matrix is singular")
        s_vz = s[np.ix_(v, z)]
        s_vy = s[v, y] - (s[np.ix_(v, fx)] @ c if fx else 0.0)
        svv_inv = np.linalg.inv(s_vv)
        g0 = s_vz.T @ svv_inv  # S_vz' S_vv^-1
        u = g0 @ s_vz
        if np.linalg.matrix_rank(u) < k:
            raise IdentificationError(f"equation {eq.label}: instruments do not identify the regressors (rank condition)")
        u_inv = np.linalg.inv(u)
        coef = u_inv @ (g0 @ s_vy)
        nv = len(v)
        g = u_inv @ g0
        th = coef.reshape(-1, 1)
        svy = s_vy.reshape(-1, 1)
        # derivative blocks in the Kronecker form
        d_vz = (np.kron(svy.T @ svv_inv.T, u_inv) - np.kron(th.T @ s_vz.T @ svv_inv.T, u_inv)) @ commutation_matrix(k, nv) \
            - np.kron(th.T, g)
        d_vy = g
        d_vv = np.kron(th.T @ s_vz.T @ svv_inv.T, g) - np.kron(svy.T @ svv_inv.T, g)
        for a in range(nv):
            for j in range(k):
                d_full[:, v[a] + z[j] * p] += d_vz[:, a + j * nv]
            d_full[:, v[a] + y * p] += d_vy[:, a]
            for f_i, cf in zip(fx, c):
                d_full[:, v[a] + f_i * p] -= d_vy[:, a] * cf
            for b in range(nv):
                d_full[:, v[a] + v[b] * p] += d_vv[:, a + b * nv]

    involved = [y] + z + fx
    if not any(mi.mu_free[i] for i in involved):
        return _EqFit(eq, coef, None, d_full, None, None)
    mu = mi.mu
    intercept = mu[y] - (mu[z] @ coef if k else 0.0) - (mu[fx] @ c if fx else 0.0)
    d_mu = np.zeros(p)
    d_mu[y] += 1.0
    for j, zi in enumerate(z):
        d_mu[zi] -= coef[j]
    for fi, cf in zip(fx, c):
        d_mu[fi] -= cf
    d_int = -(mu[z] @ d_full) if k else np.zeros(p * p)
    return _EqFit(eq, coef, float(intercept), d_full, d_int, d_mu)


def _theta1_layout(model: ModelSpec, system: Sequence[MiivEquation], mi: MomentInput):
    """Labels of theta1 in [alpha_eta, alpha_y, upsilon(Lam), upsilon(B)] order."""
    lam_labels = [None] * model.lam.n_free
    for (i, j) in zip(*np.nonzero(model.lam.index)):
        lam_labels[model.lam.index[i, j] - 1] = ("lambda", model.observed[i], model.latent[j])
    beta_labels = [None] * model.beta.n_free
    for (i, j) in zip(*np.nonzero(model.beta.index)):
        beta_labels[model.beta.index[i, j] - 1] = ("beta", model.latent[i], model.latent[j])
    idx = {n: i for i, n in enumerate(mi.names)}
    eq_of = {eq.intercept: eq for eq in system}
    a_eta, a_y = [], []
    for g, eta in enumerate(model.latent):
        key = ("alpha_eta", eta, "")
        if key in eq_of:
            eq = eq_of[key]
            involved = [eq.dependent] + list(eq.regressors) + [n for n, _ in eq.fixed]
            if any(mi.mu_free[idx[n]] for n in involved):
                a_eta.append(("alpha_eta", eta))
        elif mi.mu_free[idx[model.observed[model.scaling[g]]]]:
            a_eta.append(("alpha_eta", eta))
    for eq in system:
        if eq.kind == "measurement":
            involved = [eq.dependent] + list(eq.regressors) + [n for n, _ in eq.fixed]
            if any(mi.mu_free[idx[n]] for n in involved):
                a_y.append(("alpha_y", eq.dependent))
    a_y.sort(key=lambda lab: model.obs_index(lab[1]))
    return a_eta + a_y + lam_labels + beta_labels, len(a_eta) + len(a_y)


def _theta1_core(model, system, mi):
    idx = {n: i for i, n in enumerate(mi.names)}
    fits = [_fit_equation(eq, mi, idx) for eq in system]
    labels, n_alpha = _theta1_layout(model, system, mi)
    pos = {lab: i for i, lab in enumerate(labels)}
    p = mi.p
    est = np.zeros(len(labels))
    d_sig = np.zeros((len(labels), p * p))
    d_mu = np.zeros((len(labels), p))
    for ef in fits:
        for j, lab in enumerate(ef.eq.params):
            r = pos[lab]
            est[r] = ef.coef[j]
            d_sig[r] = ef.d_sigma_full[j]
        if ef.intercept is not None:
            key = ("alpha_eta", ef.eq.intercept[1]) if ef.eq.kind == "structural" else ("alpha_y", ef.eq.dependent)
            r = pos[key]
            est[r] = ef.intercept
            d_sig[r] = ef.d_int_full
            d_mu[r] = ef.d_int_mu
    for g, eta in enumerate(model.latent):
        key = ("alpha_eta", eta)
        if key in pos and not any(eq.intercept == ("alpha_eta", eta, "") for eq in system):
            s = idx[model.observed[model.scaling[g]]]
            est[pos[key]] = mi.mu[s]
            d_mu[pos[key], s] = 1.0
    ls = build_lstructure(mi.sigma_pattern())
    k = np.hstack([d_mu[:, mi.mu_free], d_sig @ ls.duplication])
    return labels, n_alpha, est, k, fits


def fit_theta1(model: ModelSpec, system: Sequence[MiivEquation], mi: MomentInput):
    """MIIV-2SLS estimates: returns (labels, values) in theta1 order."""
    labels, _, est, _, _ = _theta1_core(model, system, mi)
    return labels, est


def theta1_jacobian(model: ModelSpec, system: Sequence[MiivEquation], mi: MomentInput) -> np.ndarray:
    """``K = d theta1 / d sigma'`` with columns in ``mi.labels`` order."""
    return _theta1_core(model, system, mi)[3]


def vcov_theta1(k: np.ndarray, mi: MomentInput) -> np.ndarray:
    if mi.acov is None:
        raise EstimationError("vcov_theta1", "moment input has no covariance matrix")
    v = k @ mi.acov @ k.T
    return 0.5 * (v + v.T)


# -- theta2 -------------------------------------------------------------------

def _matrices(model: ModelSpec, labels1, est1, mi: MomentInput) -> ModelMatrices:
    lam = model.lam.constants.copy()
    beta = model.beta.constants.copy()
    alpha_y = np.zeros(model.p)
    alpha_eta = np.zeros(model.m)
    for lab, v in zip(labels1, est1):
        if lab[0] == "lambda":
            lam[model.obs_index(lab[1]), model.lat_index(lab[2])] = v
        elif lab[0] == "beta":
            beta[model.lat_index(lab[1]), model.lat_index(lab[2])] = v
        elif lab[0] == "alpha_y":
            alpha_y[model.obs_index(lab[1])] = v
        elif lab[0] == "alpha_eta":
            alpha_eta[model.lat_index(lab[1])] = v
    return ModelMatrices(lam, beta, model.psi.constants.copy(), model.theta.constants.copy(), alpha_y, alpha_eta)


def _theta_pattern(model: ModelSpec, var_free: np.ndarray) -> PatternSpec:
    """Error pattern with variances of unit-variance responses removed (they are derived)."""
    free = model.theta.index > 0
    d = np.arange(model.p)
    free[d, d] &= var_free
    return PatternSpec.symmetric(model.p, free_mask=free, constants=model.theta.constants)


def _theta2_labels(model: ModelSpec, theta_pat: PatternSpec):
    labs = []
    for k, (i, j) in enumerate(model.psi.free_cells()):
        labs.append(("psi", model.latent[max(i, j)], model.latent[min(i, j)]))
    for k, (i, j) in enumerate(theta_pat.free_cells()):
        labs.append(("theta", model.observed[max(i, j)], model.observed[min(i, j)]))
    return labs


def _weight(acov: np.ndarray | None, n: int, mode: str) -> tuple[np.ndarray, bool]:
    if acov is None:
        return np.eye(n), False
    if mode == "diagonal":
        d = np.diag(acov)
        return np.diag(np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)), False
    if mode == "identity":
        return np.eye(n), False
    w_eval, w_vec = np.linalg.eigh(acov)
    cut = 1e-10 * max(w_eval.max(), 0.0)
    ridged = bool(np.any(w_eval <= cut))
    inv = np.where(w_eval > cut, 1.0 / np.where(w_eval > cut, w_eval, 1.0), 0.0)
    return (w_vec * inv) @ w_vec.T, ridged


def fit_theta2(model: ModelSpec, mats: ModelMatrices, mi: MomentInput, weight: str = "full"):
    """Closed-form GLS for the free (co)variances given theta1.

    Returns (labels, estimates, J2, H, flags) where ``H`` is the weighted
    least-squares projector.
    """
    theta_pat = _theta_pattern(model, mi.var_free[[mi.names.index(n) for n in model.observed]])
    sig_pat = _model_sigma_pattern(model, mi)
    jac = implied_jacobian(model, mats, sig_pat, theta_pat)
    j2 = np.hstack([jac["psi"], jac["theta"]])
    labels = _theta2_labels(model, theta_pat)
    ls = build_lstructure(sig_pat)
    s_vec = ls.elimination @ vec(_reorder_sigma(model, mi))
    base = ModelMatrices(mats.lam, mats.beta, model.psi.constants, theta_pat.constants, mats.alpha_y, mats.alpha_eta)
    c_vec = ls.elimination @ vec(implied_moments(base)[0])
    acov = _sigma_acov(model, mi)
    w, ridged = _weight(acov, j2.shape[0], weight)
    jw = j2.T @ w
    m = jw @ j2
    rank = np.linalg.matrix_rank(m)
    if rank < j2.shape[1]:
        _, _, vt = np.linalg.svd(j2)
        null = vt[-1]
        bad = [labels[i] for i in np.argsort(-np.abs(null))[: max(1, j2.shape[1] - rank)]]
        raise IdentificationError(f"variance parameters are not identified (null space involves {bad})")
    h = np.linalg.solve(m, jw)
    est = h @ (s_vec - c_vec)
    return labels, est, j2, h, {"ridge": ridged}, theta_pat


def _model_perm(model: ModelSpec, mi: MomentInput) -> list[int]:
    try:
        return [mi.names.index(n) for n in model.observed]
    except ValueError as exc:
        raise EstimationError("input", f"moment input lacks a model variable: {exc}") from None


def _reorder_sigma(model: ModelSpec, mi: MomentInput) -> np.ndarray:
    perm = _model_perm(model, mi)
    return mi.sigma[np.ix_(perm, perm)]


def _model_sigma_pattern(model: ModelSpec, mi: MomentInput) -> PatternSpec:
    perm = _model_perm(model, mi)
    fixed = ~mi.var_free[perm]
    sig = _reorder_sigma(model, mi)
    return PatternSpec.symmetric(model.p, fixed_diagonal=fixed, constants=np.diag(np.where(fixed, np.diag(sig), 0.0)))


def _sigma_map(model: ModelSpec, mi: MomentInput) -> np.ndarray:
    """Selection of the covariance part of ``sigma`` in model variable order.

    Rows follow the model-ordered Sigma pattern, columns ``mi.labels``.
    """
    order = {lab: i for i, lab in enumerate(mi.labels)}
    pat = _model_sigma_pattern(model, mi)
    rows = []
    for (i, j) in pat.free_cells():
        a, b = model.observed[i], model.observed[j]
        lab = ("sigma", a, b) if ("sigma", a, b) in order else ("sigma", b, a)
        rows.append(order[lab])
    sel = np.zeros((len(rows), len(order)))
    sel[np.arange(len(rows)), rows] = 1.0
    return sel


def _sigma_acov(model: ModelSpec, mi: MomentInput) -> np.ndarray | None:
    if mi.acov is None:
        return None
    sel = _sigma_map(model, mi)
    return sel @ mi.acov @ sel.T


def vcov_theta2(h: np.ndarray, j1: np.ndarray, k_bl: np.ndarray, acov_sigma: np.ndarray) -> np.ndarray:
    """``H (I - J1 K) Var(s) (I - J1 K)' H'`` over the covariance part of sigma."""
    a = h @ (np.eye(j1.shape[0]) - j1 @ k_bl)
    v = a @ acov_sigma @ a.T
    return 0.5 * (v + v.T)


# -- orchestration ---------------------------------------------------------------

@dataclass(frozen=True)
class ParamRow:
    label: tuple
    est: float
    se: float | None
    fixed: bool = False
    r2_shea: float | None = None

    @property
    def group(self) -> str:
        return self.label[0]

    @property
    def z(self) -> float | None:
        if self.se is None or self.fixed or not self.se > 0:
            return None
        return self.est / self.se

    @property
    def name(self) -> str:
        kind = self.label[0]
        if kind == "tau":
            return f"tau[{self.label[1]},{self.label[2]}]"
        return f"{kind}[{','.join(str(x) for x in self.label[1:])}]"


@dataclass(frozen=True)
class FitResult:
    params: tuple[ParamRow, ...]
    theta1_labels: tuple[tuple, ...]
    theta1: np.ndarray
    vcov_theta1: np.ndarray | None
    theta2_labels: tuple[tuple, ...]
    theta2: np.ndarray
    vcov_theta2: np.ndarray | None
    equations: tuple[MiivEquation, ...]
    shea: dict[str, np.ndarray]
    matrices: ModelMatrices
    sigma_implied: np.ndarray
    mu_implied: np.ndarray
    npd_sigma_zeta: bool
    npd_sigma_eps: bool
    warnings: tuple[str, ...] = ()
    moments: MomentInput | None = None

    @property
    def npd(self) -> bool:
        return self.npd_sigma_zeta or self.npd_sigma_eps

    def table(self) -> dict[tuple, ParamRow]:
        return {r.label: r for r in self.params}

    def estimate(self, label: tuple) -> float:
        return self.table()[label].est

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "parameters": [
                {"name": r.name, "label": list(r.label), "est": r.est, "se": r.se, "z": r.z, "r2_shea": r.r2_shea, "fixed": r.fixed}
                for r in self.params
            ],
            "equations": [
                {
                    "equation": eq.label,
                    "instruments": list(eq.instruments),
                    "shea_r2": dict(zip(eq.regressors, self.shea.get(eq.label, np.empty(0)).tolist())),
                }
                for eq in self.equations
            ],
            "npd_sigma_zeta": self.npd_sigma_zeta,
            "npd_sigma_eps": self.npd_sigma_eps,
            "warnings": list(self.warnings),
        }


def fit_moments(model: ModelSpec, mi: MomentInput, weight: str = "full") -> FitResult:
    """Estimate theta from a moment input."""
    missing = [n for n in model.observed if n not in mi.names]
    if missing:
        raise EstimationError("input", f"moment input lacks variable(s) {missing}")
    try:
        system = tuple(build_system(model))
    except (IdentificationError, SpecificationError) as exc:
        raise EstimationError("instruments", str(exc)) from exc
    try:
        labels1, n_alpha, est1, k_full, _ = _theta1_core(model, system, mi)
    except (IdentificationError, InstrumentError, np.linalg.LinAlgError) as exc:
        raise EstimationError("theta1", str(exc)) from exc
    mats = _matrices(model, labels1, est1, mi)
    try:
        labels2, est2, j2, h, flags, theta_pat = fit_theta2(model, mats, mi, weight)
    except (IdentificationError, np.linalg.LinAlgError, SpecificationError) as exc:
        raise EstimationError("theta2", str(exc)) from exc

    notes = []
    if flags["ridge"]:
        notes.append("Var(sigma) is numerically singular; its pseudo-inverse was used as weight")

    ls_psi = build_lstructure(model.psi)
    n_psi = model.psi.n_free
    psi = (ls_psi.duplication @ est2[:n_psi] + vec(model.psi.constants)).reshape(model.m, model.m, order="F")
    ls_th = build_lstructure(theta_pat)
    theta = (ls_th.duplication @ est2[n_psi:] + vec(theta_pat.constants)).reshape(model.p, model.p, order="F")
    # unit-variance responses: error variance is whatever the unit diagonal leaves over
    perm = _model_perm(model, mi)
    var_free = mi.var_free[perm]
    sig_star = _reorder_sigma(model, mi)
    mats = ModelMatrices(mats.lam, mats.beta, psi, theta, mats.alpha_y, mats.alpha_eta)
    common, _ = implied_moments(ModelMatrices(mats.lam, mats.beta, psi, np.zeros_like(theta), mats.alpha_y, mats.alpha_eta))
    for i in np.flatnonzero(~var_free):
        if model.theta.index[i, i] > 0:
            theta[i, i] = sig_star[i, i] - common[i, i]
    mats = ModelMatrices(mats.lam, mats.beta, psi, theta, mats.alpha_y, mats.alpha_eta)
    sigma_impl, mu_impl = implied_moments(mats)
    npd_z = bool(np.linalg.eigvalsh(psi).min() < -NPD_TOL)
    # derived variances of unit-variance responses are not estimates; they stay out of the check
    est_block = np.flatnonzero(var_free)
    npd_e = bool(est_block.size and np.linalg.eigvalsh(theta[np.ix_(est_block, est_block)]).min() < -NPD_TOL)

    v1 = v2 = None
    if mi.acov is not None:
        v1 = vcov_theta1(k_full, mi)
        sel = _sigma_map(model, mi)
        k_bl = k_full[n_alpha:] @ sel.T  # d theta_BL / d upsilon(Sigma*) in model order
        jac = implied_jacobian(model, mats, _model_sigma_pattern(model, mi), theta_pat)
        j1 = np.hstack([jac["lambda"], jac["beta"]])
        v2 = vcov_theta2(h, j1, k_bl, sel @ mi.acov @ sel.T)

    shea = {}
    for eq in system:
        try:
            shea[eq.label] = shea_r2(eq, mi.sigma, mi.names)
        except InstrumentError as exc:
            raise EstimationError("theta1", str(exc)) from exc

    r2_of = {}
    for eq in system:
        for lab, r2 in zip(eq.params, shea[eq.label]):
            r2_of[lab] = float(r2)
    rows: list[ParamRow] = []
    for (i, j) in zip(*np.nonzero((model.lam.index == 0) & (model.lam.constants != 0))):
        rows.append(ParamRow(("lambda", model.observed[i], model.latent[j]), float(model.lam.constants[i, j]), None, fixed=True))
    se1 = np.sqrt(np.clip(np.diag(v1), 0, None)) if v1 is not None else [None] * len(est1)
    for lab, e, s in zip(labels1, est1, se1):
        rows.append(ParamRow(lab, float(e), None if s is None else float(s), r2_shea=r2_of.get(lab)))
    se2 = np.sqrt(np.clip(np.diag(v2), 0, None)) if v2 is not None else [None] * len(est2)
    for lab, e, s in zip(labels2, est2, se2):
        rows.append(ParamRow(lab, float(e), None if s is None else float(s)))
    for name in model.observed:
        if name not in mi.thresholds:
            continue
        fixed = set(mi.threshold_fixed.get(name, ()))
        ses = mi.threshold_se.get(name)
        for k, t in enumerate(mi.thresholds[name], start=1):
            se = 0.0 if k in fixed else (None if ses is None else float(ses[k - 1]))
            rows.append(ParamRow(("tau", name, k), float(t), se, fixed=k in fixed))

    if npd_z:
        notes.append("estimated disturbance covariance matrix (Sigma_zeta) is not positive definite")
    if npd_e:
        notes.append("estimated error covariance matrix (Sigma_eps) is not positive definite")
    for w in notes:
        log.debug(w)

    return FitResult(
        tuple(rows), tuple(labels1), est1, v1, tuple(labels2), est2, v2, system, shea, mats,
        sigma_impl, mu_impl, npd_z, npd_e, tuple(notes), mi,
    )


def resolve_reparam(model: ModelSpec, metas: Sequence[VariableMeta], parameterization: str | None, anchors=None) -> ReparamSpec:
    """Anchors to use: explicit ``anchors``, else the model's, else defaults for ``alternative``."""
    if parameterization not in (None, "standard", "alternative"):
        raise ValueError(f"unknown parameterization {parameterization!r}")
    if parameterization == "standard":
        if anchors:
            raise ValueError("anchors were given but the standard parameterization was requested")
        return ReparamSpec.standard()
    if anchors:
        return ReparamSpec(anchors)
    if model.anchors:
        return ReparamSpec(model.anchors)
    if parameterization == "alternative":
        return ReparamSpec.first_two(metas)
    return ReparamSpec.standard()


def build_metas(model: ModelSpec, ordinal: Sequence[str] = ()) -> list[VariableMeta]:
    ords = set(ordinal) | set(model.thresholds)
    unknown = ords - set(model.observed)
    if unknown:
        raise EstimationError("input", f"ordinal declaration for variable(s) not in the model: {sorted(unknown)}")
    return [VariableMeta(n, "ordinal" if n in ords else "continuous") for n in model.observed]


def fit(
    model: ModelSpec,
    data=None,
    *,
    moments: MomentInput | None = None,
    ordinal: Sequence[str] = (),
    parameterization: str | None = None,
    anchors: Mapping[str, tuple] | None = None,
    weight: str = "full",
    acov: str = "sandwich",
    workers: int | None = None,
) -> FitResult:
    """End-to-end estimation from raw data or from a precomputed moment input."""
    if (data is None) == (moments is None):
        raise ValueError("pass exactly one of data or moments")
    if moments is None:
        metas = build_metas(model, ordinal)
        try:
            stats = assemble_omega(data, metas, acov=acov, workers=workers)
        except ValueError as exc:
            raise EstimationError("moments", str(exc)) from exc
        try:
            spec = resolve_reparam(model, stats.metas, parameterization, anchors)
            rs = transform_moments(stats, spec)
        except ValueError as exc:
            raise EstimationError("reparam", str(exc)) from exc
        moments = MomentInput.from_reparam(rs)
    return fit_moments(model, moments, weight)


def moments_from_data(model: ModelSpec, data, *, ordinal=(), parameterization=None, anchors=None, acov="sandwich") -> MomentInput:
    metas = build_metas(model, ordinal)
    stats = assemble_omega(data, metas, acov=acov)
    spec = resolve_reparam(model, stats.metas, parameterization, anchors)
    return MomentInput.from_reparam(transform_moments(stats, spec))


def dumps_moments(mi: MomentInput) -> str:
    return json.dumps({"schema_version": 1, **mi.to_json()}, indent=1, allow_nan=False)


def loads_moments(text: str) -> MomentInput:
    obj = json.loads(text)
    if obj.get("schema_version") != 1:
        raise ValueError(f"unsupported moment bundle schema_version {obj.get('schema_version')!r}")
    return MomentInput.from_json(obj)
