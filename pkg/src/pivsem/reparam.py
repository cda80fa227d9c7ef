"""Threshold reparameterization of stage-one statistics.

Fixing two thresholds of an ordinal latent response at user-chosen values
turns its (standardized) distribution into ``N(q1 q2, q2^2)``, so its mean
and variance become estimable.  Fixing a single threshold only shifts the
mean (``q2 = 1``).  Continuous variables and unanchored ordinal variables
pass through unchanged (``q1 = 0``, ``q2 = 1``).

The Jacobian ``L = d pi / d omega'`` is assembled from Kronecker-product
blocks over ``p x p`` diagonal matrices ``D_a``, ``D_b`` and ``D_tau,k``,
mapped to free elements with the duplication / elimination matrices of
:mod:`pivsem.patcalc`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .moments1 import StageOneStats, VariableMeta
from .patcalc import PatternSpec, build_lstructure

__all__ = [
    "ReparamError",
    "ReparamSpec",
    "ReparamStats",
    "compute_q",
    "transform_moments",
    "reparam_jacobian",
    "var_pi",
    "pi_vector",
]


class ReparamError(ValueError):
    """Invalid anchor specification or a singular threshold transform."""


@dataclass(frozen=True)
class ReparamSpec:
    """Anchored thresholds per ordinal variable.

    ``anchors[name]`` is a tuple of ``(k, value)`` pairs, ``k`` being the
    1-based threshold position.  Two pairs fix mean and variance, one pair
    fixes the mean only.  Variables not listed keep the standard
    parameterization.
    """

    anchors: Mapping[str, tuple[tuple[int, float], ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        clean = {}
        for name, pairs in self.anchors.items():
            pairs = tuple((int(k), float(v)) for k, v in pairs)
            if not 1 <= len(pairs) <= 2:
                raise ReparamError(f"{name}: give one or two anchored thresholds, got {len(pairs)}")
            if any(k < 1 for k, _ in pairs):
                raise ReparamError(f"{name}: threshold positions are 1-based")
            if len(pairs) == 2:
                (ka, va), (kb, vb) = pairs
                if ka == kb:
                    raise ReparamError(f"{name}: the two anchors must be different thresholds")
                if va == vb:
                    raise ReparamError(f"{name}: the two anchor values must differ")
                if (kb - ka) * (vb - va) < 0:
                    raise ReparamError(f"{name}: anchor values must increase with threshold position")
                pairs = tuple(sorted(pairs))
            clean[name] = pairs
        object.__setattr__(self, "anchors", clean)

    @classmethod
    def standard(cls) -> ReparamSpec:
        return cls({})

    @classmethod
    def first_two(cls, metas, values: tuple[float, float] = (0.0, 1.0)) -> ReparamSpec:
        """Anchor thresholds 1 and 2 of every ordinal variable with 3+ categories."""
        out = {}
        for m in metas:
            if m.is_ordinal and m.n_categories >= 3:
                out[m.name] = ((1, values[0]), (2, values[1]))
        return cls(out)

    @property
    def is_identity(self) -> bool:
        return not self.anchors

    def scales(self, name: str) -> bool:
        return len(self.anchors.get(name, ())) == 2

    def shifts(self, name: str) -> bool:
        return name in self.anchors

    def anchored_positions(self, name: str) -> set[int]:
        return {k for k, _ in self.anchors.get(name, ())}

    def validate(self, stats: StageOneStats) -> None:
        metas = {m.name: m for m in stats.metas}
        for name, pairs in self.anchors.items():
            if name not in metas:
                raise ReparamError(f"anchors given for unknown variable {name!r}")
            m = metas[name]
            if not m.is_ordinal:
                raise ReparamError(f"{name}: only ordinal variables take anchored thresholds")
            n_tau = len(stats.thresholds[name])
            for k, _ in pairs:
                if k > n_tau:
                    raise ReparamError(f"{name}: has {n_tau} threshold(s), cannot anchor threshold {k}")
            if len(pairs) == 2 and n_tau < 2:
                raise ReparamError(
                    f"{name}: a binary variable has a single threshold; only a mean shift (one anchor) is possible"
                )


@dataclass(frozen=True)
class ReparamStats:
    """Transformed thresholds, means and covariance matrix with ``Var(pi)``."""

    metas: tuple[VariableMeta, ...]
    spec: ReparamSpec
    tau_ddot: dict[str, np.ndarray]
    mu_ddot: np.ndarray
    sigma_ddot: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    pi_labels: tuple[tuple, ...]
    pi_acov: np.ndarray | None
    n_obs: int

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.metas]

    @property
    def Q1(self) -> np.ndarray:
        return np.diag(self.q1)

    @property
    def Q2(self) -> np.ndarray:
        return np.diag(self.q2)

    @property
    def pi_order(self) -> dict[tuple, int]:
        return {lab: i for i, lab in enumerate(self.pi_labels)}

    @property
    def mu_free(self) -> np.ndarray:
        return np.array([(not m.is_ordinal) or self.spec.shifts(m.name) for m in self.metas])

    @property
    def var_free(self) -> np.ndarray:
        return np.array([(not m.is_ordinal) or self.spec.scales(m.name) for m in self.metas])

    def sigma_pattern(self) -> PatternSpec:
        fixed = ~self.var_free
        return PatternSpec.symmetric(len(self.metas), fixed_diagonal=fixed, constants=np.diag(fixed.astype(float)))

    @property
    def pi(self) -> np.ndarray:
        return _pi_values(self.pi_labels, self.names, self.mu_ddot, self.tau_ddot, self.sigma_ddot)


def _pi_labels(stats: StageOneStats, spec: ReparamSpec) -> list[tuple]:
    metas = stats.metas
    labels: list[tuple] = [("mu", m.name) for m in metas if (not m.is_ordinal) or spec.shifts(m.name)]
    for m in metas:
        if m.is_ordinal:
            fixed = spec.anchored_positions(m.name)
            labels.extend(("tau", m.name, k) for k in range(1, len(stats.thresholds[m.name]) + 1) if k not in fixed)
    for j, mj in enumerate(metas):
        for i in range(j, len(metas)):
            if i == j and mj.is_ordinal and not spec.scales(mj.name):
                continue
            labels.append(("sigma", metas[i].name, mj.name))
    return labels


def _pi_values(labels, names, mu, tau, sigma) -> np.ndarray:
    idx = {n: i for i, n in enumerate(names)}
    out = np.empty(len(labels))
    for r, lab in enumerate(labels):
        if lab[0] == "mu":
            out[r] = mu[idx[lab[1]]]
        elif lab[0] == "tau":
            out[r] = tau[lab[1]][lab[2] - 1]
        else:
            out[r] = sigma[idx[lab[1]], idx[lab[2]]]
    return out


def compute_q(stats: StageOneStats, spec: ReparamSpec) -> tuple[np.ndarray, np.ndarray]:
    """Diagonals of ``Q1`` and ``Q2``.

    ``q2 = (t_b'' - t_a'') / (t_b - t_a)`` and
    ``q1 = -(t_a t_b'' - t_b t_a'') / (t_b'' - t_a'')``; with one anchor
    ``q2 = 1`` and ``q1 = t_a'' - t_a``.
    """
    spec.validate(stats)
    p = stats.p
    q1 = np.zeros(p)
    q2 = np.ones(p)
    for j, m in enumerate(stats.metas):
        pairs = spec.anchors.get(m.name)
        if not pairs:
            continue
        tau = stats.thresholds[m.name]
        if len(pairs) == 1:
            (ka, va), = pairs
            q1[j] = va - tau[ka - 1]
            continue
        (ka, va), (kb, vb) = pairs
        ta, tb = tau[ka - 1], tau[kb - 1]
        if tb == ta:
            raise ReparamError(f"{m.name}: anchored stage-one thresholds coincide; the transform is singular")
        q1[j] = -(ta * vb - tb * va) / (vb - va)
        q2[j] = (vb - va) / (tb - ta)
    return q1, q2


def transform_moments(stats: StageOneStats, spec: ReparamSpec, with_acov: bool = True) -> ReparamStats:
    """Apply the threshold transform; ``Var(pi)`` is added when ``stats`` carries ``omega_acov``."""
    q1, q2 = compute_q(stats, spec)
    tau_ddot = {}
    for j, m in enumerate(stats.metas):
        if not m.is_ordinal:
            continue
        t = (stats.thresholds[m.name] + q1[j]) * q2[j]
        for k, v in spec.anchors.get(m.name, ()):
            t[k - 1] = v  # exact, not merely within rounding
        tau_ddot[m.name] = t
    mu_ddot = q1 * q2 + stats.means
    sigma_ddot = q2[:, None] * stats.sigma * q2[None, :]
    labels = tuple(_pi_labels(stats, spec))
    acov = None
    if with_acov and stats.omega_acov is not None:
        acov = var_pi(stats, reparam_jacobian(stats, spec))
    return ReparamStats(stats.metas, spec, tau_ddot, mu_ddot, sigma_ddot, q1, q2, labels, acov, stats.n_obs)


def pi_vector(stats: StageOneStats, spec: ReparamSpec) -> np.ndarray:
    return transform_moments(stats, spec, with_acov=False).pi


def _q_kernels(stats: StageOneStats, spec: ReparamSpec, q2: np.ndarray):
    """Per-variable derivatives of q1, q2 with respect to t_a and t_b."""
    p = stats.p
    k1a, k1b, k2a, k2b = (np.zeros(p) for _ in range(4))
    for j, m in enumerate(stats.metas):
        pairs = spec.anchors.get(m.name)
        if not pairs:
            continue
        if len(pairs) == 1:
            k1a[j] = -1.0
            continue
        (ka, va), (kb, vb) = pairs
        tau = stats.thresholds[m.name]
        gap = tau[kb - 1] - tau[ka - 1]
        k1a[j] = -vb / (vb - va)
        k1b[j] = va / (vb - va)
        k2a[j] = q2[j] / gap
        k2b[j] = -q2[j] / gap
    return k1a, k1b, k2a, k2b


def reparam_jacobian(stats: StageOneStats, spec: ReparamSpec) -> np.ndarray:
    """``L = d pi / d omega'`` (rows: ``pi_labels``, columns: ``omega_labels``)."""
    q1, q2 = compute_q(stats, spec)
    p = stats.p
    eye = np.eye(p)
    Q1, Q2 = np.diag(q1), np.diag(q2)
    names = stats.names
    metas = stats.metas
    k1a, k1b, k2a, k2b = _q_kernels(stats, spec, q2)

    def kern(g):  # d vec(Q) / d vec(D)' for diagonal D and Q with dq_j/dd_j = g_j
        return np.kron(np.diag(g), eye)

    dQ1_da, dQ1_db, dQ2_da, dQ2_db = kern(k1a), kern(k1b), kern(k2a), kern(k2b)

    shift = np.array([spec.shifts(n) for n in names])
    scale = np.array([spec.scales(n) for n in names])
    ls_da = build_lstructure(PatternSpec.diagonal(p, free=shift, constants=(~shift).astype(float)))
    ls_db = build_lstructure(PatternSpec.diagonal(p, free=scale))
    ls_sigma = build_lstructure(stats.sigma_pattern())
    ordinal = stats.ordinal
    var_free = ~ordinal | scale
    ls_sigma_dd = build_lstructure(
        PatternSpec.symmetric(p, fixed_diagonal=~var_free, constants=np.diag((~var_free).astype(float)))
    )
    mu_free = ~ordinal
    mu_dd_free = ~ordinal | shift
    ls_mu = build_lstructure(PatternSpec.vector(mu_free))
    ls_mu_dd = build_lstructure(PatternSpec.vector(mu_dd_free))
    ls_mu_diag = build_lstructure(PatternSpec.diagonal(p, free=mu_dd_free))

    pi_labels = _pi_labels(stats, spec)
    rows = {lab: i for i, lab in enumerate(pi_labels)}
    cols = stats.omega_order
    L = np.zeros((len(pi_labels), len(cols)))

    def put(row_labels, col_labels, block):
        ri = [rows[r] for r in row_labels]
        ci = [cols[c] for c in col_labels]
        L[np.ix_(ri, ci)] += block

    def anchor_label(j, which):
        pairs = spec.anchors[names[j]]
        return ("tau", names[j], pairs[which][0])

    da_cols = [anchor_label(j, 0) for j in range(p) if shift[j]]
    db_cols = [anchor_label(j, 1) for j in range(p) if scale[j]]
    sigma_cols = [lab for lab in stats.omega_labels if lab[0] == "sigma"]
    mu_cols = [("mu", names[j]) for j in range(p) if mu_free[j]]

    # covariance rows
    sig_rows = [lab for lab in pi_labels if lab[0] == "sigma"]
    q2s = Q2 @ stats.sigma
    d_sig_dq2 = np.kron(q2s, eye) + np.kron(eye, q2s)
    if da_cols:
        put(sig_rows, da_cols, ls_sigma_dd.elimination @ d_sig_dq2 @ dQ2_da @ ls_da.duplication)
    if db_cols:
        put(sig_rows, db_cols, ls_sigma_dd.elimination @ d_sig_dq2 @ dQ2_db @ ls_db.duplication)
    put(sig_rows, sigma_cols, ls_sigma_dd.elimination @ np.kron(Q2, Q2) @ ls_sigma.duplication)

    # mean rows
    mu_rows = [lab for lab in pi_labels if lab[0] == "mu"]
    if da_cols:
        blk = np.kron(Q2, eye) @ dQ1_da + np.kron(eye, Q1) @ dQ2_da
        put(mu_rows, da_cols, ls_mu_diag.elimination @ blk @ ls_da.duplication)
    if db_cols:
        blk = np.kron(Q2, eye) @ dQ1_db + np.kron(eye, Q1) @ dQ2_db
        put(mu_rows, db_cols, ls_mu_diag.elimination @ blk @ ls_db.duplication)
    if mu_cols:
        put(mu_rows, mu_cols, ls_mu_dd.elimination @ ls_mu.duplication)

    # threshold rows, one diagonal block per threshold position k
    g = max((len(t) for t in stats.thresholds.values()), default=0)
    for k in range(1, g + 1):
        has = np.array(
            [
                m.is_ordinal and len(stats.thresholds[m.name]) >= k and k not in spec.anchored_positions(m.name)
                for m in metas
            ]
        )
        if not has.any():
            continue
        d_tau = np.diag([stats.thresholds[m.name][k - 1] if has[j] else 0.0 for j, m in enumerate(metas)])
        ls_tk = build_lstructure(PatternSpec.diagonal(p, free=has))
        tk = [("tau", names[j], k) for j in range(p) if has[j]]
        put(tk, tk, ls_tk.elimination @ np.kron(Q2, eye) @ ls_tk.duplication)
        if da_cols:
            blk = np.kron(Q2, eye) @ dQ1_da + np.kron(eye, Q1 + d_tau) @ dQ2_da
            put(tk, da_cols, ls_tk.elimination @ blk @ ls_da.duplication)
        if db_cols:
            blk = np.kron(Q2, eye) @ dQ1_db + np.kron(eye, Q1 + d_tau) @ dQ2_db
            put(tk, db_cols, ls_tk.elimination @ blk @ ls_db.duplication)
    return L


def var_pi(stats: StageOneStats, L: np.ndarray) -> np.ndarray:
    """Delta-method covariance ``L Sigma_omega L'``."""
    if stats.omega_acov is None:
        raise ReparamError("stage-one statistics carry no covariance matrix")
    if L.shape[1] != stats.omega_acov.shape[0]:
        raise ReparamError(f"Jacobian has {L.shape[1]} columns but omega has {stats.omega_acov.shape[0]} elements")
    out = L @ stats.omega_acov @ L.T
    return 0.5 * (out + out.T)
