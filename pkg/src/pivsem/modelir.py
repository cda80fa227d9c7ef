"""Model syntax, latent-to-observed transformation and instrument search.

Grammar (one statement per line or separated by ``;``; ``#`` starts a
comment)::

    F =~ y1 + y2 + 0.5*y3     loadings; the first indicator without a numeric
                              prefix scales F unless another carries ``1*``
    G ~ F + 0.3*H             latent regressions (numeric prefix fixes B)
    a ~~ b                    free (co)variance; ``0*b`` / ``.2*b`` fixes it
    y | t1 + 12*t2 + t3       thresholds; numeric prefixes anchor them
    y ~ 1                     declares an intercept to be estimated

Each latent variable is replaced by its scaling indicator minus that
indicator's error, which turns the model into one regression per
non-scaling indicator and one per endogenous latent variable.  Instruments
are found symbolically: an observed variable qualifies for an equation when
none of its error sources (its own measurement error, errors covarying with
it, and every disturbance feeding its factors) covaries with any component
of the equation's composite error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .patcalc import PatternSpec

__all__ = [
    "ModelSyntaxError",
    "SpecificationError",
    "IdentificationError",
    "InstrumentError",
    "ModelSpec",
    "MiivEquation",
    "parse_model",
    "to_estimating_system",
    "find_miivs",
    "build_system",
    "shea_r2",
    "serialize_model",
]


class ModelSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class SpecificationError(ValueError):
    """Structurally invalid model (e.g. singular I - B)."""


class IdentificationError(ValueError):
    """An equation has fewer instruments than free regressors."""


class InstrumentError(ValueError):
    """Instrument covariance matrix is singular."""


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Parsed model: patterns of the measurement and structural matrices.

    Pattern constants hold fixed values (1 for scaling loadings).  Observed
    variables are ordered by first appearance as indicators.
    """

    observed: tuple[str, ...]
    latent: tuple[str, ...]
    lam: PatternSpec
    beta: PatternSpec
    psi: PatternSpec
    theta: PatternSpec
    scaling: tuple[int, ...]
    anchors: dict[str, tuple[tuple[int, float], ...]] = field(default_factory=dict)
    thresholds: dict[str, tuple[int, ...]] = field(default_factory=dict)
    intercepts: tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return len(self.observed)

    @property
    def m(self) -> int:
        return len(self.latent)

    def obs_index(self, name: str) -> int:
        return self.observed.index(name)

    def lat_index(self, name: str) -> int:
        return self.latent.index(name)

    @property
    def scaling_names(self) -> tuple[str, ...]:
        return tuple(self.observed[i] for i in self.scaling)

    @property
    def endogenous(self) -> np.ndarray:
        return np.any(_nonzero(self.beta), axis=1)


def _nonzero(pat: PatternSpec) -> np.ndarray:
    return (pat.index > 0) | (pat.constants != 0)


# -- parsing -----------------------------------------------------------------

_NAME = r"[A-Za-z_.][A-Za-z0-9_.]*"
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TERM = re.compile(rf"\s*(?:(?P<num>{_NUM})\s*\*\s*)?(?P<name>{_NAME}|1)\s*$")
_OPS = ("=~", "~~", "~", "|")


@dataclass
class _Term:
    name: str
    value: float | None
    col: int


@dataclass
class _Stmt:
    lhs: str
    op: str
    terms: list[_Term]
    line: int
    col: int


def _split_statements(text: str):
    for ln, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        start = 0
        for piece in body.split(";"):
            offset = start
            start += len(piece) + 1
            if piece.strip():
                yield ln, offset, piece


def _parse_stmt(ln: int, offset: int, piece: str) -> _Stmt:
    for op in _OPS:
        at = piece.find(op)
        if at < 0:
            continue
        if op == "~" and piece[at:at + 2] in ("~~",):
            continue
        lhs = piece[:at].strip()
        if not re.fullmatch(_NAME, lhs):
            raise ModelSyntaxError(f"invalid left-hand side {lhs!r}", ln, offset + 1)
        rhs = piece[at + len(op):]
        terms = []
        pos = at + len(op)
        for chunk in rhs.split("+"):
            m = _TERM.match(chunk)
            col = offset + pos + (len(chunk) - len(chunk.lstrip())) + 1
            if m is None:
                raise ModelSyntaxError(f"cannot read term {chunk.strip()!r}", ln, col)
            num = m.group("num")
            terms.append(_Term(m.group("name"), None if num is None else float(num), col))
            pos += len(chunk) + 1
        return _Stmt(lhs, op, terms, ln, offset + piece.index(lhs) + 1)
    raise ModelSyntaxError("no operator (=~, ~, ~~, |) found", ln, offset + 1)


def parse_model(text: str) -> ModelSpec:
    """Parse model syntax into a :class:`ModelSpec`."""
    stmts = [_parse_stmt(ln, off, piece) for ln, off, piece in _split_statements(text)]
    if not any(s.op == "=~" for s in stmts):
        raise ModelSyntaxError("model has no measurement (=~) statement", 1, 1)

    latent: list[str] = []
    observed: list[str] = []
    loadings: dict[tuple[str, str], float | None] = {}
    where: dict[tuple[str, str], tuple[int, int]] = {}
    scaling_of: dict[str, str] = {}
    for s in stmts:
        if s.op != "=~":
            continue
        if s.lhs in latent:
            raise ModelSyntaxError(f"latent variable {s.lhs!r} defined twice", s.line, s.col)
        latent.append(s.lhs)
        explicit = [t for t in s.terms if t.value == 1.0]
        scale = explicit[0] if explicit else next((t for t in s.terms if t.value is None), None)
        if scale is None:
            raise ModelSyntaxError(f"{s.lhs}: no indicator can serve as scaling indicator", s.line, s.col)
        for t in s.terms:
            if t.name == "1":
                raise ModelSyntaxError("'1' is not a valid indicator", s.line, t.col)
            key = (t.name, s.lhs)
            if key in loadings:
                raise ModelSyntaxError(f"duplicate loading {s.lhs} =~ {t.name}", s.line, t.col)
            loadings[key] = 1.0 if t is scale else t.value
            where[key] = (s.line, t.col)
            if t.name not in observed:
                observed.append(t.name)
        scaling_of[s.lhs] = scale.name

    for name in observed:
        if name in latent:
            ln, col = where[next(k for k in loadings if k[0] == name)]
            raise ModelSyntaxError(f"{name!r} is used both as latent variable and indicator", ln, col)
    for f, y in scaling_of.items():
        others = [g for (yy, g) in loadings if yy == y and g != f]
        if others:
            ln, col = where[(y, others[0])]
            raise ModelSyntaxError(f"scaling indicator {y!r} of {f} also loads on {others[0]}", ln, col)

    p, m = len(observed), len(latent)
    oi = {n: i for i, n in enumerate(observed)}
    li = {n: i for i, n in enumerate(latent)}

    beta: dict[tuple[int, int], float | None] = {}
    cov_lat: dict[tuple[int, int], float | None] = {}
    cov_obs: dict[tuple[int, int], float | None] = {}
    anchors: dict[str, tuple[tuple[int, float], ...]] = {}
    thresholds: dict[str, tuple[int, ...]] = {}
    intercepts: list[str] = []

    def known(name: str, s: _Stmt, col: int):
        if name in li or name in oi:
            return
        raise ModelSyntaxError(f"unknown variable {name!r} (no measurement block defines it)", s.line, col)

    for s in stmts:
        if s.op == "~":
            if len(s.terms) == 1 and s.terms[0].name == "1":
                known(s.lhs, s, s.col)
                if s.lhs in intercepts:
                    raise ModelSyntaxError(f"duplicate intercept for {s.lhs}", s.line, s.col)
                intercepts.append(s.lhs)
                continue
            known(s.lhs, s, s.col)
            if s.lhs not in li:
                raise ModelSyntaxError(
                    f"{s.lhs!r} is observed; regressions are only supported among latent variables", s.line, s.col
                )
            for t in s.terms:
                if t.name == "1":
                    raise ModelSyntaxError("mix intercept and regressors in separate statements", s.line, t.col)
                known(t.name, s, t.col)
                if t.name not in li:
                    raise ModelSyntaxError(
                        f"{t.name!r} is observed; regressions are only supported among latent variables", s.line, t.col
                    )
                if t.name == s.lhs:
                    raise ModelSyntaxError(f"{s.lhs} cannot be regressed on itself", s.line, t.col)
                key = (li[s.lhs], li[t.name])
                if key in beta:
                    raise ModelSyntaxError(f"duplicate regression {s.lhs} ~ {t.name}", s.line, t.col)
                beta[key] = t.value
        elif s.op == "~~":
            known(s.lhs, s, s.col)
            for t in s.terms:
                known(t.name, s, t.col)
                both_lat = s.lhs in li and t.name in li
                both_obs = s.lhs in oi and t.name in oi
                if not (both_lat or both_obs):
                    raise ModelSyntaxError(
                        f"covariance {s.lhs} ~~ {t.name} mixes a latent and an observed variable", s.line, t.col
                    )
                table, idx = (cov_lat, li) if both_lat else (cov_obs, oi)
                i, j = idx[s.lhs], idx[t.name]
                key = (max(i, j), min(i, j))
                if key in table:
                    raise ModelSyntaxError(f"duplicate covariance {s.lhs} ~~ {t.name}", s.line, t.col)
                table[key] = t.value
        elif s.op == "|":
            if s.lhs not in oi:
                known(s.lhs, s, s.col)
                raise ModelSyntaxError(f"thresholds need an observed variable, got {s.lhs!r}", s.line, s.col)
            if s.lhs in thresholds:
                raise ModelSyntaxError(f"thresholds for {s.lhs} given twice", s.line, s.col)
            fixed = []
            seen = set()
            for t in s.terms:
                mt = re.fullmatch(r"t(\d+)", t.name)
                if mt is None or int(mt.group(1)) < 1:
                    raise ModelSyntaxError(f"threshold terms are named t1, t2, ...; got {t.name!r}", s.line, t.col)
                k = int(mt.group(1))
                if k in seen:
                    raise ModelSyntaxError(f"threshold t{k} listed twice", s.line, t.col)
                seen.add(k)
                if t.value is not None:
                    fixed.append((k, t.value))
            if len(fixed) > 2:
                raise ModelSyntaxError(f"{s.lhs}: at most two thresholds can be anchored", s.line, s.col)
            if fixed:
                anchors[s.lhs] = tuple(fixed)
            thresholds[s.lhs] = tuple(sorted(seen))

    # patterns -------------------------------------------------------------
    lam_free = np.zeros((p, m), bool)
    lam_const = np.zeros((p, m))
    for (y, f), v in loadings.items():
        if v is None:
            lam_free[oi[y], li[f]] = True
        else:
            lam_const[oi[y], li[f]] = v
    beta_free = np.zeros((m, m), bool)
    beta_const = np.zeros((m, m))
    for (i, j), v in beta.items():
        if v is None:
            beta_free[i, j] = True
        else:
            beta_const[i, j] = v

    endo = np.any(beta_free | (beta_const != 0), axis=1)
    psi_free = np.eye(m, dtype=bool)
    psi_const = np.zeros((m, m))
    exo = np.flatnonzero(~endo)
    for a in exo:
        for b in exo:
            psi_free[a, b] = True
    for (i, j), v in cov_lat.items():
        psi_free[i, j] = psi_free[j, i] = v is None
        if v is not None:
            psi_const[i, j] = psi_const[j, i] = v
    theta_free = np.eye(p, dtype=bool)
    theta_const = np.zeros((p, p))
    for (i, j), v in cov_obs.items():
        theta_free[i, j] = theta_free[j, i] = v is None
        if v is not None:
            theta_const[i, j] = theta_const[j, i] = v

    spec = ModelSpec(
        tuple(observed),
        tuple(latent),
        PatternSpec.from_mask(lam_free, lam_const),
        PatternSpec.from_mask(beta_free, beta_const),
        PatternSpec.symmetric(m, free_mask=psi_free, constants=psi_const),
        PatternSpec.symmetric(p, free_mask=theta_free, constants=theta_const),
        tuple(oi[scaling_of[f]] for f in latent),
        anchors,
        thresholds,
        tuple(intercepts),
    )
    _check_structure(spec)
    return spec


def _check_structure(spec: ModelSpec) -> None:
    nz = _nonzero(spec.beta).astype(float)
    cyclic = np.diag(_closure(nz))
    if not cyclic.any():
        return
    # a feedback loop is admissible only if I - B stays invertible; probe a generic point
    rng = np.random.default_rng(0)
    b = np.where(spec.beta.index > 0, rng.uniform(0.1, 0.9, nz.shape), spec.beta.constants)
    if abs(np.linalg.det(np.eye(spec.m) - b)) < 1e-12:
        cyc = [spec.latent[i] for i in np.flatnonzero(cyclic)]
        raise SpecificationError(f"I - B is structurally singular (cycle through {cyc})")


def _closure(adj: np.ndarray) -> np.ndarray:
    """Boolean reachability in one or more steps (adj[i, j]: j affects i)."""
    r = adj > 0
    for _ in range(adj.shape[0]):
        nxt = r | ((r.astype(int) @ r.astype(int)) > 0)
        if np.array_equal(nxt, r):
            break
        r = nxt
    return r


def serialize_model(spec: ModelSpec) -> str:
    """Canonical text for ``spec``; parse(serialize(x)) reproduces x."""

    def fmt(v: float) -> str:
        return repr(float(v))

    lines = []
    lam_nz = _nonzero(spec.lam)
    for f, name in enumerate(spec.latent):
        s = spec.scaling[f]
        terms = [f"1*{spec.observed[s]}"]
        for i in range(spec.p):
            if i == s or not lam_nz[i, f]:
                continue
            terms.append(spec.observed[i] if spec.lam.index[i, f] else f"{fmt(spec.lam.constants[i, f])}*{spec.observed[i]}")
        lines.append(f"{name} =~ " + " + ".join(terms))
    b_nz = _nonzero(spec.beta)
    for g in range(spec.m):
        terms = []
        for h in range(spec.m):
            if b_nz[g, h]:
                terms.append(spec.latent[h] if spec.beta.index[g, h] else f"{fmt(spec.beta.constants[g, h])}*{spec.latent[h]}")
        if terms:
            lines.append(f"{spec.latent[g]} ~ " + " + ".join(terms))
    endo = spec.endogenous
    for pat, names, default in (
        (spec.psi, spec.latent, lambda i, j: i == j or (not endo[i] and not endo[j])),
        (spec.theta, spec.observed, lambda i, j: i == j),
    ):
        for j in range(len(names)):
            for i in range(j, len(names)):
                free = pat.index[i, j] > 0
                if free == default(i, j) and (free or pat.constants[i, j] == 0):
                    continue
                rhs = names[i] if free else f"{fmt(pat.constants[i, j])}*{names[i]}"
                lines.append(f"{names[j]} ~~ {rhs}")
    for y, listed in spec.thresholds.items():
        anch = dict(spec.anchors.get(y, ()))
        terms = [f"{fmt(anch[k])}*t{k}" if k in anch else f"t{k}" for k in listed]
        lines.append(f"{y} | " + " + ".join(terms))
    for y in spec.intercepts:
        lines.append(f"{y} ~ 1")
    return "\n".join(lines) + "\n"


# -- estimating equations ----------------------------------------------------

@dataclass(frozen=True)
class MiivEquation:
    """One estimating equation ``dependent = intercept + regressors * coef + composite``.

    ``regressors`` carry free coefficients (labels in ``params``); ``fixed``
    lists regressors whose coefficient is a known constant.  ``composite``
    enumerates the error components as ``("eps", observed)`` or
    ``("zeta", latent)``.
    """

    kind: str  # "measurement" | "structural"
    dependent: str
    regressors: tuple[str, ...]
    params: tuple[tuple[str, str, str], ...]
    fixed: tuple[tuple[str, float], ...]
    intercept: tuple[str, str]
    composite: tuple[tuple[str, str], ...]
    instruments: tuple[str, ...] = ()

    @property
    def label(self) -> str:
        rhs = list(self.regressors) + [n for n, _ in self.fixed]
        return f"{self.dependent} ~ {' + '.join(rhs) if rhs else '1'}"


def to_estimating_system(model: ModelSpec) -> list[MiivEquation]:
    """Latent-to-observed transformation; instruments are left empty."""
    b_nz = _nonzero(model.beta)
    if np.any(np.diag(b_nz)):
        raise SpecificationError("B must have a zero diagonal")
    if b_nz.any():
        _check_structure(model)
    lam_nz = _nonzero(model.lam)
    scal = set(model.scaling)
    eqs = []
    for i, y in enumerate(model.observed):
        if i in scal:
            continue
        facs = np.flatnonzero(lam_nz[i])
        regs, params, fixed = [], [], []
        comp = [("eps", y)]
        for f in facs:
            s = model.observed[model.scaling[f]]
            comp.append(("eps", s))
            if model.lam.index[i, f]:
                regs.append(s)
                params.append(("lambda", y, model.latent[f]))
            else:
                fixed.append((s, float(model.lam.constants[i, f])))
        eqs.append(
            MiivEquation("measurement", y, tuple(regs), tuple(params), tuple(fixed), ("alpha_y", y, ""), tuple(comp))
        )
    for g, eta in enumerate(model.latent):
        preds = np.flatnonzero(b_nz[g])
        if preds.size == 0:
            continue
        dep = model.observed[model.scaling[g]]
        regs, params, fixed = [], [], []
        comp = [("eps", dep)]
        for h in preds:
            s = model.observed[model.scaling[h]]
            comp.append(("eps", s))
            if model.beta.index[g, h]:
                regs.append(s)
                params.append(("beta", eta, model.latent[h]))
            else:
                fixed.append((s, float(model.beta.constants[g, h])))
        comp.append(("zeta", eta))
        eqs.append(
            MiivEquation("structural", dep, tuple(regs), tuple(params), tuple(fixed), ("alpha_eta", eta, ""), tuple(comp))
        )
    return eqs


def _error_sources(model: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Boolean maps: observed v covaries with eps_k / with zeta_g."""
    th_nz = _nonzero(model.theta) | np.eye(model.p, dtype=bool)
    b_nz = _nonzero(model.beta).astype(float)
    # total effects: zeta_h reaches eta_l if h == l or a directed path h -> l
    reach = _closure(b_nz) | np.eye(model.m, dtype=bool)  # reach[l, h]
    ps_nz = _nonzero(model.psi) | np.eye(model.m, dtype=bool)
    lam_nz = _nonzero(model.lam)
    zeta_in = (lam_nz.astype(int) @ reach.astype(int)) > 0  # v x h
    zeta_cov = (zeta_in.astype(int) @ ps_nz.astype(int)) > 0  # v x g
    return th_nz, zeta_cov


def find_miivs(system: list[MiivEquation], model: ModelSpec) -> list[MiivEquation]:
    """Fill each equation's instrument set from the model's error structure."""
    eps_cov, zeta_cov = _error_sources(model)
    oi = {n: i for i, n in enumerate(model.observed)}
    li = {n: i for i, n in enumerate(model.latent)}
    out = []
    for eq in system:
        inst = []
        for v, name in enumerate(model.observed):
            bad = False
            for kind, comp in eq.composite:
                if kind == "eps" and eps_cov[v, oi[comp]]:
                    bad = True
                elif kind == "zeta" and zeta_cov[v, li[comp]]:
                    bad = True
                if bad:
                    break
            if not bad:
                inst.append(name)
        if len(inst) < len(eq.regressors):
            raise IdentificationError(
                f"equation {eq.label}: {len(inst)} model-implied instrument(s) for "
                f"{len(eq.regressors)} regressor(s); the order condition fails"
            )
        out.append(MiivEquation(**{**eq.__dict__, "instruments": tuple(inst)}))
    return out


def build_system(model: ModelSpec) -> list[MiivEquation]:
    return find_miivs(to_estimating_system(model), model)


def shea_r2(equation: MiivEquation, sigma: np.ndarray, names) -> np.ndarray:
    """Shea's partial R^2 per free regressor from a moment matrix.

    ``diag(S_xv S_vv^{-1} S_vx S_xx^{-1})`` with ``x`` the regressors and
    ``v`` the instruments.
    """
    idx = {n: i for i, n in enumerate(names)}
    v = [idx[n] for n in equation.instruments]
    x = [idx[n] for n in equation.regressors]
    if not x:
        return np.empty(0)
    s_vv = sigma[np.ix_(v, v)]
    if np.linalg.cond(s_vv) > 1e12:
        raise InstrumentError(f"equation {equation.label}: instrument covariance matrix is singular")
    s_vx = sigma[np.ix_(v, x)]
    s_xx = sigma[np.ix_(x, x)]
    m = s_vx.T @ np.linalg.solve(s_vv, s_vx) @ np.linalg.inv(s_xx)
    return np.clip(np.diag(m), 0.0, 1.0)
