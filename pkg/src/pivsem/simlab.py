"""Monte Carlo harness: data generation, replication bookkeeping, RB/RBSE summaries.

Every replication draws from its own counter-based stream keyed by
``(seed, N, replication)``, so a study can be split across processes and
re-assembled in any order without changing a single number.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .gauss import norm_quantile
from .modelir import ModelSpec, parse_model
from .moments1 import Stage1Error, VariableMeta, assemble_omega
from .pivfit import EstimationError, ModelMatrices, MomentInput, fit_moments, implied_moments
from .reparam import ReparamError, ReparamSpec, transform_moments

__all__ = [
    "ConfigError",
    "StudyConfig",
    "StudySummary",
    "load_config",
    "benchmark_design",
    "generate_dataset",
    "population_values",
    "run_replication",
    "run_study",
    "summarize",
    "parameter_group",
    "GROUPS",
]

log = logging.getLogger(__name__)

GROUPS = (
    "tau",
    "alpha_eta",
    "alpha_y(c)",
    "alpha_y(o)",
    "Lambda(c)",
    "Lambda(o)",
    "B",
    "Sigma_eps(c)",
    "Sigma_eps(o)",
    "Sigma_zeta",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    """Declarative description of a simulation study.

    Population values are lists of ``(row, col, value)`` triples; the model
    syntax fixes which of them are free parameters.
    """

    model: str
    loadings: tuple[tuple[str, str, float], ...]
    regressions: tuple[tuple[str, str, float], ...] = ()
    latent_cov: tuple[tuple[str, str, float], ...] = ()
    error_cov: tuple[tuple[str, str, float], ...] = ()
    ordinal: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    intercepts: Mapping[str, float] = field(default_factory=dict)
    anchor_values: tuple[float, float] = (0.0, 1.0)
    sample_sizes: tuple[int, ...] = (100, 200, 400, 800, 3200)
    reps: int = 200
    seed: int = 0
    parameterizations: tuple[str, ...] = ("standard",)
    npd_policies: tuple[str, ...] = ("exclude", "include")
    weight: str = "full"
    name: str = "study"

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if not self.sample_sizes or any(int(n) < 2 for n in self.sample_sizes):
            raise ConfigError("sample sizes must be integers >= 2")
        for name, probs in self.ordinal.items():
            pr = np.asarray(probs, float)
            if pr.size < 2 or np.any(pr <= 0) or abs(pr.sum() - 1.0) > 1e-12:
                raise ConfigError(f"{name}: category probabilities must be positive and sum to 1")
        for p in self.parameterizations:
            if p not in ("standard", "alternative"):
                raise ConfigError(f"unknown parameterization {p!r}")
        for p in self.npd_policies:
            if p not in ("exclude", "include"):
                raise ConfigError(f"unknown NPD policy {p!r}")
        if self.weight not in ("full", "diagonal", "identity"):
            raise ConfigError(f"unknown weight mode {self.weight!r}")

    @property
    def spec(self) -> ModelSpec:
        return parse_model(self.model)

    def population_matrices(self) -> ModelMatrices:
        spec = self.spec
        p, m = spec.p, spec.m
        oi = {n: i for i, n in enumerate(spec.observed)}
        li = {n: i for i, n in enumerate(spec.latent)}
        lam = np.zeros((p, m))
        beta = np.zeros((m, m))
        psi = np.zeros((m, m))
        theta = np.zeros((p, p))
        try:
            for y, f, v in self.loadings:
                lam[oi[y], li[f]] = v
            for g, h, v in self.regressions:
                beta[li[g], li[h]] = v
            for a, b, v in self.latent_cov:
                psi[li[a], li[b]] = psi[li[b], li[a]] = v
            for a, b, v in self.error_cov:
                theta[oi[a], oi[b]] = theta[oi[b], oi[a]] = v
        except KeyError as exc:
            raise ConfigError(f"population value for a variable not in the model: {exc}") from None
        alpha_y = np.zeros(p)
        alpha_eta = np.zeros(m)
        for name, v in self.intercepts.items():
            if name in oi:
                alpha_y[oi[name]] = v
            elif name in li:
                alpha_eta[li[name]] = v
            else:
                raise ConfigError(f"intercept for unknown variable {name!r}")
        for mat, label in ((psi, "latent_cov"), (theta, "error_cov")):
            if np.linalg.eigvalsh(mat).min() <= 0:
                raise ConfigError(f"{label}: generating covariance matrix is not positive definite")
        return ModelMatrices(lam, beta, psi, theta, alpha_y, alpha_eta)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "model": self.model,
            "loadings": [list(t) for t in self.loadings],
            "regressions": [list(t) for t in self.regressions],
            "latent_cov": [list(t) for t in self.latent_cov],
            "error_cov": [list(t) for t in self.error_cov],
            "ordinal": {k: list(v) for k, v in self.ordinal.items()},
            "intercepts": dict(self.intercepts),
            "anchor_values": list(self.anchor_values),
            "sample_sizes": list(self.sample_sizes),
            "reps": self.reps,
            "seed": self.seed,
            "parameterizations": list(self.parameterizations),
            "npd_policies": list(self.npd_policies),
            "weight": self.weight,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> StudyConfig:
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown config key(s) {sorted(extra)}")
        if "model" not in obj or "loadings" not in obj:
            raise ConfigError("config needs 'model' and 'loadings'")
        trip = lambda rows: tuple((str(a), str(b), float(v)) for a, b, v in rows)  # noqa: E731
        return cls(
            model=obj["model"],
            loadings=trip(obj["loadings"]),
            regressions=trip(obj.get("regressions", ())),
            latent_cov=trip(obj.get("latent_cov", ())),
            error_cov=trip(obj.get("error_cov", ())),
            ordinal={k: tuple(float(x) for x in v) for k, v in obj.get("ordinal", {}).items()},
            intercepts={k: float(v) for k, v in obj.get("intercepts", {}).items()},
            anchor_values=tuple(obj.get("anchor_values", (0.0, 1.0))),
            sample_sizes=tuple(int(n) for n in obj.get("sample_sizes", (100, 200, 400, 800, 3200))),
            reps=int(obj.get("reps", 200)),
            seed=int(obj.get("seed", 0)),
            parameterizations=tuple(obj.get("parameterizations", ("standard",))),
            npd_policies=tuple(obj.get("npd_policies", ("exclude", "include"))),
            weight=str(obj.get("weight", "full")),
            name=str(obj.get("name", "study")),
        )


def load_config(path: str | Path) -> StudyConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return StudyConfig.from_json(obj)


def benchmark_design(**overrides) -> StudyConfig:
    """The bundled twelve-indicator, five-factor design."""
    text = resources.files("pivsem").joinpath("data/benchmark_design.json").read_text(encoding="utf-8")
    cfg = StudyConfig.from_json(json.loads(text))
    return replace(cfg, **overrides) if overrides else cfg


# -- generation ----------------------------------------------------------------

def _rng(seed: int, n: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, n, rep])))


def _population_cuts(config: StudyConfig, sigma: np.ndarray, mu: np.ndarray, names) -> dict[str, np.ndarray]:
    cuts = {}
    for name, probs in config.ordinal.items():
        j = names.index(name)
        z = norm_quantile(np.cumsum(probs)[:-1])
        cuts[name] = mu[j] + np.sqrt(sigma[j, j]) * np.asarray(z)
    return cuts


def generate_dataset(config: StudyConfig, n: int, rep: int = 0, seed: int | None = None) -> pd.DataFrame:
    """One replication: normal latent responses, ordinal ones cut into codes 1..C."""
    spec = config.spec
    mats = config.population_matrices()
    rng = _rng(config.seed if seed is None else seed, n, rep)
    m, p = spec.m, spec.p
    f = np.linalg.inv(np.eye(m) - mats.beta)
    zeta = rng.multivariate_normal(np.zeros(m), mats.psi, size=n, method="cholesky")
    eps = rng.multivariate_normal(np.zeros(p), mats.theta, size=n, method="cholesky")
    eta = (mats.alpha_eta + zeta) @ f.T
    ystar = mats.alpha_y + eta @ mats.lam.T + eps
    sigma, mu = implied_moments(mats)
    cuts = _population_cuts(config, sigma, mu, list(spec.observed))
    out = {}
    for j, name in enumerate(spec.observed):
        col = ystar[:, j]
        if name in cuts:
            out[name] = (np.searchsorted(cuts[name], col) + 1).astype(np.int64)
        else:
            out[name] = col
    return pd.DataFrame(out, columns=list(spec.observed))


# -- population values ------------------------------------------------------------

def _anchor_spec(config: StudyConfig, parameterization: str) -> ReparamSpec:
    if parameterization == "standard":
        return ReparamSpec.standard()
    a, b = config.anchor_values
    return ReparamSpec({n: ((1, a), (2, b)) for n, pr in config.ordinal.items() if len(pr) >= 3})


def population_values(config: StudyConfig, parameterization: str = "standard") -> dict[tuple, float]:
    """Generating parameters expressed in the given parameterization.

    Built directly from the population moments: ordinal responses are
    standardized, then shifted / scaled so the anchored thresholds take their
    fixed values, and the estimator is applied to the exact moments.
    """
    spec = config.spec
    sigma, mu = implied_moments(config.population_matrices())
    names = list(spec.observed)
    p = len(names)
    anchors = _anchor_spec(config, parameterization)
    ordinal = [n for n in names if n in config.ordinal]
    q1 = np.zeros(p)
    q2 = np.ones(p)
    taus = {}
    for name in ordinal:
        j = names.index(name)
        sd = math.sqrt(sigma[j, j])
        q2[j], q1[j] = 1.0 / sd, -mu[j] / sd  # standardize first
        tau = np.asarray(norm_quantile(np.cumsum(config.ordinal[name])[:-1]))
        pairs = anchors.anchors.get(name, ())
        if len(pairs) == 2:
            (ka, va), (kb, vb) = pairs
            s = (vb - va) / (tau[kb - 1] - tau[ka - 1])
            sh = va - s * tau[ka - 1]
        elif len(pairs) == 1:
            (ka, va), = pairs
            s, sh = 1.0, va - tau[ka - 1]
        else:
            s, sh = 1.0, 0.0
        q1[j] = sh + s * q1[j]
        q2[j] = s * q2[j]
        taus[name] = sh + s * tau
    sig = sigma * np.outer(q2, q2)
    mvec = q1 + q2 * mu
    is_ord = np.array([n in config.ordinal for n in names])
    shift = np.array([anchors.shifts(n) for n in names])
    scale = np.array([anchors.scales(n) for n in names])
    mi = MomentInput(
        tuple(names), sig, mvec, ~is_ord | shift, ~is_ord | scale, None, tuple(ordinal),
        taus, {}, {n: tuple(sorted(anchors.anchored_positions(n))) for n in ordinal},
    )
    res = fit_moments(spec, mi)
    return {r.label: r.est for r in res.params if not r.fixed}


# -- replications ----------------------------------------------------------------

@dataclass(frozen=True)
class RepOutcome:
    n: int
    rep: int
    parameterization: str
    status: str  # "ok" | "data" | "nonconverged"
    npd: bool = False
    est: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)
    shea: dict = field(default_factory=dict)
    message: str = ""


def run_replication(config: StudyConfig, n: int, rep: int) -> list[RepOutcome]:
    """Generate one dataset and fit it under every configured parameterization."""
    spec = config.spec
    data = generate_dataset(config, n, rep)
    metas = [VariableMeta(v, "ordinal" if v in config.ordinal else "continuous") for v in spec.observed]
    try:
        stats = assemble_omega(data, metas)
    except Stage1Error as exc:
        # an empty interior category makes the dataset unusable for any estimator
        kind = "data" if "zero observed frequency" in str(exc) else "nonconverged"
        return [RepOutcome(n, rep, par, kind, message=str(exc)) for par in config.parameterizations]
    out = []
    for par in config.parameterizations:
        try:
            rs = transform_moments(stats, _anchor_spec(config, par))
            res = fit_moments(spec, MomentInput.from_reparam(rs), weight=config.weight)
        except (EstimationError, ReparamError, np.linalg.LinAlgError) as exc:
            out.append(RepOutcome(n, rep, par, "nonconverged", message=str(exc)))
            continue
        est = {r.label: r.est for r in res.params if not r.fixed}
        se = {r.label: r.se for r in res.params if not r.fixed}
        shea = {eq: vals.tolist() for eq, vals in res.shea.items()}
        out.append(RepOutcome(n, rep, par, "ok", res.npd, est, se, shea))
    return out


def _run_cell(args) -> list[RepOutcome]:
    config, n, reps = args
    out = []
    for r in reps:
        out.extend(run_replication(config, n, r))
    return out


def parameter_group(label: tuple, ordinal: Iterable[str]) -> str | None:
    ords = set(ordinal)
    kind = label[0]
    tag = lambda name: "(o)" if name in ords else "(c)"  # noqa: E731
    if kind == "tau":
        return "tau"
    if kind == "alpha_eta":
        return "alpha_eta"
    if kind == "alpha_y":
        return "alpha_y" + tag(label[1])
    if kind == "lambda":
        return "Lambda" + tag(label[1])
    if kind == "beta":
        return "B"
    if kind == "theta":
        return "Sigma_eps" + tag(label[1])
    if kind == "psi":
        return "Sigma_zeta"
    return None


@dataclass(frozen=True)
class StudySummary:
    """Group-level RB / RBSE plus bookkeeping percentages.

    ``table`` has one row per (N, parameterization, NPD policy, group);
    ``rates`` one row per (N, parameterization); ``params`` the
    parameter-level statistics behind the group means.
    """

    table: pd.DataFrame
    rates: pd.DataFrame
    params: pd.DataFrame
    shea: pd.DataFrame
    replications: pd.DataFrame

    def rb(self, n: int, group: str, parameterization: str = "standard", policy: str = "exclude") -> float:
        return self._get(n, group, parameterization, policy, "RB")

    def rbse(self, n: int, group: str, parameterization: str = "standard", policy: str = "exclude") -> float:
        return self._get(n, group, parameterization, policy, "RBSE")

    def _get(self, n, group, par, policy, col) -> float:
        t = self.table
        sel = t[(t.N == n) & (t.group == group) & (t.parameterization == par) & (t.npd_policy == policy)]
        return float(sel[col].iloc[0]) if len(sel) else float("nan")

    def rate(self, n: int, column: str, parameterization: str = "standard") -> float:
        r = self.rates
        sel = r[(r.N == n) & (r.parameterization == parameterization)]
        return float(sel[column].iloc[0])

    def to_text(self) -> str:
        return format_bias_table(self)


def summarize(outcomes: Sequence[RepOutcome], config: StudyConfig) -> StudySummary:
    """Aggregate replications; independent of the order they arrive in."""
    outcomes = sorted(outcomes, key=lambda o: (o.n, o.parameterization, o.rep))
    ordinal = list(config.ordinal)
    pops = {par: population_values(config, par) for par in config.parameterizations}
    rows, prow, rate_rows, shea_rows, rep_rows = [], [], [], [], []
    for n in config.sample_sizes:
        for par in config.parameterizations:
            cell = [o for o in outcomes if o.n == n and o.parameterization == par]
            if not cell:
                continue
            ok = [o for o in cell if o.status == "ok"]
            usable = [o for o in cell if o.status != "data"]
            total = len(cell)
            rate_rows.append({
                "N": n,
                "parameterization": par,
                "replications": total,
                "data_failure_pct": 100.0 * sum(o.status == "data" for o in cell) / total,
                "nonconvergence_pct": 100.0 * (len(usable) - len(ok)) / max(len(usable), 1),
                "npd_pct": 100.0 * sum(o.npd for o in ok) / max(len(ok), 1),
            })
            for o in cell:
                rep_rows.append({"N": n, "parameterization": par, "rep": o.rep, "status": o.status, "npd": o.npd, "message": o.message})
            for eq in sorted({k for o in ok for k in o.shea}):
                vals = np.array([o.shea[eq] for o in ok if eq in o.shea])
                for j in range(vals.shape[1]):
                    shea_rows.append({
                        "N": n, "parameterization": par, "equation": eq, "regressor": j + 1,
                        "median": float(np.median(vals[:, j])), "q05": float(np.quantile(vals[:, j], 0.05)),
                        "q95": float(np.quantile(vals[:, j], 0.95)),
                    })
            pop = pops[par]
            for label, true in pop.items():
                group = parameter_group(label, ordinal)
                est_all = np.array([o.est.get(label, np.nan) for o in ok])
                se_all = np.array([o.se.get(label, np.nan) if o.se.get(label) is not None else np.nan for o in ok])
                npd = np.array([o.npd for o in ok], bool)
                sd = float(np.nanstd(est_all, ddof=1)) if np.sum(np.isfinite(est_all)) > 1 else np.nan
                for policy in config.npd_policies:
                    keep = ~npd if policy == "exclude" else np.ones_like(npd)
                    est = est_all[keep]
                    se = se_all[keep]
                    fin = np.isfinite(est)
                    rb = 100.0 * float(np.mean((est[fin] - true) / true)) if true != 0 and fin.any() else np.nan
                    fse = np.isfinite(se)
                    rbse = 100.0 * float(np.median((se[fse] - sd) / sd)) if fse.any() and sd > 0 else np.nan
                    prow.append({
                        "N": n, "parameterization": par, "npd_policy": policy, "group": group,
                        "parameter": _label_str(label), "true": true, "mean_est": float(np.nanmean(est)) if fin.any() else np.nan,
                        "sd": sd, "RB": rb, "RBSE": rbse, "used": int(fin.sum()),
                    })
    params = pd.DataFrame(prow)
    for (n, par, policy), sub in params.groupby(["N", "parameterization", "npd_policy"], sort=False):
        for g in GROUPS:
            gs = sub[sub.group == g]
            if gs.empty:
                continue
            rows.append({
                "N": n, "parameterization": par, "npd_policy": policy, "group": g,
                "RB": float(gs.RB.mean()) if gs.RB.notna().any() else np.nan,
                "RBSE": float(gs.RBSE.mean()) if gs.RBSE.notna().any() else np.nan,
                "parameters": len(gs),
            })
    return StudySummary(pd.DataFrame(rows), pd.DataFrame(rate_rows), params, pd.DataFrame(shea_rows), pd.DataFrame(rep_rows))


def _label_str(label: tuple) -> str:
    return f"{label[0]}[{','.join(str(x) for x in label[1:])}]"


def run_study(
    config: StudyConfig,
    *,
    sample_sizes: Sequence[int] | None = None,
    reps: int | None = None,
    workers: int | None = None,
    chunk: int = 10,
) -> StudySummary:
    """Run all replications (optionally in worker processes) and summarize."""
    if sample_sizes is not None or reps is not None:
        config = replace(
            config,
            sample_sizes=tuple(sample_sizes) if sample_sizes is not None else config.sample_sizes,
            reps=reps if reps is not None else config.reps,
        )
    tasks = []
    for n in config.sample_sizes:
        for start in range(0, config.reps, chunk):
            tasks.append((config, n, range(start, min(start + chunk, config.reps))))
    outcomes: list[RepOutcome] = []
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for res in ex.map(_run_cell, tasks):
                outcomes.extend(res)
    else:
        for t in tasks:
            outcomes.extend(_run_cell(t))
    return summarize(outcomes, config)


# -- reporting ----------------------------------------------------------------------

_GROUP_LABEL = {
    "tau": "tau",
    "alpha_eta": "alpha_eta",
    "alpha_y(c)": "alpha_y(c)",
    "alpha_y(o)": "alpha_y(o)",
    "Lambda(c)": "Lambda_y(c)",
    "Lambda(o)": "Lambda_y(o)",
    "B": "B",
    "Sigma_eps(c)": "Sigma_eps_y(c)",
    "Sigma_eps(o)": "Sigma_eps_y(o)",
    "Sigma_zeta": "Sigma_zeta",
}


def format_bias_table(summary: StudySummary) -> str:
    """Text table: groups down the side, sample sizes across, RB then RBSE."""
    t = summary.table
    lines = []
    if t.empty:
        return "no converged replications\n"
    ns = sorted(t.N.unique())
    for par in t.parameterization.unique():
        for policy in t.npd_policy.unique():
            head = "NPD matrices excluded" if policy == "exclude" else "all converged datasets"
            lines.append(f"{par} parameterization, {head}")
            for stat in ("RB", "RBSE"):
                lines.append(f"  {stat:<16}" + "".join(f"{'N=' + str(n):>9}" for n in ns))
                for g in GROUPS:
                    sub = t[(t.parameterization == par) & (t.npd_policy == policy) & (t.group == g)]
                    if sub.empty:
                        continue
                    vals = []
                    for n in ns:
                        s = sub[sub.N == n]
                        v = float(s[stat].iloc[0]) if len(s) else np.nan
                        vals.append(f"{v:9.1f}" if np.isfinite(v) else f"{'':>9}")
                    lines.append(f"  {_GROUP_LABEL[g]:<16}" + "".join(vals))
            lines.append("")
    r = summary.rates
    lines.append("Replication outcomes (%)")
    lines.append(f"  {'':<16}" + "".join(f"{'N=' + str(n):>9}" for n in ns))
    for par in r.parameterization.unique():
        for col, lab in (("npd_pct", "NPD"), ("nonconvergence_pct", "nonconverged"), ("data_failure_pct", "empty category")):
            sub = r[r.parameterization == par]
            vals = [float(sub[sub.N == n][col].iloc[0]) if (sub.N == n).any() else np.nan for n in ns]
            lines.append(f"  {par[:3] + ' ' + lab:<16}" + "".join(f"{v:9.1f}" for v in vals))
    return "\n".join(lines) + "\n"
