"""Monte Carlo laboratory: data-generating processes, coefficient designs,
evaluation metrics, and the experiment grid runner.

The two-stage model draws treatment from a logistic propensity index and the
outcome from a logistic outcome index shifted by one for treated units:

    D ~ Bernoulli(g(X'beta_D)),   Y ~ Bernoulli(g(X'beta_Y + D)),

with AR(1) Gaussian covariates (correlation rho^|i-j|).  The causal target
is recomputed per replication as the treated-sample average of
g(x'beta_Y + 1) - g(x'beta_Y): it is conditional on the realized treated
sample, so every estimate is scored against its own replication's truth.

Replication r of cell c uses the counter-based stream (master_seed,
CELL_TAG, c, r); results are therefore independent of execution order and
the worker pool schedule.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.signal import lfilter

from . import rng
from .balance import InfeasibleError
from .baselines import (
    DEFAULT_TRIM,
    aml,
    arb,
    dml,
    fit_propensity,
    ipw,
    naive,
    regression_impute,
)
from .data import Dataset
from .estimators import (
    DEFAULT_ZETA,
    Estimate,
    confidence_interval,
    cross_fit,
    estimate_atet,
    no_split,
    sample_split,
)
from .glm import LambdaRule, NumericError, fit_glm_with_rule
from .links import logit_link

_LOGIT = logit_link()

DESIGN_A_SHAPES = ("sparse", "dense")
DESIGN_C_SHAPES_Y = ("dense", "harmonic", "mod_sparse", "sparse")
DESIGN_C_SHAPES_D = ("dense", "sparse")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class SimConfig:
    """One simulation cell.

    Designs: "a" decaying-square outcome coefficients with sparse or dense
    propensity shapes and configurable norms; "b" the design-a sparse shapes
    with outcome norm pushed into the extreme-probability regime; "c" the
    cross-sparsity mix of named shape patterns at unit norms.
    """

    n: int = 500
    p: int = 800
    rho: float = 0.5
    design: str = "a"
    sparsity_d: str = "sparse"
    norm_d: float = 1.0
    norm_y: float = 1.0
    shape_y: str = "sparse"
    shape_d: str = "sparse"
    n_sim: int = 200
    seed: int = 0
    zeta: float = DEFAULT_ZETA

    def __post_init__(self):
        if self.n < 20:
            raise ValueError("n must be at least 20")
        if self.n_sim < 1:
            raise ValueError("n_sim must be positive")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if self.design not in ("a", "b", "c"):
            raise ValueError(f"unknown design {self.design!r}")
        if self.design == "a" and self.sparsity_d not in DESIGN_A_SHAPES:
            raise ValueError(f"design a sparsity_d must be in {DESIGN_A_SHAPES}")
        if self.design == "c":
            if self.shape_y not in DESIGN_C_SHAPES_Y:
                raise ValueError(f"design c shape_y must be in {DESIGN_C_SHAPES_Y}")
            if self.shape_d not in DESIGN_C_SHAPES_D:
                raise ValueError(f"design c shape_d must be in {DESIGN_C_SHAPES_D}")
            if self.shape_y == "mod_sparse" and self.p < 100:
                raise ValueError("moderately sparse pattern needs p >= 100")

    def label(self) -> str:
        if self.design == "a":
            return (f"a/{self.sparsity_d}/|bD|={self.norm_d:g}/|bY|={self.norm_y:g}/"
                    f"n={self.n}/p={self.p}")
        if self.design == "b":
            return f"b/|bY|={self.norm_y:g}/n={self.n}/p={self.p}"
        return f"c/{self.shape_y}-{self.shape_d}/n={self.n}/p={self.p}"


# ---------------------------------------------------------------------------
# Covariates and coefficients


def _ar1_from_generator(gen: np.random.Generator, n: int, p: int, rho: float) -> np.ndarray:
    eps = gen.standard_normal((n, p))
    if p == 1 or rho == 0.0:
        return eps
    eps[:, 1:] *= math.sqrt(1.0 - rho * rho)
    return lfilter([1.0], [1.0, -rho], eps, axis=1)


def ar1_gaussian_sample(n: int, p: int, rho: float, seed: int) -> np.ndarray:
    """Zero-mean Gaussian rows with covariance rho^|i-j| (exact, by the
    scalar recursion X_j = rho X_{j-1} + sqrt(1-rho^2) eps_j)."""
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie in (-1, 1)")
    return _ar1_from_generator(rng.stream(seed), n, p, rho)


def _shape(name: str, p: int) -> np.ndarray:
    j = np.arange(1, p + 1, dtype=float)
    if name == "inv_sq":
        return 1.0 / j**2
    if name == "inv_sqrt":
        return 1.0 / np.sqrt(j)
    if name == "harmonic":
        return 1.0 / (j + 9.0)
    if name == "mod_sparse":
        out = np.zeros(p)
        out[:10] = 10.0
        out[10:100] = 1.0
        return out
    if name == "flat_sparse":
        out = np.zeros(p)
        out[:10] = 1.0
        return out
    raise ValueError(f"unknown shape {name!r}")


def _scaled(shape: np.ndarray, norm: float) -> np.ndarray:
    return shape * (norm / np.linalg.norm(shape))


def coefficient_design(config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """(outcome coefficients, propensity coefficients) for the cell."""
    p = config.p
    if config.design == "a":
        beta_y = _scaled(_shape("inv_sq", p), config.norm_y)
        d_shape = "inv_sq" if config.sparsity_d == "sparse" else "inv_sqrt"
        beta_d = _scaled(_shape(d_shape, p), config.norm_d)
    elif config.design == "b":
        beta_y = _scaled(_shape("inv_sq", p), config.norm_y)
        beta_d = _scaled(_shape("inv_sq", p), 1.0)
    else:
        y_map = {"dense": "inv_sqrt", "harmonic": "harmonic",
                 "mod_sparse": "mod_sparse", "sparse": "flat_sparse"}
        d_map = {"dense": "inv_sqrt", "sparse": "flat_sparse"}
        beta_y = _scaled(_shape(y_map[config.shape_y], p), config.norm_y)
        beta_d = _scaled(_shape(d_map[config.shape_d], p), config.norm_d)
    return beta_y, beta_d


@dataclass(frozen=True)
class Replication:
    dataset: Dataset
    tau_true: float
    mu_c_true: float


def generate_replication(config: SimConfig, rep_seed: int) -> Replication:
    """Draw one dataset and its conditional causal target.

    Degenerate treatment draws (no treated unit, or fewer than two
    controls) are redrawn from derived sub-streams, at most 100 times.
    """
    beta_y, beta_d = coefficient_design(config)
    for attempt in range(100):
        gen = rng.stream(rep_seed, rng.REDRAW_TAG, attempt)
        x = _ar1_from_generator(gen, config.n, config.p, config.rho)
        d = (gen.random(config.n) < _LOGIT.g(x @ beta_d)).astype(np.int64)
        n_t = int(d.sum())
        if n_t < 1 or config.n - n_t < 2:
            continue
        index_y = x @ beta_y + d
        y = (gen.random(config.n) < _LOGIT.g(index_y)).astype(np.int64)
        treated = d == 1
        base = x[treated] @ beta_y
        tau_true = float(np.mean(_LOGIT.g(base + 1.0) - _LOGIT.g(base)))
        mu_c_true = float(np.mean(_LOGIT.g(base)))
        return Replication(Dataset(x=x, d=d, y=y), tau_true, mu_c_true)
    raise NumericError("treatment draws degenerate in 100 attempts")


# ---------------------------------------------------------------------------
# Metrics


def relative_mse(estimates, tau_true) -> float:
    """Mean squared estimation error relative to the target value."""
    est = np.asarray(estimates, dtype=float)
    tau = np.broadcast_to(np.asarray(tau_true, dtype=float), est.shape)
    if np.any(tau == 0.0):
        raise ValueError("relative error undefined for a zero target")
    return float(np.mean(((est - tau) / tau) ** 2))


def median_se(estimates, tau_true) -> float:
    """Median squared relative error (mean of central order statistics for
    even counts)."""
    est = np.asarray(estimates, dtype=float)
    tau = np.broadcast_to(np.asarray(tau_true, dtype=float), est.shape)
    if np.any(tau == 0.0):
        raise ValueError("relative error undefined for a zero target")
    return float(np.median(((est - tau) / tau) ** 2))


def coverage_and_length(results: list["RepResult"], method: str) -> tuple[float, float]:
    """Fraction of replications whose interval covers the replication's own
    target, and the mean interval length, over non-failed replications."""
    hits, lengths = [], []
    for rep in results:
        out = rep.methods.get(method)
        if out is None or out.error is not None:
            continue
        hits.append(out.ci_low <= rep.tau_true <= out.ci_high)
        lengths.append(out.ci_high - out.ci_low)
    if not hits:
        return math.nan, math.nan
    return float(np.mean(hits)), float(np.mean(lengths))


# ---------------------------------------------------------------------------
# Per-replication method outcomes


@dataclass(frozen=True)
class MethodOutcome:
    point: float = math.nan
    variance: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    mu_c: float = math.nan
    kkt: float = 0.0
    error: str | None = None

    @classmethod
    def from_estimate(cls, est: Estimate) -> "MethodOutcome":
        kkt = est.diagnostics.get("kkt", 0.0)
        if kkt is None or (isinstance(kkt, float) and math.isnan(kkt)):
            kkt = 0.0
        return cls(
            point=est.point,
            variance=est.variance,
            ci_low=est.ci_low,
            ci_high=est.ci_high,
            mu_c=float(est.diagnostics.get("mu_c", math.nan)),
            kkt=float(kkt),
        )


@dataclass(frozen=True)
class RepResult:
    tau_true: float
    mu_c_true: float
    methods: dict[str, MethodOutcome] = field(default_factory=dict)


KNOWN_METHODS = (
    "Naive", "Regression", "PlugIn", "IPW",
    "DML1", "DML2", "DML3", "DML4", "DML5",
    "AML", "ARB",
    "DB1", "DB2", "DB3", "DB4", "DB5", "DB6",
)


def _zeta_label(zeta: float) -> str:
    return f"DB6(zeta={zeta:g})"


def run_methods_once(
    data: Dataset,
    methods: tuple[str, ...],
    seed: int,
    zeta: float = DEFAULT_ZETA,
    zetas: tuple[float, ...] = (),
    lambda_rule: LambdaRule | None = None,
    trimming: tuple[float, float] = DEFAULT_TRIM,
    level: float = 0.95,
) -> dict[str, MethodOutcome]:
    """Evaluate the requested estimators on one dataset.

    Shares the full-control outcome fit across the no-split proposal, the
    regression baseline, the plug-in diagnostic, and any zeta sweep; every
    random component is seeded from a derived stream of ``seed``.
    """
    link = _LOGIT
    lambda_rule = lambda_rule or LambdaRule()
    out: dict[str, MethodOutcome] = {}

    def record(name: str, thunk):
        try:
            out[name] = MethodOutcome.from_estimate(thunk())
        except (InfeasibleError, NumericError, ValueError) as exc:
            out[name] = MethodOutcome(error=f"{type(exc).__name__}: {exc}")

    x_c = data.x[data.control_idx]
    y_c = data.y[data.control_idx].astype(float)
    y_t = data.y[data.treated_idx].astype(float)

    needs_full_fit = bool(
        {"DB6", "Regression", "PlugIn"} & set(methods) or zetas
    )
    fit_full = None
    if needs_full_fit:
        fit_full = fit_glm_with_rule(x_c, y_c, link, lambda_rule,
                                     seed=rng.child_seed(seed, 1))

    if "Naive" in methods:
        record("Naive", lambda: naive(data, level=level))
    if "Regression" in methods:
        record("Regression", lambda: regression_impute(
            data, link, lambda_rule, level=level, fit=fit_full))
    if "PlugIn" in methods:
        def _plug_in():
            g_t = np.asarray(link.g(data.x[data.treated_idx] @ fit_full.beta))
            mu = float(g_t.mean())
            point = float(y_t.mean()) - mu
            v_t = float(np.sum((y_t - y_t.mean()) ** 2) / y_t.size**2)
            lo, hi = confidence_interval(point, v_t, level)
            return Estimate(point=point, variance=v_t, ci_low=lo, ci_high=hi,
                            method="PlugIn",
                            diagnostics={"mu_c": mu, "kkt": fit_full.kkt})
        record("PlugIn", _plug_in)
    if "IPW" in methods:
        def _ipw():
            pfit = fit_propensity(data, lambda_rule, trimming,
                                  seed=rng.child_seed(seed, 2))
            est = ipw(data, pfit, level=level)
            est.diagnostics["kkt"] = pfit.kkt
            return est
        record("IPW", _ipw)

    dml_ks = sorted({int(m[3]) for m in methods if m.startswith("DML") and m != "DML1"})
    if "DML1" in methods and 2 not in dml_ks:
        dml_ks.append(2)
    for k in sorted(set(dml_ks)):
        name = f"DML{k}"
        wanted_cross = name in methods
        wanted_split = k == 2 and "DML1" in methods
        if not (wanted_cross or wanted_split):
            continue
        try:
            est = dml(data, link, k=k, scheme_kind="crossfit",
                      lambda_rule=lambda_rule, trimming=trimming,
                      seed=rng.child_seed(seed, 3), level=level)
            if wanted_cross:
                out[name] = MethodOutcome.from_estimate(est)
            if wanted_split:
                # The split variant scores only the last fold with nuisances
                # from the rest: exactly the last fold of the cross-fit run.
                tau1 = est.diagnostics["fold_estimates"][-1]
                var1 = est.diagnostics["fold_variances"][-1]
                lo, hi = confidence_interval(tau1, var1, level)
                out["DML1"] = MethodOutcome(
                    point=tau1, variance=var1, ci_low=lo, ci_high=hi,
                    kkt=float(est.diagnostics.get("kkt", 0.0)),
                )
        except (InfeasibleError, NumericError, ValueError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            if wanted_cross:
                out[name] = MethodOutcome(error=msg)
            if wanted_split:
                out["DML1"] = MethodOutcome(error=msg)

    if "AML" in methods:
        record("AML", lambda: aml(data, link, k=2, lambda_rule=lambda_rule,
                                  seed=rng.child_seed(seed, 3), level=level))
    if "ARB" in methods:
        record("ARB", lambda: arb(data, zeta=zeta, lambda_rule=lambda_rule,
                                  seed=rng.child_seed(seed, 4), level=level))

    if "DB6" in methods:
        record("DB6", lambda: estimate_atet(
            data, link, no_split(), zeta=zeta, lambda_rule=lambda_rule,
            level=level, beta_override=fit_full))
    for z in zetas:
        record(_zeta_label(z), lambda z=z: estimate_atet(
            data, link, no_split(), zeta=z, lambda_rule=lambda_rule,
            level=level, beta_override=fit_full))
    if "DB1" in methods:
        record("DB1", lambda: estimate_atet(
            data, link, sample_split(seed=rng.child_seed(seed, 6, 1)),
            zeta=zeta, lambda_rule=lambda_rule, level=level))
    for k in (2, 3, 4, 5):
        name = f"DB{k}"
        if name in methods:
            record(name, lambda k=k: estimate_atet(
                data, link, cross_fit(k, seed=rng.child_seed(seed, 6, k)),
                zeta=zeta, lambda_rule=lambda_rule, level=level))
    return out


# ---------------------------------------------------------------------------
# Experiment runner


@dataclass(frozen=True)
class MethodMetrics:
    rel_mse: float
    median_se: float
    coverage: float
    mean_ci_length: float
    n_fail: int
    n_used: int
    max_kkt: float
    flagged: bool


@dataclass(frozen=True)
class CellResult:
    config: SimConfig
    methods: dict[str, MethodMetrics]
    reps: list[RepResult]

    def estimates(self, method: str) -> np.ndarray:
        return np.array([
            rep.methods[method].point
            for rep in self.reps
            if method in rep.methods and rep.methods[method].error is None
        ])

    def tau_true(self) -> np.ndarray:
        return np.array([rep.tau_true for rep in self.reps])


def _run_replication(args) -> RepResult:
    config, master_seed, cell_index, r, methods, zetas, trim = args
    rep_seed = rng.child_seed(master_seed, rng.CELL_TAG, cell_index, r)
    rep = generate_replication(config, rep_seed)
    outcomes = run_methods_once(
        rep.dataset, methods, seed=rep_seed, zeta=config.zeta, zetas=zetas,
        trimming=trim,
    )
    return RepResult(tau_true=rep.tau_true, mu_c_true=rep.mu_c_true,
                     methods=outcomes)


def _cell_metrics(config: SimConfig, reps: list[RepResult],
                  method_names) -> dict[str, MethodMetrics]:
    metrics = {}
    for name in method_names:
        pts, taus, hits, lengths, kkts = [], [], [], [], []
        n_fail = 0
        for rep in reps:
            o = rep.methods.get(name)
            if o is None:
                continue
            if o.error is not None:
                n_fail += 1
                continue
            pts.append(o.point)
            taus.append(rep.tau_true)
            hits.append(o.ci_low <= rep.tau_true <= o.ci_high)
            lengths.append(o.ci_high - o.ci_low)
            kkts.append(o.kkt)
        if not pts:
            metrics[name] = MethodMetrics(math.nan, math.nan, math.nan, math.nan,
                                          n_fail, 0, math.nan, n_fail > 0)
            continue
        pts_a = np.array(pts)
        taus_a = np.array(taus)
        metrics[name] = MethodMetrics(
            rel_mse=relative_mse(pts_a, taus_a),
            median_se=median_se(pts_a, taus_a),
            coverage=float(np.mean(hits)),
            mean_ci_length=float(np.mean(lengths)),
            n_fail=n_fail,
            n_used=len(pts),
            max_kkt=float(np.max(kkts)) if kkts else math.nan,
            flagged=n_fail > 0.05 * config.n_sim,
        )
    return metrics


def run_experiment(
    cells: list[SimConfig],
    methods: tuple[str, ...] = ("Naive", "Regression", "IPW", "DB6"),
    master_seed: int = 0,
    parallelism: int = 1,
    zetas: tuple[float, ...] = (),
    trimming: tuple[float, float] = DEFAULT_TRIM,
) -> list[CellResult]:
    """Run every requested method over every cell's replications.

    Deterministic for a fixed (cells, master seed): replication streams are
    derived by counters, and aggregation is done in replication order
    regardless of the pool schedule.  Per-replication failures are recorded
    and excluded from the metrics; a cell/method with more than 5% failures
    is flagged.
    """
    if not cells:
        raise ValueError("empty cell grid")
    unknown = [m for m in methods if m not in KNOWN_METHODS]
    if unknown:
        raise ValueError(f"unknown methods: {unknown}")
    method_names = list(methods) + [_zeta_label(z) for z in zetas]
    results = []
    for cell_index, config in enumerate(cells):
        tasks = [
            (config, master_seed, cell_index, r, tuple(methods), tuple(zetas), trimming)
            for r in range(config.n_sim)
        ]
        if parallelism > 1:
            with ProcessPoolExecutor(max_workers=parallelism) as pool:
                reps = list(pool.map(_run_replication, tasks, chunksize=4))
        else:
            reps = [_run_replication(t) for t in tasks]
        results.append(
            CellResult(config=config, methods=_cell_metrics(config, reps, method_names),
                       reps=reps)
        )
    return results
