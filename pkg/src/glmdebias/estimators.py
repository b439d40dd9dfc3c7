"""Debiased estimators for the control counterfactual mean, the ATET, and
dense linear contrasts, with feasible variances and normal confidence
intervals.

The point estimator augments a penalized-GLM plug-in over the target sample
with a weighted sum of control residuals, the weights coming from the
balancing program.  Three control-splitting schemes are supported:

* sample split: fit on one half of the controls, weight on the other;
* k-fold cross-fit: every fold serves once as the weighting sample with the
  complement as the fitting sample, estimates averaged;
* no split: fitting and weighting both use all controls.

Variance of the correction is sum_i gamma_i^2 g(1-g) evaluated at the fitted
index; the ATET adds the treated-outcome sample variance over n_t^2.
Cross-fit point estimates are averaged with equal weights and their
variances with weight 1/k^2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import rng
from .balance import (
    BalanceProblem,
    InfeasibleError,
    SolverStatus,
    WeightSolution,
    compute_target_moment,
    default_cap_constrained,
    default_cap_lagrange,
    default_imbalance_bound,
    solve_weights_constrained,
    solve_weights_lagrange,
)
from .data import Dataset
from .glm import GlmFit, LambdaRule, fit_glm_with_rule
from .links import Link

DEFAULT_ZETA = 0.5


# ---------------------------------------------------------------------------
# Normal quantile and confidence intervals


def z_quantile(prob: float) -> float:
    """Standard normal quantile via a rational approximation polished by one
    Halley step on the complementary error function (|error| well below
    1e-9; no statistical library needed)."""
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie strictly in (0, 1), got {prob}")
    # Acklam coefficients.
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low = 0.02425
    if prob < p_low:
        q = math.sqrt(-2.0 * math.log(prob))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif prob <= 1.0 - p_low:
        q = prob - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
            ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - prob))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # Halley refinement: F(x) - prob with F the normal CDF.
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - prob
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def confidence_interval(point: float, variance: float, level: float = 0.95) -> tuple[float, float]:
    """Two-sided normal interval point +- z * sqrt(variance)."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    half = z_quantile(0.5 * (1.0 + level)) * math.sqrt(variance)
    return point - half, point + half


# ---------------------------------------------------------------------------
# Splitting schemes


NO_SPLIT = "no-split"
SAMPLE_SPLIT = "sample-split"
CROSS_FIT = "cross-fit"


@dataclass(frozen=True)
class SplitScheme:
    """How the control sample is divided between fitting and weighting."""

    kind: str
    k: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (NO_SPLIT, SAMPLE_SPLIT, CROSS_FIT):
            raise ValueError(f"unknown split scheme {self.kind!r}")
        if self.kind == CROSS_FIT and self.k < 2:
            raise ValueError("cross-fit needs at least 2 folds")

    @property
    def label(self) -> str:
        if self.kind == NO_SPLIT:
            return "DB6"
        if self.kind == SAMPLE_SPLIT:
            return "DB1"
        return f"DB{self.k}"

    def control_folds(self, n_c: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """(fit positions, weight positions) pairs within the control sample.

        Sample split: disjoint halves covering all controls, fitting on the
        larger half when n_c is odd.  Cross-fit: each fold is the weighting
        sample once, complement fits.  No split: both sides are everything.
        """
        all_pos = np.arange(n_c)
        if self.kind == NO_SPLIT:
            return [(all_pos, all_pos)]
        if self.kind == SAMPLE_SPLIT:
            perm = rng.permutation(n_c, self.seed, rng.SPLIT_TAG)
            n_fit = (n_c + 1) // 2
            return [(np.sort(perm[:n_fit]), np.sort(perm[n_fit:]))]
        if self.k > n_c:
            raise ValueError(f"cross-fit with k={self.k} exceeds control count {n_c}")
        perm = rng.permutation(n_c, self.seed, rng.SPLIT_TAG)
        folds = np.array_split(perm, self.k)
        out = []
        for i in range(self.k):
            weight = np.sort(folds[i])
            fit = np.sort(np.concatenate([folds[j] for j in range(self.k) if j != i]))
            out.append((fit, weight))
        return out


def no_split(seed: int = 0) -> SplitScheme:
    return SplitScheme(NO_SPLIT, seed=seed)


def sample_split(seed: int = 0) -> SplitScheme:
    return SplitScheme(SAMPLE_SPLIT, seed=seed)


def cross_fit(k: int = 2, seed: int = 0) -> SplitScheme:
    return SplitScheme(CROSS_FIT, k=k, seed=seed)


def db_scheme(name: str, seed: int = 0) -> SplitScheme:
    """Scheme for the standard variant names db1 through db6."""
    name = name.lower()
    if name == "db1":
        return sample_split(seed)
    if name == "db6":
        return no_split(seed)
    if name in ("db2", "db3", "db4", "db5"):
        return cross_fit(int(name[2]), seed)
    raise ValueError(f"unknown variant {name!r}; expected db1..db6")


# ---------------------------------------------------------------------------
# Estimates


@dataclass(frozen=True)
class Estimate:
    point: float
    variance: float
    ci_low: float
    ci_high: float
    method: str
    split: SplitScheme | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.ci_low <= self.point <= self.ci_high:
            raise ValueError("confidence interval must bracket the point estimate")


def variance_components(
    gamma: np.ndarray,
    x_weight: np.ndarray,
    beta: np.ndarray,
    link: Link,
    treated_y: np.ndarray,
) -> tuple[float, float, float]:
    """(v_c, v_t, v_tau): correction variance, treated-mean variance, sum."""
    gamma = np.asarray(gamma, dtype=float)
    u = np.asarray(x_weight, dtype=float) @ np.asarray(beta, dtype=float)
    w = np.asarray(link.variance_weight(u), dtype=float)
    v_c = float(np.sum(gamma * gamma * w))
    ty = np.asarray(treated_y, dtype=float)
    n_t = ty.size
    v_t = float(np.sum((ty - ty.mean()) ** 2) / n_t**2)
    return v_c, v_t, v_c + v_t


# ---------------------------------------------------------------------------
# Fold-level computation


@dataclass(frozen=True)
class FoldResult:
    mu_c: float
    plug_in: float
    correction: float
    v_c: float
    fit: GlmFit
    weights: WeightSolution
    problem: BalanceProblem


def _fit_fold_beta(x_fit, y_fit, link, lambda_rule, seed, beta_override) -> GlmFit:
    if beta_override is not None:
        if isinstance(beta_override, GlmFit):
            return beta_override
        beta = np.asarray(beta_override, dtype=float)
        return GlmFit(beta=beta, lam=0.0, objective=math.nan, iterations=0,
                      converged=True, kkt=math.nan)
    return fit_glm_with_rule(x_fit, y_fit, link, lambda_rule, seed=seed)


def _solve_fold_weights(
    problem: BalanceProblem,
    zeta: float,
    program: str,
    imbalance_bound: float | None,
) -> WeightSolution:
    if program == "lagrange":
        sol = solve_weights_lagrange(problem, zeta=zeta)
    elif program == "constrained":
        bound = (
            imbalance_bound
            if imbalance_bound is not None
            else default_imbalance_bound(problem.n_w, problem.p)
        )
        sol = solve_weights_constrained(problem, bound)
    else:
        raise ValueError(f"unknown program form {program!r}")
    if sol.status == SolverStatus.INFEASIBLE:
        raise InfeasibleError(
            "balancing program infeasible for this subsample",
            min_imbalance=sol.certificate,
        )
    return sol


def _debias_fold(
    x_fit,
    y_fit,
    x_weight,
    y_weight,
    x_target,
    link: Link,
    zeta: float,
    lambda_rule: LambdaRule,
    seed: int,
    beta_override=None,
    program: str = "lagrange",
    imbalance_bound: float | None = None,
    cap: float | None = None,
    simplex: bool = True,
    xi: np.ndarray | None = None,
) -> FoldResult:
    """One fitting/weighting pass: plug-in over the target sample plus
    gamma-weighted residual correction over the weighting sample."""
    fit = _fit_fold_beta(x_fit, y_fit, link, lambda_rule, seed, beta_override)
    beta = fit.beta
    if xi is None:
        xi = compute_target_moment(x_target, beta, link)
        if np.max(np.abs(xi)) < 1e-6:
            warnings.warn(
                "target moment is numerically degenerate (sup norm < 1e-6); "
                "the variance lower bound behind the normal approximation "
                "may fail",
                RuntimeWarning,
                stacklevel=3,
            )
    n_w = x_weight.shape[0]
    if cap is None:
        cap = (
            default_cap_lagrange(n_w)
            if program == "lagrange"
            else default_cap_constrained(n_w)
        )
    problem = BalanceProblem.from_model(
        x_weight, beta, link, xi=xi, cap=cap, simplex=simplex
    )
    sol = _solve_fold_weights(problem, zeta, program, imbalance_bound)
    g_target = np.asarray(link.g(x_target @ beta), dtype=float)
    g_weight = np.asarray(link.g(x_weight @ beta), dtype=float)
    plug_in = float(g_target.mean())
    correction = float(sol.gamma @ (y_weight - g_weight))
    v_c = float(np.sum(sol.gamma**2 * link.variance_weight(x_weight @ beta)))
    return FoldResult(
        mu_c=plug_in + correction,
        plug_in=plug_in,
        correction=correction,
        v_c=v_c,
        fit=fit,
        weights=sol,
        problem=problem,
    )


def _aggregate_folds(folds: list[FoldResult]) -> tuple[float, float, dict[str, Any]]:
    k = len(folds)
    point = sum(f.mu_c for f in folds) / k
    v_c = sum(f.v_c for f in folds) / k**2
    diagnostics = {
        "imbalance_sup": max(f.weights.imbalance_sup for f in folds),
        "variance_term": sum(f.weights.variance_term for f in folds) / k**2,
        "solver_status": [f.weights.status.value for f in folds],
        "solver_iterations": [f.weights.iterations for f in folds],
        "kkt": np.nanmax([f.fit.kkt for f in folds]),
        "lambda": [f.fit.lam for f in folds],
        "plug_in": sum(f.plug_in for f in folds) / k,
        "n_folds": k,
    }
    return point, v_c, diagnostics


def _control_fold_results(
    data: Dataset,
    link: Link,
    scheme: SplitScheme,
    zeta: float,
    lambda_rule: LambdaRule,
    beta_override=None,
    **fold_kwargs,
) -> list[FoldResult]:
    controls = data.control_idx
    treated = data.treated_idx
    x = data.x
    y = data.y.astype(float)
    results = []
    for fold_i, (fit_pos, weight_pos) in enumerate(scheme.control_folds(controls.size)):
        fit_idx = controls[fit_pos]
        weight_idx = controls[weight_pos]
        results.append(
            _debias_fold(
                x[fit_idx], y[fit_idx], x[weight_idx], y[weight_idx], x[treated],
                link, zeta, lambda_rule,
                seed=rng.child_seed(scheme.seed, rng.FOLD_TAG, fold_i),
                beta_override=beta_override,
                **fold_kwargs,
            )
        )
    return results


# ---------------------------------------------------------------------------
# Public estimators


def estimate_mu_c(
    data: Dataset,
    link: Link,
    scheme: SplitScheme | None = None,
    zeta: float = DEFAULT_ZETA,
    lambda_rule: LambdaRule | None = None,
    level: float = 0.95,
    beta_override=None,
) -> Estimate:
    """Debiased estimate of the mean control counterfactual over the treated."""
    scheme = scheme or no_split()
    lambda_rule = lambda_rule or LambdaRule()
    folds = _control_fold_results(
        data, link, scheme, zeta, lambda_rule, beta_override=beta_override
    )
    point, v_c, diagnostics = _aggregate_folds(folds)
    lo, hi = confidence_interval(point, v_c, level)
    return Estimate(point=point, variance=v_c, ci_low=lo, ci_high=hi,
                    method=f"mu_c[{scheme.label}]", split=scheme, diagnostics=diagnostics)


def estimate_atet(
    data: Dataset,
    link: Link,
    scheme: SplitScheme | None = None,
    zeta: float = DEFAULT_ZETA,
    lambda_rule: LambdaRule | None = None,
    level: float = 0.95,
    beta_override=None,
) -> Estimate:
    """ATET: treated outcome mean minus the debiased control counterfactual."""
    scheme = scheme or no_split()
    lambda_rule = lambda_rule or LambdaRule()
    folds = _control_fold_results(
        data, link, scheme, zeta, lambda_rule, beta_override=beta_override
    )
    mu_c, v_c, diagnostics = _aggregate_folds(folds)
    ty = data.y[data.treated_idx].astype(float)
    y_bar_t = float(ty.mean())
    v_t = float(np.sum((ty - y_bar_t) ** 2) / ty.size**2)
    point = y_bar_t - mu_c
    variance = v_c + v_t
    lo, hi = confidence_interval(point, variance, level)
    diagnostics = dict(diagnostics, mu_c=mu_c, v_c=v_c, v_t=v_t, y_bar_t=y_bar_t)
    return Estimate(point=point, variance=variance, ci_low=lo, ci_high=hi,
                    method=scheme.label, split=scheme, diagnostics=diagnostics)


def run_with_split(
    data: Dataset,
    link: Link,
    scheme: SplitScheme,
    zeta: float = DEFAULT_ZETA,
    lambda_rule: LambdaRule | None = None,
    level: float = 0.95,
) -> Estimate:
    """ATET under an explicit splitting scheme (DB1 through DB6)."""
    return estimate_atet(data, link, scheme, zeta=zeta, lambda_rule=lambda_rule,
                         level=level)


def estimate_dense_contrast(
    data: Dataset,
    link: Link,
    xi: np.ndarray,
    scheme: SplitScheme | None = None,
    program: str = "constrained",
    imbalance_bound: float | None = None,
    cap: float | None = None,
    simplex: bool | None = None,
    zeta: float = DEFAULT_ZETA,
    lambda_rule: LambdaRule | None = None,
    level: float = 0.95,
    beta_override=None,
) -> Estimate:
    """Debiased estimate of a fixed linear contrast of the control model
    coefficients.

    The default program is the constraint form without the sum-to-one
    restriction; pass program="lagrange" (which keeps the simplex) to share
    the causal target's geometry.
    """
    xi = np.asarray(xi, dtype=float)
    if np.max(np.abs(xi)) <= 0:
        raise ValueError("contrast vector must be nonzero")
    scheme = scheme or no_split()
    lambda_rule = lambda_rule or LambdaRule()
    if simplex is None:
        simplex = program == "lagrange"
    controls = data.control_idx
    x = data.x
    y = data.y.astype(float)
    folds: list[tuple[float, float, FoldResult]] = []
    for fold_i, (fit_pos, weight_pos) in enumerate(scheme.control_folds(controls.size)):
        fit_idx = controls[fit_pos]
        weight_idx = controls[weight_pos]
        res = _debias_fold(
            x[fit_idx], y[fit_idx], x[weight_idx], y[weight_idx],
            x[data.treated_idx], link, zeta, lambda_rule,
            seed=rng.child_seed(scheme.seed, rng.FOLD_TAG, fold_i),
            beta_override=beta_override,
            program=program,
            imbalance_bound=imbalance_bound,
            cap=cap,
            simplex=simplex,
            xi=xi,
        )
        theta_f = float(xi @ res.fit.beta) + res.correction
        folds.append((theta_f, res.v_c, res))
    k = len(folds)
    point = sum(t for t, _, _ in folds) / k
    variance = sum(v for _, v, _ in folds) / k**2
    lo, hi = confidence_interval(point, variance, level)
    diagnostics = {
        "imbalance_sup": max(r.weights.imbalance_sup for _, _, r in folds),
        "variance_term": variance,
        "solver_status": [r.weights.status.value for _, _, r in folds],
        "kkt": np.nanmax([r.fit.kkt for _, _, r in folds]),
        "corrections": [r.correction for _, _, r in folds],
        "beta_contrib": [float(xi @ r.fit.beta) for _, _, r in folds],
    }
    return Estimate(point=point, variance=variance, ci_low=lo, ci_high=hi,
                    method=f"contrast[{scheme.label}]", split=scheme,
                    diagnostics=diagnostics)


def estimate_effect(
    data: Dataset,
    link: Link,
    target: str = "atet",
    scheme: SplitScheme | None = None,
    zeta: float = DEFAULT_ZETA,
    lambda_rule: LambdaRule | None = None,
    level: float = 0.95,
) -> Estimate:
    """ATET, or experimentally ATE/ATEC by swapping the target sample.

    For ATE and ATEC the missing treated-arm outcome model is fit on the
    treated sample with the same machinery mirrored (weights over treated
    units balance toward the target sample's moment).  Their variance stacks
    both corrections' terms; these targets are provided for exploration and
    are not covered by the coverage guarantees of the ATET path.
    """
    target = target.lower()
    if target == "atet":
        return estimate_atet(data, link, scheme, zeta=zeta, lambda_rule=lambda_rule,
                             level=level)
    if target not in ("ate", "atec"):
        raise ValueError(f"unknown target {target!r}")
    scheme = scheme or no_split()
    lambda_rule = lambda_rule or LambdaRule()
    x = data.x
    y = data.y.astype(float)
    target_idx = np.arange(data.n) if target == "ate" else data.control_idx
    x_target = x[target_idx]

    # Control-model side: impute Y(0) for the target sample.
    controls = data.control_idx
    folds0 = []
    for fold_i, (fit_pos, weight_pos) in enumerate(scheme.control_folds(controls.size)):
        fit_idx = controls[fit_pos]
        weight_idx = controls[weight_pos]
        folds0.append(
            _debias_fold(
                x[fit_idx], y[fit_idx], x[weight_idx], y[weight_idx], x_target,
                link, zeta, lambda_rule,
                seed=rng.child_seed(scheme.seed, rng.FOLD_TAG, fold_i),
            )
        )
    mu0, v0, diag0 = _aggregate_folds(folds0)

    # Treated-model side: impute Y(1) for the target sample.
    treated = data.treated_idx
    if treated.size < 3:
        raise ValueError("ATE/ATEC needs at least 3 treated units to model Y(1)")
    folds1 = []
    sub = SplitScheme(scheme.kind, k=scheme.k, seed=rng.child_seed(scheme.seed, 77))
    for fold_i, (fit_pos, weight_pos) in enumerate(sub.control_folds(treated.size)):
        fit_idx = treated[fit_pos]
        weight_idx = treated[weight_pos]
        folds1.append(
            _debias_fold(
                x[fit_idx], y[fit_idx], x[weight_idx], y[weight_idx], x_target,
                link, zeta, lambda_rule,
                seed=rng.child_seed(sub.seed, rng.FOLD_TAG, fold_i),
            )
        )
    mu1, v1, diag1 = _aggregate_folds(folds1)

    point = mu1 - mu0
    variance = v0 + v1
    lo, hi = confidence_interval(point, variance, level)
    return Estimate(
        point=point, variance=variance, ci_low=lo, ci_high=hi,
        method=f"{target.upper()}[{scheme.label}]", split=scheme,
        diagnostics={"mu0": mu0, "mu1": mu1, "control": diag0, "treated": diag1,
                     "experimental": True},
    )
