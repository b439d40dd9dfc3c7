"""Competitor estimators: difference in means, regression imputation,
inverse propensity weighting, double machine learning, the automatic
(Riesz-representer) debiased estimator, and linear approximate residual
balancing.

All return the same Estimate record as the proposed method.  Nuisance
models are L1-penalized fits with cross-validated penalties; propensity
scores are trimmed to a fixed band before any odds are formed.  Point
estimates follow the cited forms; where a competitor's variance is not
prescribed, a plug-in analog of the correction-weight variance is reported
so every method carries a comparable (unvalidated) interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from ._cd import cd_gram
from .balance import BalanceProblem, solve_weights_lagrange
from .data import Dataset
from .estimators import DEFAULT_ZETA, Estimate, confidence_interval
from .glm import (
    BernoulliFamily,
    GaussianFamily,
    GlmFit,
    LambdaRule,
    NumericError,
    fit_glm_with_rule,
    fit_linear_with_rule,
)
from .links import Link, logit_link

DEFAULT_TRIM = (0.05, 0.95)


class IdentityLink:
    """Linear-model stand-in: g is the identity with unit derivative and
    unit variance weight.  Not a probability link; used where the outcome
    model is linear (residual balancing) and in degeneracy tests."""

    name = "identity"

    def g(self, x):
        return np.asarray(x, dtype=float)

    def g1(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def g2(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def variance_weight(self, x):
        return np.ones_like(np.asarray(x, dtype=float))


def _treated_variance(y_t: np.ndarray) -> float:
    return float(np.sum((y_t - y_t.mean()) ** 2) / y_t.size**2)


def naive(data: Dataset, level: float = 0.95) -> Estimate:
    """Raw difference in group means."""
    y_t = data.y[data.treated_idx].astype(float)
    y_c = data.y[data.control_idx].astype(float)
    point = float(y_t.mean() - y_c.mean())
    variance = _treated_variance(y_t) + float(
        np.sum((y_c - y_c.mean()) ** 2) / y_c.size**2
    )
    lo, hi = confidence_interval(point, variance, level)
    return Estimate(point=point, variance=variance, ci_low=lo, ci_high=hi,
                    method="Naive", diagnostics={})


def regression_impute(
    data: Dataset,
    link: Link,
    lambda_rule: LambdaRule | None = None,
    seed: int = 0,
    level: float = 0.95,
    fit: GlmFit | None = None,
) -> Estimate:
    """Plug-in over the treated plus the simple average of control
    residuals; the outcome model is fit on all controls."""
    lambda_rule = lambda_rule or LambdaRule()
    x_c = data.x[data.control_idx]
    y_c = data.y[data.control_idx].astype(float)
    if fit is None:
        fit = fit_glm_with_rule(x_c, y_c, link, lambda_rule, seed=seed)
    g_t = np.asarray(link.g(data.x[data.treated_idx] @ fit.beta), dtype=float)
    g_c = np.asarray(link.g(x_c @ fit.beta), dtype=float)
    mu_c = float(g_t.mean() + (y_c - g_c).mean())
    y_t = data.y[data.treated_idx].astype(float)
    point = float(y_t.mean()) - mu_c
    n_c = y_c.size
    v_c = float(np.sum(link.variance_weight(x_c @ fit.beta)) / n_c**2)
    variance = v_c + _treated_variance(y_t)
    lo, hi = confidence_interval(point, variance, level)
    return Estimate(point=point, variance=variance, ci_low=lo, ci_high=hi,
                    method="Regression",
                    diagnostics={"mu_c": mu_c, "kkt": fit.kkt, "lambda": fit.lam})


# ---------------------------------------------------------------------------
# Propensity scores


@dataclass(frozen=True)
class PropensityFit:
    """Penalized logit of treatment on covariates with trimmed scores."""

    coefficients: np.ndarray
    trimming: tuple[float, float]
    fitted_scores: np.ndarray
    lam: float
    kkt: float

    def __post_init__(self):
        lo, hi = self.trimming
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"invalid trimming bounds {self.trimming}")
        s = np.asarray(self.fitted_scores, dtype=float)
        if s.size and (s.min() < lo - 1e-12 or s.max() > hi + 1e-12):
            raise ValueError("fitted scores escape the trimming bounds")

    def scores_for(self, x: np.ndarray) -> np.ndarray:
        raw = logit_link().g(np.asarray(x, dtype=float) @ self.coefficients)
        return np.clip(raw, self.trimming[0], self.trimming[1])


def fit_propensity(
    data: Dataset,
    lambda_rule: LambdaRule | None = None,
    trimming: tuple[float, float] = DEFAULT_TRIM,
    seed: int = 0,
    x: np.ndarray | None = None,
    d: np.ndarray | None = None,
) -> PropensityFit:
    """Lasso-logit of the treatment indicator on covariates (all units),
    scores clamped into the trimming band."""
    lambda_rule = lambda_rule or LambdaRule()
    if x is None:
        x = data.x
        d = data.d.astype(float)
    fit = fit_glm_with_rule(x, np.asarray(d, dtype=float), logit_link(),
                            lambda_rule, seed=seed)
    raw = logit_link().g(x @ fit.beta)
    return PropensityFit(
        coefficients=fit.beta,
        trimming=trimming,
        fitted_scores=np.clip(raw, trimming[0], trimming[1]),
        lam=fit.lam,
        kkt=fit.kkt,
    )


def ipw(data: Dataset, propensity: PropensityFit, level: float = 0.95) -> Estimate:
    """Normalized inverse-odds weighting of control outcomes."""
    controls = data.control_idx
    scores = propensity.scores_for(data.x[controls])
    odds = scores / (1.0 - scores)
    gamma = odds / odds.sum()
    y_c = data.y[controls].astype(float)
    mu_c = float(gamma @ y_c)
    y_t = data.y[data.treated_idx].astype(float)
    point = float(y_t.mean()) - mu_c
    variance = float(np.sum(gamma**2 * (y_c - mu_c) ** 2)) + _treated_variance(y_t)
    lo, hi = confidence_interval(point, variance, level)
    return Estimate(point=point, variance=variance, ci_low=lo, ci_high=hi,
                    method="IPW",
                    diagnostics={"mu_c": mu_c, "weight_sum": float(gamma.sum()),
                                 "max_weight": float(gamma.max())})


# ---------------------------------------------------------------------------
# Fold machinery shared by DML and AML


def _stratified_folds(data: Dataset, k: int, seed: int) -> list[np.ndarray]:
    """k folds over all units, treated and controls split proportionally.

    Folds with single-class control outcomes (in or out of fold) are redrawn
    from a fresh permutation, at most 10 times.
    """
    treated = data.treated_idx
    controls = data.control_idx
    for attempt in range(10):
        pt = treated[rng.permutation(treated.size, seed, rng.FOLD_TAG, attempt, 1)]
        pc = controls[rng.permutation(controls.size, seed, rng.FOLD_TAG, attempt, 2)]
        folds = [
            np.sort(np.concatenate([ft, fc]))
            for ft, fc in zip(np.array_split(pt, k), np.array_split(pc, k))
        ]
        ok = True
        for fold in folds:
            mask = np.zeros(data.n, dtype=bool)
            mask[fold] = True
            for part in (fold, np.flatnonzero(~mask)):
                yc = data.y[part][data.d[part] == 0]
                dt = data.d[part]
                if yc.size == 0 or yc.min() == yc.max():
                    ok = False
                if dt.size == 0 or dt.min() == dt.max():
                    ok = False
        if ok:
            return folds
    raise NumericError("could not build non-degenerate stratified folds in 10 attempts")


def dml(
    data: Dataset,
    link: Link,
    k: int = 2,
    scheme_kind: str = "crossfit",
    lambda_rule: LambdaRule | None = None,
    trimming: tuple[float, float] = DEFAULT_TRIM,
    seed: int = 0,
    level: float = 0.95,
    propensity_scores=None,
    outcome_beta=None,
) -> Estimate:
    """Orthogonalized estimator combining regression imputation with
    inverse-odds reweighting of control residuals, nuisances fit out of
    fold.

    scheme_kind "split" scores only the last fold (nuisances from the
    rest); "crossfit" rotates every fold through the scoring role and
    averages.  ``propensity_scores`` (per-unit array) and ``outcome_beta``
    override the fitted nuisances, for diagnostics and tests.
    """
    if k < 2:
        raise ValueError("dml needs at least 2 folds")
    if scheme_kind not in ("split", "crossfit"):
        raise ValueError(f"unknown scheme kind {scheme_kind!r}")
    lambda_rule = lambda_rule or LambdaRule()
    folds = _stratified_folds(data, k, seed)
    x = data.x
    y = data.y.astype(float)
    d = data.d
    taus, variances, diag = [], [], {"kkt": 0.0}
    for fold_i, fold in enumerate(folds):
        if scheme_kind == "split" and fold_i != k - 1:
            continue
        mask = np.zeros(data.n, dtype=bool)
        mask[fold] = True
        rest = np.flatnonzero(~mask)
        rest_controls = rest[d[rest] == 0]
        if outcome_beta is None:
            ofit = fit_glm_with_rule(
                x[rest_controls], y[rest_controls], link, lambda_rule,
                seed=rng.child_seed(seed, 11, fold_i),
            )
            beta = ofit.beta
            diag["kkt"] = max(diag["kkt"], ofit.kkt)
        else:
            beta = np.asarray(outcome_beta, dtype=float)
        if propensity_scores is None:
            pfit = fit_propensity(
                data, lambda_rule, trimming,
                seed=rng.child_seed(seed, 12, fold_i),
                x=x[rest], d=d[rest].astype(float),
            )
            scores_fold = pfit.scores_for(x[fold])
            diag["kkt"] = max(diag["kkt"], pfit.kkt)
        else:
            scores_fold = np.clip(
                np.asarray(propensity_scores, dtype=float)[fold], *trimming
            )
        fold_treated = fold[d[fold] == 1]
        fold_controls = fold[d[fold] == 0]
        odds = scores_fold[d[fold] == 0]
        odds = odds / (1.0 - odds)
        gamma = odds / odds.sum()
        g_t = np.asarray(link.g(x[fold_treated] @ beta), dtype=float)
        g_c = np.asarray(link.g(x[fold_controls] @ beta), dtype=float)
        resid = y[fold_controls] - g_c
        mu_f = float(g_t.mean() + gamma @ resid)
        y_tf = y[fold_treated]
        taus.append(float(y_tf.mean()) - mu_f)
        v_c = float(np.sum(gamma**2 * link.variance_weight(x[fold_controls] @ beta)))
        variances.append(v_c + _treated_variance(y_tf))
    m = len(taus)
    point = sum(taus) / m
    variance = sum(variances) / m**2
    lo, hi = confidence_interval(point, variance, level)
    label = f"DML{1 if scheme_kind == 'split' else k}"
    return Estimate(point=point, variance=variance, ci_low=lo, ci_high=hi,
                    method=label,
                    diagnostics=dict(diag, fold_estimates=taus,
                                     fold_variances=variances))


# ---------------------------------------------------------------------------
# Riesz-representer estimator


def _riesz_kkt(gram, lin, rho, lam) -> float:
    grad = 2.0 * (gram @ rho - lin)
    zero = rho == 0.0
    res = 0.0
    if zero.any():
        res = max(res, float(np.max(np.abs(grad[zero])) - lam))
    if (~zero).any():
        res = max(res, float(np.max(np.abs(grad[~zero] + lam * np.sign(rho[~zero])))))
    return max(res, 0.0)


def _riesz_solve(
    gram, lin, lam, rho0=None, inner_tol=1e-9, max_sweeps=2000, max_rounds=50,
) -> np.ndarray:
    p = lin.size
    rho = np.zeros(p) if rho0 is None else rho0.copy()
    for _ in range(max_rounds):
        gb = gram @ rho
        active = np.flatnonzero(
            (rho != 0.0) | (np.abs(lin - gb) > 0.5 * lam)
        ).astype(np.int64)
        if active.size == 0:
            return rho
        cd_gram(gram, lin, gb, rho, lam, active, inner_tol, max_sweeps)
        if _riesz_kkt(gram, lin, rho, lam) <= 1e-7 * max(1.0, np.abs(lin).max()):
            break
    return rho


def _riesz_lambda_grid(lin, n_lambda=100, min_ratio=1e-3):
    lmax = 2.0 * float(np.max(np.abs(lin)))
    if lmax <= 0:
        lmax = 1.0
    return np.geomspace(lmax, min_ratio * lmax, n_lambda)


def fit_riesz(
    x_controls: np.ndarray,
    x_treated: np.ndarray,
    lambda_rule: LambdaRule | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Linear weight-function coefficients: minimize
    rho' G rho - 2 h' rho + lam ||rho||_1 with G the control second-moment
    matrix and h the treated covariate mean; lam by cross-validation of the
    same criterion."""
    lambda_rule = lambda_rule or LambdaRule()
    x_controls = np.asarray(x_controls, dtype=float)
    x_treated = np.asarray(x_treated, dtype=float)
    n_c, p = x_controls.shape
    gram = x_controls.T @ x_controls / n_c
    lin = x_treated.mean(axis=0)
    if lambda_rule.kind == "fixed":
        return _riesz_solve(gram, lin, float(lambda_rule.value))
    grid = _riesz_lambda_grid(lin, lambda_rule.n_lambda, lambda_rule.min_ratio)
    k = min(lambda_rule.n_folds, n_c, x_treated.shape[0])
    if k < 2:
        return _riesz_solve(gram, lin, float(grid[len(grid) // 2]))
    perm_c = rng.permutation(n_c, seed, rng.FOLD_TAG, 0, 3)
    perm_t = rng.permutation(x_treated.shape[0], seed, rng.FOLD_TAG, 0, 4)
    folds_c = np.array_split(perm_c, k)
    folds_t = np.array_split(perm_t, k)
    crit = np.zeros(grid.size)
    for fc, ft in zip(folds_c, folds_t):
        mask_c = np.ones(n_c, dtype=bool)
        mask_c[fc] = False
        mask_t = np.ones(x_treated.shape[0], dtype=bool)
        mask_t[ft] = False
        xc_tr = x_controls[mask_c]
        gram_tr = xc_tr.T @ xc_tr / xc_tr.shape[0]
        lin_tr = x_treated[mask_t].mean(axis=0)
        xc_va = x_controls[fc]
        gram_va = xc_va.T @ xc_va / xc_va.shape[0]
        lin_va = x_treated[ft].mean(axis=0)
        rho = None
        scale = max(1.0, float(np.abs(lin_tr).max()))
        for g_i, lam in enumerate(grid):
            rho = _riesz_solve(gram_tr, lin_tr, float(lam), rho0=rho,
                               inner_tol=1e-6, max_sweeps=15, max_rounds=6)
            # With p exceeding the control count the criterion is unbounded
            # below once the support saturates the Gram rank; the remaining
            # (smaller) penalties cannot be selected and are skipped.
            if (rho != 0.0).sum() >= 0.9 * xc_tr.shape[0] or (
                np.abs(rho).max() > 1e4 * scale
            ):
                crit[g_i:] += math.inf
                break
            crit[g_i] += float(rho @ gram_va @ rho - 2.0 * lin_va @ rho)
    lam_best = float(grid[int(np.argmin(crit))])
    return _riesz_solve(gram, lin, lam_best)


def aml(
    data: Dataset,
    link: Link,
    k: int = 2,
    lambda_rule: LambdaRule | None = None,
    seed: int = 0,
    level: float = 0.95,
) -> Estimate:
    """Debiasing with a learned linear weight function instead of inverse
    propensity odds, cross-fit over k folds."""
    if k < 2:
        raise ValueError("aml needs at least 2 folds")
    lambda_rule = lambda_rule or LambdaRule()
    folds = _stratified_folds(data, k, seed)
    x = data.x
    y = data.y.astype(float)
    d = data.d
    taus, variances = [], []
    kkt = 0.0
    for fold_i, fold in enumerate(folds):
        mask = np.zeros(data.n, dtype=bool)
        mask[fold] = True
        rest = np.flatnonzero(~mask)
        rest_controls = rest[d[rest] == 0]
        rest_treated = rest[d[rest] == 1]
        ofit = fit_glm_with_rule(
            x[rest_controls], y[rest_controls], link, lambda_rule,
            seed=rng.child_seed(seed, 21, fold_i),
        )
        kkt = max(kkt, ofit.kkt)
        rho = fit_riesz(
            x[rest_controls], x[rest_treated], lambda_rule,
            seed=rng.child_seed(seed, 22, fold_i),
        )
        fold_treated = fold[d[fold] == 1]
        fold_controls = fold[d[fold] == 0]
        g_t = np.asarray(link.g(x[fold_treated] @ ofit.beta), dtype=float)
        g_c = np.asarray(link.g(x[fold_controls] @ ofit.beta), dtype=float)
        alpha = x[fold_controls] @ rho
        n_cf = fold_controls.size
        resid = y[fold_controls] - g_c
        mu_f = float(g_t.mean() + alpha @ resid / n_cf)
        y_tf = y[fold_treated]
        taus.append(float(y_tf.mean()) - mu_f)
        gamma = alpha / n_cf
        v_c = float(np.sum(gamma**2 * link.variance_weight(x[fold_controls] @ ofit.beta)))
        variances.append(v_c + _treated_variance(y_tf))
    m = len(taus)
    point = sum(taus) / m
    variance = sum(variances) / m**2
    lo, hi = confidence_interval(point, variance, level)
    return Estimate(point=point, variance=variance, ci_low=lo, ci_high=hi,
                    method="AML", diagnostics={"kkt": kkt, "fold_estimates": taus})


# ---------------------------------------------------------------------------
# Linear approximate residual balancing


def arb(
    data: Dataset,
    zeta: float = DEFAULT_ZETA,
    lambda_rule: LambdaRule | None = None,
    seed: int = 0,
    level: float = 0.95,
    fit: GlmFit | None = None,
) -> Estimate:
    """Linear outcome model with balancing weights on raw covariates, no
    splitting: plug-in plus gamma-weighted residuals, unit derivative and
    homoskedastic variance weights."""
    lambda_rule = lambda_rule or LambdaRule()
    controls = data.control_idx
    x_c = data.x[controls]
    y_c = data.y[controls].astype(float)
    if fit is None:
        fit = fit_linear_with_rule(x_c, y_c, lambda_rule, seed=seed)
    x_t = data.x[data.treated_idx]
    n_c = x_c.shape[0]
    problem = BalanceProblem(
        xi=x_t.mean(axis=0),
        a=x_c,
        w=np.ones(n_c),
        cap=math.log(n_c) / n_c,
        x_raw=x_c,
    )
    sol = solve_weights_lagrange(problem, zeta=zeta)
    resid = y_c - x_c @ fit.beta
    mu_c = float((x_t @ fit.beta).mean() + sol.gamma @ resid)
    y_t = data.y[data.treated_idx].astype(float)
    point = float(y_t.mean()) - mu_c
    sigma2 = float(np.mean(resid**2))
    variance = float(np.sum(sol.gamma**2) * sigma2) + _treated_variance(y_t)
    lo, hi = confidence_interval(point, variance, level)
    return Estimate(
        point=point, variance=variance, ci_low=lo, ci_high=hi, method="ARB",
        diagnostics={
            "mu_c": mu_c,
            "imbalance_sup": sol.imbalance_sup,
            "variance_term": sol.variance_term,
            "solver_status": sol.status.value,
            "kkt": fit.kkt,
            "lambda": fit.lam,
        },
    )
