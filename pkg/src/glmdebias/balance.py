"""Balancing weights over the capped simplex.

Given a fitted outcome index, weights on the weighting subsample are chosen
to match the treated target moment in link-derivative-weighted covariates
while controlling the heteroskedastic variance of the correction term.  Two
program forms are supported:

* Lagrange form: minimize
      (1 - zeta) * sum_i gamma_i^2 w_i  +  zeta * ||xi - A'gamma||_inf^2
  over the capped simplex {sum gamma = 1, 0 <= gamma_i <= cap}.

* Constraint form: minimize sum_i gamma_i^2 w_i subject to
      ||xi - A'gamma||_inf <= bound,  0 <= gamma_i <= cap,
  with the sum-to-one constraint optional (on for causal targets, off for
  generic linear contrasts).

Here A has rows g'(x_i'beta) x_i' and w_i = g(x_i'beta)(1 - g(x_i'beta)).

Both forms are solved by a primal-dual (Chambolle-Pock type) operator
splitting: the dual update performs ascent on the 2p epigraph constraints of
the sup-norm term through its conjugate prox, and the primal update is a
quadratic prox step followed by exact projection onto the capped simplex
(sorted waterfilling with index-order tie breaking; a bisection on the
sum-constraint multiplier in the weighted case).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .links import Link


class SolverStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


class InfeasibleError(RuntimeError):
    """Raised when the weight program has no feasible point.

    Carries the minimal achievable sup-norm imbalance as a certificate when
    the imbalance constraint is the binding obstruction.
    """

    def __init__(self, message: str, min_imbalance: float | None = None):
        super().__init__(message)
        self.min_imbalance = min_imbalance


def default_cap_lagrange(n_w: int) -> float:
    """Cap log(n)/n used by the penalized program."""
    return math.log(n_w) / n_w


def default_cap_constrained(n_w: int, c4: float = 1.0) -> float:
    """Cap c4 * sqrt(log n)/n used by the constraint-form program."""
    return c4 * math.sqrt(math.log(n_w)) / n_w


def default_imbalance_bound(n_w: int, p: int, c3: float = 1.0) -> float:
    """Imbalance budget c3 * sqrt(log p / n) for the constraint form."""
    return c3 * math.sqrt(math.log(p) / n_w)


@dataclass(frozen=True)
class BalanceProblem:
    """Data of one weight program.

    xi is the target moment (length p); a is the n_w-by-p matrix whose rows
    are derivative-weighted covariates; w holds per-unit variance weights;
    cap bounds each weight.  x_raw optionally keeps the unweighted covariate
    rows for diagnostics.
    """

    xi: np.ndarray
    a: np.ndarray
    w: np.ndarray
    cap: float
    simplex: bool = True
    x_raw: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        a = np.ascontiguousarray(np.asarray(self.a, dtype=float))
        w = np.asarray(self.w, dtype=float)
        if a.ndim != 2:
            raise ValueError("a must be a matrix")
        n_w, p = a.shape
        if xi.shape != (p,):
            raise ValueError(f"xi must have length {p}, got {xi.shape}")
        if w.shape != (n_w,):
            raise ValueError(f"w must have length {n_w}, got {w.shape}")
        if np.any(w <= 0):
            raise ValueError("variance weights must be strictly positive")
        if self.cap <= 0:
            raise ValueError("cap must be positive")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w", w)

    @property
    def n_w(self) -> int:
        return self.a.shape[0]

    @property
    def p(self) -> int:
        return self.a.shape[1]

    @classmethod
    def from_model(
        cls,
        x_weight: np.ndarray,
        beta: np.ndarray,
        link: Link,
        xi: np.ndarray,
        cap: float,
        simplex: bool = True,
    ) -> "BalanceProblem":
        """Assemble the program from the weighting subsample and a fit."""
        x_weight = np.asarray(x_weight, dtype=float)
        u = x_weight @ np.asarray(beta, dtype=float)
        g1 = np.asarray(link.g1(u), dtype=float)
        w = np.clip(np.asarray(link.variance_weight(u), dtype=float), 1e-12, None)
        return cls(
            xi=np.asarray(xi, dtype=float),
            a=g1[:, None] * x_weight,
            w=w,
            cap=float(cap),
            simplex=simplex,
            x_raw=x_weight,
        )


@dataclass(frozen=True)
class WeightSolution:
    gamma: np.ndarray
    imbalance_sup: float
    variance_term: float
    objective: float
    status: SolverStatus
    iterations: int
    certificate: float | None = None


def compute_target_moment(x_treated: np.ndarray, beta: np.ndarray, link: Link) -> np.ndarray:
    """Average derivative-weighted covariate vector over the target sample."""
    x_treated = np.asarray(x_treated, dtype=float)
    if x_treated.shape[0] == 0:
        raise ValueError("target sample is empty")
    g1 = np.asarray(link.g1(x_treated @ np.asarray(beta, dtype=float)), dtype=float)
    return (g1[:, None] * x_treated).mean(axis=0)


def sample_gamma_matrix(x: np.ndarray, beta: np.ndarray, link: Link) -> np.ndarray:
    """Empirical second-moment matrix (1/n) sum g'(x_i'beta) x_i x_i'."""
    x = np.asarray(x, dtype=float)
    g1 = np.asarray(link.g1(x @ np.asarray(beta, dtype=float)), dtype=float)
    return (g1[:, None] * x).T @ x / x.shape[0]


def reference_weights(problem: BalanceProblem, gamma_matrix: np.ndarray) -> np.ndarray:
    """Feasibility/variance diagnostic weights (1/n) xi' Gamma^{-1} x_i.

    Requires the raw covariate rows on the problem and an invertible sample
    second-moment matrix; not an estimator.
    """
    if problem.x_raw is None:
        raise ValueError("problem carries no raw covariate rows")
    gamma_matrix = np.asarray(gamma_matrix, dtype=float)
    try:
        sol = np.linalg.solve(gamma_matrix, problem.xi)
    except np.linalg.LinAlgError as exc:
        raise ValueError("sample second-moment matrix is singular") from exc
    return problem.x_raw @ sol / problem.n_w


def imbalance_sup_norm(gamma: np.ndarray, problem: BalanceProblem) -> float:
    """Worst-coordinate gap between the target moment and the weighted sum."""
    gamma = np.asarray(gamma, dtype=float)
    return float(np.max(np.abs(problem.xi - problem.a.T @ gamma)))


def variance_term(gamma: np.ndarray, problem: BalanceProblem) -> float:
    gamma = np.asarray(gamma, dtype=float)
    return float(np.sum(gamma * gamma * problem.w))


def lagrange_objective(gamma: np.ndarray, problem: BalanceProblem, zeta: float) -> float:
    return (1.0 - zeta) * variance_term(gamma, problem) + zeta * imbalance_sup_norm(
        gamma, problem
    ) ** 2


# ---------------------------------------------------------------------------
# Projections and proxes


def project_capped_simplex(v: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection onto {sum = 1, 0 <= x <= cap}.

    Exact waterfilling: the projection is clip(v - theta, 0, cap) where
    theta solves sum clip(v - theta, 0, cap) = 1; the sum is piecewise
    linear and decreasing in theta, so theta is located by sorting the 2n
    breakpoints {v_i, v_i - cap} (ties resolved by index order through the
    stable sort).
    """
    v = np.asarray(v, dtype=float)
    n = v.size
    if n * cap < 1.0 - 1e-12:
        raise InfeasibleError(f"capped simplex empty: n*cap = {n * cap:.6g} < 1")
    breaks = np.concatenate([v - cap, v])
    order = np.argsort(-breaks, kind="stable")
    breaks_sorted = breaks[order]
    # Walk theta downward; track sum(theta) = sum_i clip(v_i - theta, 0, cap).
    # Between consecutive breakpoints the slope equals the number of
    # coordinates currently in the interior (0 < v_i - theta < cap).
    total = 0.0
    slope = 0
    prev = breaks_sorted[0]
    for b_idx in range(2 * n):
        theta = breaks_sorted[b_idx]
        total += slope * (prev - theta)
        if total >= 1.0 - 1e-15:
            theta = prev - (1.0 - (total - slope * (prev - theta))) / slope
            return np.clip(v - theta, 0.0, cap)
        if order[b_idx] >= n:
            slope += 1  # coordinate enters the interior from 0
        else:
            slope -= 1  # coordinate saturates at cap
        prev = theta
    # theta below the smallest breakpoint: all coordinates at cap or the
    # remaining mass spreads over interior coordinates.
    if slope > 0:
        theta = prev - (1.0 - total) / slope
        return np.clip(v - theta, 0.0, cap)
    return np.full(n, cap)


def _weighted_prox_simplex(v: np.ndarray, dq: np.ndarray, cap: float) -> np.ndarray:
    """argmin_x (1/2) sum dq_i x_i^2 - v_i x_i over {sum = 1, 0 <= x <= cap}.

    Solved by bisection on the sum-constraint multiplier; dq > 0.
    """
    n = v.size
    if n * cap < 1.0 - 1e-12:
        raise InfeasibleError(f"capped simplex empty: n*cap = {n * cap:.6g} < 1")

    def total(mu):
        return np.clip((v - mu) / dq, 0.0, cap).sum()

    lo = float(np.min(v - dq * cap))
    hi = float(np.max(v))
    # total(lo) >= n*cap >= 1, total(hi) = 0 <= 1.
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) >= 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17 * max(1.0, abs(lo)):
            break
    mu = 0.5 * (lo + hi)
    x = np.clip((v - mu) / dq, 0.0, cap)
    s = x.sum()
    if s > 0:
        # Distribute the residual mass over interior coordinates to restore
        # the sum exactly (numerically tiny after the bisection).
        interior = (x > 0.0) & (x < cap)
        if interior.any():
            x[interior] += (1.0 - s) / interior.sum()
            x = np.clip(x, 0.0, cap)
    return x


def _prox_primal(v, dq, cap, simplex):
    if simplex:
        if np.all(dq == dq[0]):
            return project_capped_simplex(v / dq[0], cap)
        return _weighted_prox_simplex(v, dq, cap)
    return np.clip(v / dq, 0.0, cap)


def _prox_sq_l1_conj(u: np.ndarray, sigma: float, zeta: float, xi: np.ndarray) -> np.ndarray:
    """prox of sigma * h* where h(z) = zeta * ||xi - z||_inf^2.

    h*(y) = xi'y + ||y||_1^2 / (4 zeta); the prox soft-thresholds at a level
    theta tied to the resulting l1 mass, located by sorting.
    """
    v = u - sigma * xi
    av = np.abs(v)
    c = sigma / (2.0 * zeta)
    # theta solves theta = c * sum max(|v| - theta, 0)
    order = np.sort(av)[::-1]
    csum = np.cumsum(order)
    theta = c * csum[-1] / (1.0 + c * av.size)
    for k in range(1, av.size + 1):
        cand = c * csum[k - 1] / (1.0 + c * k)
        upper = order[k - 1]
        lower = order[k] if k < av.size else 0.0
        if lower - 1e-15 <= cand <= upper + 1e-15:
            theta = cand
            break
    return np.sign(v) * np.maximum(av - theta, 0.0)


def _prox_box_conj(u: np.ndarray, sigma: float, bound: float, xi: np.ndarray) -> np.ndarray:
    """prox of sigma * h* for h = indicator of {||xi - z||_inf <= bound}."""
    v = u - sigma * xi
    return np.sign(v) * np.maximum(np.abs(v) - sigma * bound, 0.0)


def _operator_norm(a: np.ndarray, iters: int = 60) -> float:
    """2-norm of a by power iteration (deterministic start)."""
    v = np.ones(a.shape[1]) / math.sqrt(a.shape[1])
    nrm = 1.0
    for _ in range(iters):
        v = a.T @ (a @ v)
        nrm = math.sqrt(float(np.linalg.norm(v)))
        if nrm == 0.0:
            return 0.0
        v /= nrm * nrm
    return nrm


# ---------------------------------------------------------------------------
# Solvers


def _min_imbalance(problem: BalanceProblem, tol: float, max_iter: int) -> float:
    """Smallest achievable sup-norm imbalance over the feasible set."""
    sol = solve_weights_lagrange(problem, zeta=1.0, tol=tol, max_iter=max_iter)
    return sol.imbalance_sup


def _pdhg(
    problem: BalanceProblem,
    dual_prox,
    quad_coef: float,
    objective,
    tol: float,
    max_iter: int,
    check_every: int = 10,
):
    """Primal-dual iteration shared by both program forms.

    dual_prox(u, sigma) applies the conjugate prox of the imbalance term;
    quad_coef scales the separable quadratic sum(w gamma^2) in the primal
    objective.  objective(gamma) scores iterates; the best feasible iterate
    is returned.
    """
    a = problem.a
    n_w = problem.n_w
    op_norm = _operator_norm(a)
    if op_norm == 0.0:
        op_norm = 1.0
    # Step lengths satisfy tau * sigma * ||A||^2 < 1.
    tau = 0.95 / op_norm
    sigma = 0.95 / op_norm
    gamma = np.full(n_w, 1.0 / n_w)
    if problem.simplex:
        gamma = _prox_primal(gamma, np.ones(n_w), problem.cap, True)
    else:
        gamma = np.clip(gamma, 0.0, problem.cap)
    y = np.zeros(problem.p)
    gamma_bar = gamma.copy()
    dq = 2.0 * quad_coef * problem.w * tau + 1.0
    best_obj = math.inf
    best_gamma = gamma.copy()
    status = SolverStatus.MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        y_new = dual_prox(y + sigma * (a.T @ gamma_bar), sigma)
        v = gamma - tau * (a @ y_new)
        gamma_new = _prox_primal(v, dq, problem.cap, problem.simplex)
        gamma_bar = 2.0 * gamma_new - gamma
        if it % check_every == 0 or it == max_iter:
            p_res = np.max(np.abs((gamma - gamma_new) / tau - a @ (y - y_new)))
            d_res = np.max(np.abs((y - y_new) / sigma - a.T @ (gamma - gamma_new)))
            obj = objective(gamma_new)
            if obj < best_obj:
                best_obj = obj
                best_gamma = gamma_new.copy()
            if max(p_res, d_res) <= tol:
                status = SolverStatus.OPTIMAL
                gamma = gamma_new
                break
        gamma = gamma_new
        y = y_new
    obj = objective(gamma)
    if obj < best_obj:
        best_obj = obj
        best_gamma = gamma
    return best_gamma, best_obj, status, it


def solve_weights_lagrange(
    problem: BalanceProblem,
    zeta: float = 0.5,
    tol: float = 1e-8,
    max_iter: int = 50_000,
) -> WeightSolution:
    """Penalized form: trade off weighted variance against squared
    sup-norm imbalance with mixing parameter zeta in [0, 1]."""
    if not 0.0 <= zeta <= 1.0:
        raise ValueError(f"zeta must lie in [0, 1], got {zeta}")
    if problem.simplex and problem.n_w * problem.cap < 1.0 - 1e-12:
        return _infeasible_solution(problem)

    if zeta == 0.0:
        gamma = _prox_primal(
            np.zeros(problem.n_w), 2.0 * problem.w, problem.cap, problem.simplex
        )
        return _finish(problem, gamma, lagrange_objective(gamma, problem, 0.0),
                       SolverStatus.OPTIMAL, 0)

    def objective(g):
        return lagrange_objective(g, problem, zeta)

    def dual_prox(u, sigma):
        return _prox_sq_l1_conj(u, sigma, zeta, problem.xi)

    gamma, obj, status, iters = _pdhg(
        problem, dual_prox, quad_coef=(1.0 - zeta), objective=objective,
        tol=tol, max_iter=max_iter,
    )
    return _finish(problem, gamma, obj, status, iters)


def solve_weights_constrained(
    problem: BalanceProblem,
    imbalance_bound: float,
    cap: float | None = None,
    tol: float = 1e-8,
    max_iter: int = 50_000,
) -> WeightSolution:
    """Constraint form: minimize weighted variance subject to a hard
    sup-norm imbalance budget.  Returns an infeasibility certificate (the
    minimal achievable imbalance) when the budget cannot be met."""
    if cap is not None and cap != problem.cap:
        problem = BalanceProblem(
            xi=problem.xi, a=problem.a, w=problem.w, cap=float(cap),
            simplex=problem.simplex, x_raw=problem.x_raw,
        )
    if imbalance_bound <= 0:
        raise ValueError("imbalance bound must be positive")
    if problem.simplex and problem.n_w * problem.cap < 1.0 - 1e-12:
        return _infeasible_solution(problem)
    if math.isinf(imbalance_bound):
        return solve_weights_lagrange(problem, zeta=0.0, tol=tol, max_iter=max_iter)

    min_imb = _min_imbalance(problem, tol=max(tol, 1e-9), max_iter=max_iter)
    if min_imb > imbalance_bound + 1e-7:
        gamma = np.full(problem.n_w, np.nan)
        return WeightSolution(
            gamma=gamma, imbalance_sup=math.inf, variance_term=math.inf,
            objective=math.inf, status=SolverStatus.INFEASIBLE, iterations=0,
            certificate=min_imb,
        )

    def objective(g):
        # Score by variance, infinitely penalizing budget violations beyond
        # tolerance so the best feasible iterate is retained.
        viol = imbalance_sup_norm(g, problem) - imbalance_bound
        pen = 0.0 if viol <= 1e-7 else math.inf
        return variance_term(g, problem) + pen

    def dual_prox(u, sigma):
        return _prox_box_conj(u, sigma, imbalance_bound, problem.xi)

    gamma, obj, status, iters = _pdhg(
        problem, dual_prox, quad_coef=1.0, objective=objective,
        tol=tol, max_iter=max_iter,
    )
    return _finish(problem, gamma, variance_term(gamma, problem), status, iters)


def _infeasible_solution(problem: BalanceProblem) -> WeightSolution:
    return WeightSolution(
        gamma=np.full(problem.n_w, np.nan),
        imbalance_sup=math.inf,
        variance_term=math.inf,
        objective=math.inf,
        status=SolverStatus.INFEASIBLE,
        iterations=0,
        certificate=None,
    )


def _finish(problem, gamma, obj, status, iters) -> WeightSolution:
    return WeightSolution(
        gamma=gamma,
        imbalance_sup=imbalance_sup_norm(gamma, problem),
        variance_term=variance_term(gamma, problem),
        objective=float(obj),
        status=status,
        iterations=iters,
    )
