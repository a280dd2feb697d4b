"""Estimators: NFXP maximum likelihood, CCP first stages and the two-step
minimum-distance estimator for linear-in-parameters utilities."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import optimize

from . import dp
from .errors import (ContractError, ConvergenceError, DomainError, InconsistencyError,
                     RankError, SeparationError)

logger = logging.getLogger(__name__)


@dataclass
class EstimationSolution:
    """Fitted NFXP optimum ``(theta_hat, V_hat, lambda_hat)`` at fixed ``gamma``."""

    theta_hat: np.ndarray
    v_hat: np.ndarray
    lambda_hat: np.ndarray
    gamma: dict
    objective_value: float
    iterations: int = 0
    grad_norm: float = float("nan")
    fp_residual: float = float("nan")
    kkt_residual: float = float("nan")
    n_obs: int = 0
    trace: list = field(default_factory=list)

    @property
    def beta(self) -> float:
        return float(self.gamma["beta"])

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "v_hat": self.v_hat.tolist(),
            "lambda_hat": self.lambda_hat.tolist(),
            "gamma": dict(self.gamma),
            "objective_value": self.objective_value,
            "convergence": {
                "iterations": self.iterations,
                "grad_norm": self.grad_norm,
                "fp_residual": self.fp_residual,
                "kkt_residual": self.kkt_residual,
            },
            "n_obs": self.n_obs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationSolution":
        conv = d.get("convergence", {})
        return cls(
            theta_hat=np.asarray(d["theta_hat"], dtype=float),
            v_hat=np.asarray(d["v_hat"], dtype=float),
            lambda_hat=np.asarray(d["lambda_hat"], dtype=float),
            gamma={k: float(v) for k, v in d["gamma"].items()},
            objective_value=float(d["objective_value"]),
            iterations=int(conv.get("iterations", 0)),
            grad_norm=float(conv.get("grad_norm", float("nan"))),
            fp_residual=float(conv.get("fp_residual", float("nan"))),
            kkt_residual=float(conv.get("kkt_residual", float("nan"))),
            n_obs=int(d.get("n_obs", 0)),
        )

    def write_json(self, path) -> None:
        # json uses repr for floats, which round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read_json(cls, path) -> "EstimationSolution":
        return cls.from_dict(json.loads(Path(path).read_text()))


def recover_multiplier(l_v, f_v, l_theta=None, f_theta=None, check_tol: float = 1e-6):
    """Lagrange multiplier of the Bellman constraint at an optimum.

    Solves ``(I - F_V)' lambda = -dL/dV``. When ``l_theta`` and ``f_theta``
    are given, the remaining first-order condition
    ``dL/dtheta - F_theta' lambda = 0`` is checked against ``check_tol``.
    """
    l_v = np.asarray(l_v, dtype=float)
    f_v = np.asarray(f_v, dtype=float)
    lam = -np.linalg.solve((np.eye(len(l_v)) - f_v).T, l_v)
    if l_theta is not None and f_theta is not None:
        resid = np.max(np.abs(np.asarray(l_theta) - np.asarray(f_theta).T @ lam))
        if resid > check_tol:
            raise InconsistencyError(
                f"first-order condition in theta fails at claimed optimum: residual {resid:.3e}")
    return lam


class _Profile:
    """Concentrated log-likelihood ``theta -> L(theta, V(theta))`` with warm starts."""

    def __init__(self, model: dp.DdcModel, counts: np.ndarray, v0=None):
        self.model = model
        self.counts = counts
        self.v = v0
        self.evaluations = 0

    def solve_v(self, theta):
        v = dp.solve_value_function(self.model, theta, v0=self.v)
        self.v = v
        return v

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        self.evaluations += 1
        v = self.solve_v(theta)
        ll, l_t, l_v = dp.log_likelihood_gradients(self.model, theta, v, self.counts)
        f_t, f_v, _ = dp.bellman_jacobians(self.model, theta, v)
        dv_dtheta = np.linalg.solve(np.eye(len(v)) - f_v, f_t)
        return ll, l_t + dv_dtheta.T @ l_v

    def hessian(self, theta, step=1e-6):
        d = len(theta)
        h = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = step * (1 + abs(theta[j]))
            h[:, j] = (self.value_and_grad(theta + e)[1] - self.value_and_grad(theta - e)[1]) / (2 * e[j])
        return 0.5 * (h + h.T)


def _maximize(profile: _Profile, init, gtol, max_newton, scale):
    trace = []

    def neg(th):
        # trial points where probabilities underflow are rejected so the line search backtracks
        try:
            ll, g = profile.value_and_grad(th)
        except DomainError:
            return np.inf, np.zeros_like(th)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(th)
        return -ll / scale, -g / scale

    res = optimize.minimize(neg, init, jac=True, method="BFGS",
                            options={"gtol": 1e-9, "maxiter": 500})
    theta = res.x
    if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > 1e6:
        raise ConvergenceError("likelihood appears flat or unbounded; estimates diverged",
                               trace=trace)
    ll, g = profile.value_and_grad(theta)
    trace.append((theta.copy(), ll, float(np.max(np.abs(g)))))
    it = res.nit
    best = (theta, ll, g)
    for _ in range(max_newton):
        if np.max(np.abs(g)) <= gtol:
            break
        h = profile.hessian(theta)
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.linalg.eigvalsh(h) < 0):
            break
        t = 1.0
        while t > 1e-4:
            cand = theta - t * step
            ll_c, g_c = profile.value_and_grad(cand)
            if ll_c >= ll - 1e-12 * abs(ll) or np.max(np.abs(g_c)) < np.max(np.abs(g)):
                break
            t *= 0.5
        theta, ll, g = cand, ll_c, g_c
        it += 1
        trace.append((theta.copy(), ll, float(np.max(np.abs(g)))))
        if np.max(np.abs(g)) < np.max(np.abs(best[2])):
            best = (theta, ll, g)
    # near the roundoff floor Newton steps wander; keep the smallest gradient
    theta, ll, g = best
    return theta, ll, g, it, trace


def nfxp_estimate(model: dp.DdcModel, data: dp.PanelDataset, gamma: Optional[float] = None,
                  init_theta=None, gtol: float = 1e-8, n_starts: int = 1, seed: int = 0,
                  v0=None, max_newton: int = 20, strict: bool = True) -> EstimationSolution:
    """Nested fixed-point maximum likelihood.

    The outer loop maximizes the concentrated log-likelihood with BFGS using
    the analytic gradient ``dL/dtheta + (dV/dtheta')' dL/dV`` (with
    ``(I - F_V) dV/dtheta' = F_theta``), then polishes with Newton steps on a
    central-difference Hessian of that gradient. ``gamma`` overrides the
    model's discount factor.

    With ``n_starts > 1`` the extra starts are Gaussian perturbations of
    ``init_theta``; the best optimum is returned.

    Raises:
        ConvergenceError: the per-observation outer gradient norm stays
            above ``gtol`` (when ``strict``) or estimates diverge. Newton
            polishing still aims for ``gtol`` on the summed gradient.
    """
    if gamma is not None:
        model = model.with_beta(gamma)
    if len(data) == 0:
        raise ContractError("empty dataset")
    counts = data.counts(model.num_states, model.num_actions)
    d = np.asarray(model.utility_grad(np.zeros(1))).shape[-1] if init_theta is None else len(init_theta)
    init = np.zeros(d) if init_theta is None else np.asarray(init_theta, dtype=float)
    if not np.all(np.isfinite(init)):
        raise ContractError("init_theta must be finite")
    scale = float(counts.sum())
    rng = np.random.default_rng(seed)
    starts = [init] + [init + rng.normal(scale=0.5 * (1 + np.abs(init))) for _ in range(n_starts - 1)]

    best = None
    for start in starts:
        profile = _Profile(model, counts, v0=v0)
        try:
            out = _maximize(profile, start, gtol, max_newton, scale)
        except ConvergenceError:
            if len(starts) == 1:
                raise
            continue
        if best is None or out[1] > best[0][1]:
            best = (out, profile)
    if best is None:
        raise ConvergenceError("all starts failed")
    (theta, ll, g, it, trace), profile = best
    grad_norm = float(np.max(np.abs(g)))
    # the summed gradient has a roundoff floor that grows with the sample size
    # and with 1 / (1 - beta); the strict test is per observation
    if strict and grad_norm / scale > gtol:
        raise ConvergenceError(f"outer gradient norm {grad_norm:.3e} ({grad_norm / scale:.3e} per "
                               f"observation) above gtol {gtol:.1e}",
                               residual=grad_norm, iterations=it, trace=trace)
    v = profile.solve_v(theta)
    fp_res = float(np.max(np.abs(v - dp.bellman_apply(model, theta, v))))
    _, l_t, l_v = dp.log_likelihood_gradients(model, theta, v, counts)
    f_t, f_v, _ = dp.bellman_jacobians(model, theta, v)
    lam = recover_multiplier(l_v, f_v, l_t, f_t, check_tol=max(1e-6, 10 * gtol))
    kkt = float(np.max(np.abs(l_t - f_t.T @ lam)))
    logger.debug("nfxp beta=%s theta=%s |g|=%.2e evals=%d", model.beta, theta, grad_norm,
                 profile.evaluations)
    return EstimationSolution(theta_hat=theta, v_hat=v, lambda_hat=lam,
                              gamma={"beta": float(model.beta)}, objective_value=float(ll),
                              iterations=it, grad_norm=grad_norm, fp_residual=fp_res,
                              kkt_residual=kkt, n_obs=int(scale), trace=trace)


def kkt_residuals(model: dp.DdcModel, solution: EstimationSolution, data: dp.PanelDataset):
    """Sup-norm residuals of the three first-order conditions (theta, V, constraint)."""
    model = model.with_beta(solution.beta)
    counts = data.counts(model.num_states, model.num_actions)
    th, v, lam = solution.theta_hat, solution.v_hat, solution.lambda_hat
    _, l_t, l_v = dp.log_likelihood_gradients(model, th, v, counts)
    f_t, f_v, _ = dp.bellman_jacobians(model, th, v)
    r_theta = np.max(np.abs(l_t - f_t.T @ lam))
    r_v = np.max(np.abs(l_v + (np.eye(len(v)) - f_v).T @ lam))
    r_c = np.max(np.abs(v - dp.bellman_apply(model, th, v)))
    return float(r_theta), float(r_v), float(r_c)


@dataclass
class LogitCcpFit:
    coef: np.ndarray
    probs: np.ndarray
    degree: int
    iterations: int


def polynomial_features(num_states: int, degree: int = 2) -> np.ndarray:
    """Columns ``1, s, s^2, ...`` with ``s = x / X`` for states ``x = 1..X``."""
    s = np.arange(1, num_states + 1) / num_states
    return np.column_stack([s ** k for k in range(degree + 1)])


def fit_ccp_logit(data: dp.PanelDataset, num_states: int, num_actions: int = 2,
                  degree: int = 2, max_iter: int = 100, tol: float = 1e-10) -> LogitCcpFit:
    """Multinomial logit of the action on a polynomial in the state.

    Action ``A`` (the last) is the reference category. Features are powers of
    ``x / X``, so coefficients are on that scale.

    Raises:
        SeparationError: estimates diverge or fitted probabilities at
            observed states collapse to 0 or 1.
    """
    counts = data.counts(num_states, num_actions)
    z = polynomial_features(num_states, degree)
    k = z.shape[1]
    n_tot = counts.sum(axis=1)
    beta = np.zeros((num_actions - 1, k))

    def probs(b):
        eta = np.column_stack([z @ b.T, np.zeros(num_states)])
        return dp._softmax(eta)

    def loglik(b):
        p = probs(b)
        mask = counts > 0
        with np.errstate(divide="ignore"):
            return float(np.sum(counts[mask] * np.log(p[mask])))

    ll = loglik(beta)
    it = 0
    for it in range(1, max_iter + 1):
        p = probs(beta)
        resid = counts[:, :-1] - n_tot[:, None] * p[:, :-1]
        grad = (resid.T @ z).ravel()
        m = num_actions - 1
        hess = np.zeros((m * k, m * k))
        for a in range(m):
            for b in range(m):
                w = n_tot * p[:, a] * ((a == b) - p[:, b])
                hess[a * k:(a + 1) * k, b * k:(b + 1) * k] = -(z * w[:, None]).T @ z
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("singular logit information matrix; use "
                                  "ccp_frequency_estimate instead") from exc
        t = 1.0
        while True:
            cand = beta - t * step.reshape(m, k)
            ll_c = loglik(cand)
            if ll_c >= ll or t < 1e-8:
                break
            t *= 0.5
        beta, ll = cand, ll_c
        if np.max(np.abs(step)) * t < tol:
            break
    p = probs(beta)
    observed = n_tot > 0
    if (it == max_iter or np.max(np.abs(beta)) > 1e3
            or np.min(p[observed]) < 1e-10):
        raise SeparationError("logit first stage diverged (perfect or quasi-perfect "
                              "separation); use ccp_frequency_estimate instead")
    if np.min(p) <= 0 or np.max(p) >= 1:
        raise SeparationError("fitted probabilities are not interior at unobserved states")
    return LogitCcpFit(coef=beta, probs=p, degree=degree, iterations=it)


def ccp_logit_estimate(data: dp.PanelDataset, num_states: int, num_actions: int = 2,
                       degree: int = 2) -> np.ndarray:
    """First-stage CCPs ``(X, A+1)`` from a polynomial-in-state logit."""
    return fit_ccp_logit(data, num_states, num_actions, degree).probs


def ccp_frequency_estimate(data: dp.PanelDataset, num_states: int, num_actions: int = 2) -> np.ndarray:
    counts = data.counts(num_states, num_actions)
    n = counts.sum(axis=1, keepdims=True)
    if np.any(n == 0) or np.any(counts == 0):
        raise DomainError("frequency CCPs need every (state, action) cell observed")
    return counts / n


@dataclass
class LinearUtilitySpec:
    """Stacked coefficient matrix ``Pi`` (``(A*X, d)``) and weighting matrix ``W``."""

    Pi: np.ndarray
    W: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Pi = np.atleast_2d(np.asarray(self.Pi, dtype=float))
        n = self.Pi.shape[0]
        self.W = np.eye(n) if self.W is None else np.atleast_2d(np.asarray(self.W, dtype=float))
        if self.W.shape != (n, n):
            raise ContractError(f"W must be {n}x{n}")
        if not np.allclose(self.W, self.W.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.W).max())):
            raise ContractError("W must be symmetric")
        try:
            self._chol = np.linalg.cholesky(self.W)
        except np.linalg.LinAlgError as exc:
            raise ContractError("W must be positive definite") from exc
        if np.linalg.matrix_rank(self._chol.T @ self.Pi) < self.Pi.shape[1]:
            raise RankError("Pi' W Pi is singular")

    def project(self, y) -> np.ndarray:
        """``(Pi' W Pi)^{-1} Pi' W y`` via least squares on ``chol(W)'``."""
        a = self._chol.T @ self.Pi
        b = self._chol.T @ np.asarray(y, dtype=float)
        return np.linalg.lstsq(a, b, rcond=None)[0]


def min_distance_estimate(pi_hat, spec: LinearUtilitySpec) -> np.ndarray:
    """Closed-form weighted least squares ``theta = (Pi'W Pi)^{-1} Pi'W pi_hat``."""
    pi_hat = np.asarray(pi_hat, dtype=float).ravel()
    if pi_hat.shape[0] != spec.Pi.shape[0]:
        raise ContractError(f"pi_hat has length {pi_hat.shape[0]}, Pi has {spec.Pi.shape[0]} rows")
    return spec.project(pi_hat)


def stack_utilities(pi: np.ndarray) -> np.ndarray:
    """Stack the ``(X, A)`` output of ``ccp_to_utilities`` as ``[pi_0; pi_1; ...]``."""
    return np.asarray(pi).T.ravel()


def two_step_estimate(p, model: dp.DdcModel, spec: LinearUtilitySpec,
                      beta: Optional[float] = None) -> np.ndarray:
    """Hotz-Miller / minimum-distance estimate of linear utility parameters."""
    pi_hat = stack_utilities(dp.ccp_to_utilities(p, model, beta))
    return min_distance_estimate(pi_hat, spec)
