"""Global sensitivity to the discount factor.

Covers the beta-derivative of CCP-implied utilities, monotonicity
certificates, derivatives of linear-in-parameters minimum-distance
estimates, profiled bounds over a discount-factor interval and breakdown
frontiers.

Utility derivative. With ``M = I - beta Q_A`` and ``w = -log p_A`` the
CCP-implied utility is ``pi_a = (I - beta Q_a) M^{-1} w + log p_a`` and

    d pi_a / d beta = -[Q_a M^{-1} - M^{-1} Q_A] M^{-1} w.

Note the second term carries ``Q_A``; with ``Q_a`` in its place the
expression no longer matches finite differences of ``pi_a(beta)``.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.linalg import lu_factor, lu_solve

from . import dp
from .errors import ContractError, PremiseError

NONDECREASING = "nondecreasing"
NONINCREASING = "nonincreasing"
CONSTANT = "constant"
INDETERMINATE = "indeterminate"


def _kernel(w, q_a, q_A, beta):
    n = len(w)
    lu = lu_factor(np.eye(n) - beta * np.asarray(q_A, dtype=float))
    s = lu_solve(lu, w)
    t = lu_solve(lu, s)
    return -np.asarray(q_a) @ t + lu_solve(lu, np.asarray(q_A) @ s)


def _check_interior(p_A):
    p_A = np.asarray(p_A, dtype=float)
    if np.any(p_A <= 0) or np.any(p_A > 1):
        raise ContractError("p_A must be interior")
    return p_A


def utility_beta_derivative(p_A, Q_a, Q_A, beta, psi_A=None) -> np.ndarray:
    """``d pi_a / d beta`` under ``pi_A = 0``; ``psi_A`` replaces ``-log p_A``
    for non-logit shocks."""
    w = -np.log(_check_interior(p_A)) if psi_A is None else np.asarray(psi_A, dtype=float)
    return _kernel(w, Q_a, Q_A, beta)


def normalized_utility_beta_derivative(p_A, Q_a, Q_A, beta, pi_bar_A) -> np.ndarray:
    """``d pi_a / d beta`` under ``pi_A = pi_bar_A``."""
    w = np.asarray(pi_bar_A, dtype=float) - np.log(_check_interior(p_A))
    return _kernel(w, Q_a, Q_A, beta)


def finite_dependence_gap(Q_a, Q_A, rho: int) -> float:
    """``max |Q_a Q_A^rho - Q_A Q_A^rho|``."""
    q_rho = np.linalg.matrix_power(np.asarray(Q_A, dtype=float), rho)
    return float(np.max(np.abs(np.asarray(Q_a) @ q_rho - np.asarray(Q_A) @ q_rho)))


def finite_dependence_derivative(p_A, Q_a, Q_A, beta, rho: int, tol: float = 1e-10) -> np.ndarray:
    """Utility derivative under rho-period finite dependence.

    ``-(Q_a - Q_A)(I + beta Q_A + ... + beta^{rho-1} Q_A^{rho-1}) M^{-1} (-log p_A)``.

    Raises:
        PremiseError: ``Q_a Q_A^rho != Q_A Q_A^rho`` beyond ``tol``.
    """
    if rho < 1:
        raise ContractError("rho must be a positive integer")
    gap = finite_dependence_gap(Q_a, Q_A, rho)
    if gap > tol:
        raise PremiseError(f"{rho}-period finite dependence fails (gap {gap:.2e})")
    q_A = np.asarray(Q_A, dtype=float)
    n = q_A.shape[0]
    w = -np.log(_check_interior(p_A))
    s = np.linalg.solve(np.eye(n) - beta * q_A, w)
    acc = np.zeros(n)
    term = s
    for k in range(rho):
        acc += beta ** k * term
        term = q_A @ term
    return -(np.asarray(Q_a) - q_A) @ acc


@dataclass
class MonotonicityVerdict:
    """Per-(action, state) monotonicity of ``pi_a`` in beta and how it was certified.

    ``classification[a, x]`` refers to action ``a`` (``a != A``) and 0-based
    state ``x``. ``premise`` stores the quantities the certificate checked.
    """

    classification: np.ndarray
    certificate: str
    premise: dict = field(default_factory=dict)

    @property
    def overall(self) -> str:
        values = set(self.classification.ravel().tolist())
        if len(values) == 1:
            return values.pop()
        if values <= {NONDECREASING, CONSTANT}:
            return NONDECREASING
        if values <= {NONINCREASING, CONSTANT}:
            return NONINCREASING
        return INDETERMINATE

    def rows(self):
        n_a, n_x = self.classification.shape
        return [{"action": a, "state": x + 1, "verdict": self.classification[a, x],
                 "certificate": self.certificate}
                for a in range(n_a) for x in range(n_x)]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["action", "state", "verdict", "certificate"],
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows())

    @staticmethod
    def read_csv(path) -> list:
        with Path(path).open(newline="") as fh:
            return [{"action": int(r["action"]), "state": int(r["state"]),
                     "verdict": r["verdict"], "certificate": r["certificate"]}
                    for r in csv.DictReader(fh)]


def is_reset_matrix(Q_A) -> bool:
    q = np.asarray(Q_A, dtype=float)
    target = np.zeros_like(q)
    target[:, 0] = 1.0
    return bool(np.array_equal(q, target))


def renewal_monotonicity_check(p_A, Q_A, num_other_actions: int = 1) -> MonotonicityVerdict:
    """Monotonicity certificate when the reference action resets the state to 1.

    Nondecreasing if ``p_A(1) <= p_A(x)`` for all ``x``, nonincreasing if
    ``p_A(1) >= p_A(x)`` for all ``x`` (constant if both), otherwise
    indeterminate. The verdict applies to every ``pi_a``, ``a != A``.
    """
    if not is_reset_matrix(Q_A):
        raise PremiseError("reference action is not a renewal (reset-to-state-1) action")
    p_A = np.asarray(p_A, dtype=float)
    if p_A[0] <= 0:
        raise PremiseError("renewal certificate needs p_A(1) > 0")
    lower = bool(np.all(p_A[0] <= p_A))
    upper = bool(np.all(p_A[0] >= p_A))
    if lower and upper:
        verdict = CONSTANT
    elif lower:
        verdict = NONDECREASING
    elif upper:
        verdict = NONINCREASING
    else:
        verdict = INDETERMINATE
    cls = np.full((num_other_actions, len(p_A)), verdict, dtype=object)
    return MonotonicityVerdict(cls, "renewal-corollary",
                               {"p_A_1": float(p_A[0]), "min_p_A": float(p_A.min()),
                                "max_p_A": float(p_A.max())})


def _classify(lo, hi, tol):
    out = np.full(lo.shape, INDETERMINATE, dtype=object)
    out[lo >= -tol] = NONDECREASING
    out[hi <= tol] = NONINCREASING
    out[(lo >= -tol) & (hi <= tol)] = CONSTANT
    return out


def one_period_slope_verdict(p_A, Q_others: Sequence, Q_A, tol: float = 1e-10) -> MonotonicityVerdict:
    """Exact verdict under one-period finite dependence, where the slope
    ``(Q_A - Q_a)(-log p_A)`` does not depend on beta."""
    slopes = []
    for q_a in Q_others:
        gap = finite_dependence_gap(q_a, Q_A, 1)
        if gap > tol:
            raise PremiseError(f"one-period finite dependence fails (gap {gap:.2e})")
        slopes.append((np.asarray(Q_A) - np.asarray(q_a)) @ (-np.log(_check_interior(p_A))))
    slopes = np.array(slopes)
    return MonotonicityVerdict(_classify(slopes, slopes, tol), "one-period-slope",
                               {"slopes": slopes.tolist()})


def default_beta_grid(full: bool = False) -> np.ndarray:
    """101 points on ``[0, 0.99]``, or ``[0, 0.9999]`` at step ``1e-4`` when ``full``."""
    if full:
        return np.round(np.arange(0, 10000) * 1e-4, 4)
    return np.linspace(0.0, 0.99, 101)


def sign_scan_verdict(p_A, Q_others: Sequence, Q_A, beta_grid=None, tol: float = 1e-10) -> MonotonicityVerdict:
    """Classify by the sign of ``d pi_a / d beta`` evaluated on a beta grid."""
    grid = default_beta_grid() if beta_grid is None else np.asarray(beta_grid, dtype=float)
    derivs = np.array([[utility_beta_derivative(p_A, q_a, Q_A, b) for b in grid]
                       for q_a in Q_others])
    lo, hi = derivs.min(axis=1), derivs.max(axis=1)
    return MonotonicityVerdict(_classify(lo, hi, tol), "sign-scan",
                               {"beta_min": float(grid.min()), "beta_max": float(grid.max()),
                                "num_points": int(len(grid))})


def theta_beta_derivative(spec, dpi_dbeta) -> np.ndarray:
    """``(Pi'W Pi)^{-1} Pi'W dpi/dbeta``."""
    dpi = np.asarray(dpi_dbeta, dtype=float).ravel()
    if dpi.shape[0] != spec.Pi.shape[0]:
        raise ContractError("dpi_dbeta length must match Pi rows")
    return spec.project(dpi)


def theta_delta_derivative(spec, dPi_ddelta, theta_hat, pi_hat) -> np.ndarray:
    """Derivative of the minimum-distance estimate when ``Pi`` depends on ``delta``.

    ``-(Pi'W Pi)^{-1} [dPi' W Pi theta + Pi' W dPi theta - dPi' W pi_hat]``,
    from differentiating the normal equations. The two middle terms coincide
    (giving ``Pi'(W + W')dPi theta``) only in special cases such as a scalar
    parameter.
    """
    Pi, W = spec.Pi, spec.W
    dPi = np.atleast_2d(np.asarray(dPi_ddelta, dtype=float))
    if dPi.shape != Pi.shape:
        raise ContractError("dPi_ddelta must have the shape of Pi")
    theta_hat = np.asarray(theta_hat, dtype=float)
    pi_hat = np.asarray(pi_hat, dtype=float).ravel()
    rhs = dPi.T @ W @ Pi @ theta_hat + Pi.T @ W @ dPi @ theta_hat - dPi.T @ W @ pi_hat
    return -np.linalg.solve(Pi.T @ W @ Pi, rhs)


@dataclass
class CcpDecomposition:
    """Terms of ``dp~(x)/dbeta = -(a) [(b) + (c)]`` for the replacement CCP."""

    term_a: np.ndarray
    term_b: np.ndarray
    term_c: np.ndarray

    @property
    def derivative(self) -> np.ndarray:
        return -self.term_a * (self.term_b + self.term_c)


def counterfactual_ccp_derivative_decomposition(cf_model: dp.DdcModel, theta_cf, v_cf,
                                                dtheta_cf, dv_cf) -> CcpDecomposition:
    """Decompose the beta-derivative of the counterfactual CCP of action 1.

    (a) ``p~(1 - p~)``; (b) ``[dpi~(0,x)/dtheta - dpi~(1,x)/dtheta] dtheta~/dbeta``,
    which is ``-x dMC~/dbeta + dRC~/dbeta`` in the bus-engine model;
    (c) ``[Q_0(x) - Q_1(x)]'(V~ + beta dV~/dbeta)``.
    """
    if cf_model.num_actions != 2:
        raise ContractError("decomposition is defined for binary choice")
    p = dp.ccp_from_values(cf_model, theta_cf, v_cf)[:, 1]
    g = np.asarray(cf_model.utility_grad(np.asarray(theta_cf, dtype=float)))
    dtheta = np.asarray(dtheta_cf, dtype=float).ravel()
    dv = np.asarray(dv_cf, dtype=float).ravel()
    q0, q1 = cf_model.transitions
    term_b = (g[:, 0, :] - g[:, 1, :]) @ dtheta
    term_c = (q0 - q1) @ (np.asarray(v_cf) + cf_model.beta * dv)
    return CcpDecomposition(p * (1 - p), term_b, term_c)


@dataclass
class BoundsResult:
    target: str
    interval: tuple
    lower: float
    upper: float
    argmin: float
    argmax: float
    evaluations: list
    wall_time: float
    method: str = "profile"

    def __post_init__(self):
        if self.lower > self.upper:
            raise ContractError("lower bound exceeds upper bound")

    def to_dict(self) -> dict:
        return {"target": self.target, "interval": list(self.interval), "lower": self.lower,
                "upper": self.upper, "argmin": self.argmin, "argmax": self.argmax,
                "evaluations": [list(e) for e in self.evaluations],
                "wall_time": self.wall_time, "method": self.method}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundsResult":
        return cls(target=d["target"], interval=tuple(d["interval"]), lower=d["lower"],
                   upper=d["upper"], argmin=d["argmin"], argmax=d["argmax"],
                   evaluations=[tuple(e) for e in d["evaluations"]],
                   wall_time=d["wall_time"], method=d.get("method", "profile"))

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read_json(cls, path) -> "BoundsResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


TABLE2_COLUMNS = ("target", "upper_bound_beta", "bound_lo", "bound_hi", "wall_time_s")


def write_table2_csv(results: Sequence[BoundsResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE2_COLUMNS)
        for r in results:
            writer.writerow([r.target, repr(float(r.interval[1])), repr(r.lower), repr(r.upper),
                             repr(r.wall_time)])


def read_table2_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return [{"target": r["target"], **{k: float(r[k]) for k in TABLE2_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]


class _Recorder:
    def __init__(self, target):
        self.target = target
        self.log = {}

    def __call__(self, gamma):
        gamma = float(gamma)
        if gamma not in self.log:
            self.log[gamma] = float(self.target(gamma))
        return self.log[gamma]


def _refine(rec: _Recorder, grid, values, sign, xatol):
    i = int(np.argmin(sign * values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    if hi > lo:
        optimize.minimize_scalar(lambda g: sign * rec(g), bounds=(lo, hi), method="bounded",
                                 options={"xatol": xatol})


def bounds_estimate(target: Callable[[float], float], interval, method: str = "profile",
                    name: str = "target", n_seed: int = 21, grid_step: float = 1e-3,
                    xatol: float = 1e-6) -> BoundsResult:
    """Min and max of ``gamma -> tau(theta(gamma), V(gamma); gamma)`` over an interval.

    ``target`` must return the profiled target value at ``gamma``, i.e. it
    re-solves the estimation problem so every evaluation satisfies the
    first-order conditions.

    Methods:
        ``"profile"``: ``n_seed`` equally spaced evaluations (endpoints
            included), then a bounded scalar search (golden section with
            parabolic steps) around the best seed, once for each direction.
        ``"grid-oracle"``: exhaustive grid with spacing ``grid_step``.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not hi >= lo:
        raise ContractError("interval must satisfy lo <= hi")
    start = time.perf_counter()
    rec = _Recorder(target)
    if method == "profile":
        grid = np.linspace(lo, hi, n_seed) if hi > lo else np.array([lo])
        values = np.array([rec(g) for g in grid])
        _refine(rec, grid, values, 1.0, xatol)
        _refine(rec, grid, values, -1.0, xatol)
    elif method == "grid-oracle":
        n = int(round((hi - lo) / grid_step)) + 1
        for g in np.linspace(lo, hi, max(n, 1)):
            rec(g)
    else:
        raise ContractError(f"unknown bounds method {method!r}")
    evals = sorted(rec.log.items())
    gam = np.array([e[0] for e in evals])
    val = np.array([e[1] for e in evals])
    i_min, i_max = int(np.argmin(val)), int(np.argmax(val))
    return BoundsResult(target=name, interval=(lo, hi), lower=float(val[i_min]),
                        upper=float(val[i_max]), argmin=float(gam[i_min]),
                        argmax=float(gam[i_max]), evaluations=evals,
                        wall_time=time.perf_counter() - start, method=method)


@dataclass
class BreakdownResult:
    """Robust region ``{gamma : tau(gamma) >= tau*}`` (or ``<=`` for direction
    ``"below"``) and its frontier."""

    tau_star: float
    interval: tuple
    direction: str
    verdict: str
    frontier: list
    robust_region: list
    method: str
    multiple_crossings: bool = False

    def to_dict(self) -> dict:
        return {"tau_star": self.tau_star, "interval": list(self.interval),
                "direction": self.direction, "verdict": self.verdict,
                "frontier": list(self.frontier),
                "robust_region": [list(r) for r in self.robust_region],
                "method": self.method, "multiple_crossings": self.multiple_crossings}

    @classmethod
    def from_dict(cls, d: dict) -> "BreakdownResult":
        return cls(tau_star=d["tau_star"], interval=tuple(d["interval"]), direction=d["direction"],
                   verdict=d["verdict"], frontier=list(d["frontier"]),
                   robust_region=[tuple(r) for r in d["robust_region"]], method=d["method"],
                   multiple_crossings=d.get("multiple_crossings", False))

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _bisect(f, a, b, fa, tol_f, xtol=1e-13, max_iter=200):
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        fm = f(m)
        if abs(fm) <= tol_f or (b - a) < xtol:
            return m
        if np.sign(fm) == np.sign(fa):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def breakdown_frontier(target: Callable[[float], float], tau_star: float, interval,
                       direction: str = "above", monotone: bool = False,
                       grid_points: int = 101) -> BreakdownResult:
    """Locate where the conclusion ``tau(gamma) >= tau*`` (or ``<=``) breaks down.

    With ``monotone=True`` (a certificate is available) the frontier is found
    by bisection between the endpoints. Otherwise the interval is scanned on
    ``grid_points`` points, every sign change is refined by bisection, and a
    warning is issued if there is more than one.
    """
    if direction not in ("above", "below"):
        raise ContractError("direction must be 'above' or 'below'")
    sign = 1.0 if direction == "above" else -1.0
    lo, hi = float(interval[0]), float(interval[1])
    tol_f = 1e-6 * (1 + abs(tau_star))

    def f(g):
        return sign * (target(g) - tau_star)

    grid = np.array([lo, hi]) if monotone else np.linspace(lo, hi, grid_points)
    values = np.array([f(g) for g in grid])
    robust = values >= 0
    method = "bisection" if monotone else "grid-scan"
    if np.all(robust) or np.all(~robust):
        verdict = "all-robust" if np.all(robust) else "none-robust"
        region = [(lo, hi)] if np.all(robust) else []
        return BreakdownResult(tau_star, (lo, hi), direction, verdict, [], region, method)
    frontier = []
    for k in range(len(grid) - 1):
        if robust[k] != robust[k + 1]:
            frontier.append(float(_bisect(f, grid[k], grid[k + 1], values[k], tol_f)))
    multiple = len(frontier) > 1
    if multiple:
        warnings.warn(f"{len(frontier)} breakdown points found; target is not monotone",
                      RuntimeWarning, stacklevel=2)
    edges = [lo] + frontier + [hi]  # robustness flips at each crossing
    region = []
    inside = bool(robust[0])
    for k in range(len(edges) - 1):
        if inside:
            region.append((edges[k], edges[k + 1]))
        inside = not inside
    return BreakdownResult(tau_star, (lo, hi), direction, "frontier", frontier, region, method,
                           multiple_crossings=multiple)
