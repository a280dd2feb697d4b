"""Local sensitivity of constrained estimators to fixed parameters.

The estimator solves ``opt L(theta, V; gamma)`` subject to
``V = F(theta, V; gamma)``. Total differentiation of the first-order
conditions

    dL/dtheta - F_theta' lam = 0
    dL/dV + (I - F_V)' lam = 0
    V - F = 0

gives a square linear system in ``(dtheta/dgamma', dV/dgamma', dlam/dgamma')``.

Second-order constraint terms enter through Jacobians of
``vec[(dF/dx')']`` (column-stacking vec). For ``x`` of size ``d_x`` that
Jacobian has shape ``(d_V * d_x, d_y)`` and row ``j * d_x + i`` holds
``d2 F_j / dx_i dy'``. They are contracted with ``R_d = lam' kron I_d``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import dp
from .errors import ContractError, IllPosedError

COND_LIMIT = 1e12
ZERO_DENOM = 1e-300


def r_matrix(lam, d: int) -> np.ndarray:
    """``R_d = lam' kron I_d`` with shape ``(d, d * d_V)``."""
    lam = np.asarray(lam, dtype=float).reshape(1, -1)
    return np.kron(lam, np.eye(d))


@dataclass
class DerivativeBundle:
    """Every coefficient of the sensitivity system, evaluated at the optimum.

    Shapes: ``L_tt (dt, dt)``, ``L_tv (dt, dv)``, ``L_vv (dv, dv)``,
    ``L_tg (dt, dg)``, ``L_vg (dv, dg)``, ``F_t (dv, dt)``, ``F_v (dv, dv)``,
    ``F_g (dv, dg)``; ``vecF_t_by_t (dv*dt, dt)``, ``vecF_t_by_v (dv*dt, dv)``,
    ``vecF_t_by_g (dv*dt, dg)``, ``vecF_v_by_t (dv*dv, dt)``,
    ``vecF_v_by_v (dv*dv, dv)``, ``vecF_v_by_g (dv*dv, dg)``; ``lam (dv,)``.
    """

    L_tt: np.ndarray
    L_tv: np.ndarray
    L_vv: np.ndarray
    L_tg: np.ndarray
    L_vg: np.ndarray
    F_t: np.ndarray
    F_v: np.ndarray
    F_g: np.ndarray
    vecF_t_by_t: np.ndarray
    vecF_t_by_v: np.ndarray
    vecF_t_by_g: np.ndarray
    vecF_v_by_t: np.ndarray
    vecF_v_by_v: np.ndarray
    vecF_v_by_g: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        dt, dv, dg = self.dims
        expected = {
            "L_tt": (dt, dt), "L_tv": (dt, dv), "L_vv": (dv, dv), "L_tg": (dt, dg),
            "L_vg": (dv, dg), "F_t": (dv, dt), "F_v": (dv, dv), "F_g": (dv, dg),
            "vecF_t_by_t": (dv * dt, dt), "vecF_t_by_v": (dv * dt, dv),
            "vecF_t_by_g": (dv * dt, dg), "vecF_v_by_t": (dv * dv, dt),
            "vecF_v_by_v": (dv * dv, dv), "vecF_v_by_g": (dv * dv, dg), "lam": (dv,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self):
        return self.L_tt.shape[0], self.L_vv.shape[0], self.L_tg.shape[1]

    def check_symmetry(self, tol: float = 1e-10) -> None:
        for name in ("L_tt", "L_vv"):
            m = getattr(self, name)
            if np.max(np.abs(m - m.T)) > tol * max(1.0, np.max(np.abs(m))):
                raise ContractError(f"{name} is not symmetric")

    def a_blocks(self) -> dict:
        dt, dv, _ = self.dims
        r_t = r_matrix(self.lam, dt)
        r_v = r_matrix(self.lam, dv)
        return {
            "tt": self.L_tt - r_t @ self.vecF_t_by_t,
            "tv": self.L_tv - r_t @ self.vecF_t_by_v,
            "tg": self.L_tg - r_t @ self.vecF_t_by_g,
            "vt": self.L_tv.T - r_v @ self.vecF_v_by_t,
            "vv": self.L_vv - r_v @ self.vecF_v_by_v,
            "vg": self.L_vg - r_v @ self.vecF_v_by_g,
        }

    def system(self):
        """Coefficient matrix and right-hand side of the sensitivity system."""
        dt, dv, dg = self.dims
        a = self.a_blocks()
        eye = np.eye(dv)
        m = np.block([
            [a["tt"], a["tv"], -self.F_t.T],
            [a["vt"], a["vv"], (eye - self.F_v).T],
            [self.F_t, self.F_v - eye, np.zeros((dv, dv))],
        ])
        rhs = -np.vstack([a["tg"], a["vg"], self.F_g])
        return m, rhs


def assemble_bundle_analytic(config, solution, data=None, counts=None) -> DerivativeBundle:
    """Map the bus-engine derivative bank at a fitted optimum into a bundle."""
    from .zurcher import analytic_derivative_bank

    bank = analytic_derivative_bank(config, solution.theta_hat, solution.v_hat, data=data,
                                    counts=counts, beta=solution.beta)
    n_x = config.num_states
    bundle = DerivativeBundle(
        L_tt=bank.L_tt, L_tv=bank.L_tv, L_vv=bank.L_vv,
        L_tg=bank.L_tb[:, None], L_vg=bank.L_vb[:, None],
        F_t=bank.F_t, F_v=bank.F_v, F_g=bank.F_b[:, None],
        vecF_t_by_t=bank.F_tt.reshape(n_x * 2, 2),
        vecF_t_by_v=bank.F_tv.reshape(n_x * 2, n_x),
        vecF_t_by_g=bank.F_tb.reshape(n_x * 2, 1),
        vecF_v_by_t=bank.F_tv.transpose(0, 2, 1).reshape(n_x * n_x, 2),
        vecF_v_by_v=bank.F_vv.reshape(n_x * n_x, n_x),
        vecF_v_by_g=bank.F_vb.reshape(n_x * n_x, 1),
        lam=solution.lambda_hat,
    )
    bundle.check_symmetry()
    return bundle


def _second_differences(fun, z, steps):
    """Central-difference first and second derivatives of ``fun`` at ``z``.

    ``fun`` may return a scalar or a vector; results carry its shape as
    leading axes: ``grad (..., n)``, ``hess (..., n, n)``.
    """
    n = len(z)
    f0 = np.asarray(fun(z), dtype=float)
    grad = np.empty(f0.shape + (n,))
    hess = np.empty(f0.shape + (n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = steps[i]
        fp, fm = np.asarray(fun(z + e)), np.asarray(fun(z - e))
        grad[..., i] = (fp - fm) / (2 * steps[i])
        hess[..., i, i] = (fp - 2 * f0 + fm) / steps[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = steps[i]
            ej[j] = steps[j]
            val = (np.asarray(fun(z + ei + ej)) - np.asarray(fun(z + ei - ej))
                   - np.asarray(fun(z - ei + ej)) + np.asarray(fun(z - ei - ej)))
            val = val / (4 * steps[i] * steps[j])
            hess[..., i, j] = val
            hess[..., j, i] = val
    return f0, grad, hess


def numeric_multiplier(objective: Callable, constraint: Callable, theta, v, gamma,
                       step: float = 1e-6) -> np.ndarray:
    """Multiplier from central first differences of ``L`` and ``F`` in ``V``.

    First differences are far more accurate than the second differences of a
    bundle, so the multiplier is always recovered at a small step.
    """
    from .estimate import recover_multiplier

    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    l_v = np.empty(len(v))
    f_v = np.empty((len(v), len(v)))
    for i in range(len(v)):
        e = np.zeros(len(v))
        e[i] = step * (1 + abs(v[i]))
        l_v[i] = (objective(theta, v + e, gamma) - objective(theta, v - e, gamma)) / (2 * e[i])
        f_v[:, i] = (np.asarray(constraint(theta, v + e, gamma))
                     - np.asarray(constraint(theta, v - e, gamma))) / (2 * e[i])
    return recover_multiplier(l_v, f_v)


def assemble_bundle_numeric(objective: Callable, constraint: Callable, theta, v, gamma,
                            lam=None, step: float = 1e-5, relative: bool = True,
                            richardson: int = 0) -> DerivativeBundle:
    """Central-difference bundle around a stored optimum (no re-estimation).

    Args:
        objective: ``(theta, V, gamma) -> float``.
        constraint: ``(theta, V, gamma) -> F`` with ``F`` of length ``d_V``.
        lam: multiplier; recovered from the numeric derivatives when omitted.
        step: difference step; multiplied by ``1 + |z_i|`` when ``relative``.
            The default balances truncation against roundoff for second
            derivatives.
        richardson: number of Richardson extrapolation levels (steps
            ``step, 2 step, 4 step, ...``). In DDC models ``dV/dgamma`` is large
            along the constant vector, which amplifies second-derivative
            errors in the ``V`` blocks; ``richardson=2`` with ``step`` around
            ``1e-2`` is a good setting there.
    """
    if lam is None:
        lam = numeric_multiplier(objective, constraint, theta, v, gamma)
    if richardson > 0:
        levels = [assemble_bundle_numeric(objective, constraint, theta, v, gamma, lam=lam,
                                          step=step * 2 ** k, relative=relative)
                  for k in range(richardson + 1)]
        names = [n for n in DerivativeBundle.__dataclass_fields__ if n != "lam"]
        tables = [[getattr(b, n) for n in names] for b in levels]
        for order in range(1, richardson + 1):
            w = 4 ** order
            tables = [[(w * a - c) / (w - 1) for a, c in zip(tables[k], tables[k + 1])]
                      for k in range(len(tables) - 1)]
        out = dict(zip(names, tables[0]))
        return DerivativeBundle(lam=levels[0].lam, **out)

    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    dt, dv, dg = len(theta), len(v), len(gamma)
    z0 = np.concatenate([theta, v, gamma])
    steps = step * (1 + np.abs(z0)) if relative else np.full(len(z0), step)

    def split(z):
        return z[:dt], z[dt:dt + dv], z[dt + dv:]

    _, gl, hl = _second_differences(lambda z: objective(*split(z)), z0, steps)
    _, jf, hf = _second_differences(lambda z: constraint(*split(z)), z0, steps)
    it, iv, ig = slice(0, dt), slice(dt, dt + dv), slice(dt + dv, dt + dv + dg)
    f_t, f_v, f_g = jf[:, it], jf[:, iv], jf[:, ig]
    return DerivativeBundle(
        L_tt=hl[it, it], L_tv=hl[it, iv], L_vv=hl[iv, iv], L_tg=hl[it, ig], L_vg=hl[iv, ig],
        F_t=f_t, F_v=f_v, F_g=f_g,
        vecF_t_by_t=hf[:, it, it].reshape(dv * dt, dt),
        vecF_t_by_v=hf[:, it, iv].reshape(dv * dt, dv),
        vecF_t_by_g=hf[:, it, ig].reshape(dv * dt, dg),
        vecF_v_by_t=hf[:, iv, it].reshape(dv * dv, dt),
        vecF_v_by_v=hf[:, iv, iv].reshape(dv * dv, dv),
        vecF_v_by_g=hf[:, iv, ig].reshape(dv * dv, dg),
        lam=lam,
    )


@dataclass
class SensitivityReport:
    """Jacobians of ``(theta, V, lam)`` with respect to ``gamma'``."""

    dtheta_dgamma: np.ndarray
    dv_dgamma: np.ndarray
    dlambda_dgamma: np.ndarray
    condition_number: float
    residual: float
    theta: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    gamma_names: Sequence[str] = field(default_factory=lambda: ("beta",))

    def elasticity(self) -> np.ma.MaskedArray:
        return elasticity(self, self.theta, self.gamma)

    def semi_elasticity(self) -> np.ma.MaskedArray:
        return semi_elasticity(self, self.gamma)

    def to_dict(self) -> dict:
        out = {
            "dtheta_dgamma": self.dtheta_dgamma.tolist(),
            "dv_dgamma": self.dv_dgamma.tolist(),
            "dlambda_dgamma": self.dlambda_dgamma.tolist(),
            "condition_number": self.condition_number,
            "residual": self.residual,
            "gamma_names": list(self.gamma_names),
        }
        if self.theta is not None and self.gamma is not None:
            out["theta"] = np.asarray(self.theta).tolist()
            out["gamma"] = np.asarray(self.gamma).tolist()
            out["elasticity"] = masked_to_list(self.elasticity())
            out["semi_elasticity"] = masked_to_list(self.semi_elasticity())
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityReport":
        return cls(
            dtheta_dgamma=np.asarray(d["dtheta_dgamma"], dtype=float),
            dv_dgamma=np.asarray(d["dv_dgamma"], dtype=float),
            dlambda_dgamma=np.asarray(d["dlambda_dgamma"], dtype=float),
            condition_number=float(d["condition_number"]),
            residual=float(d["residual"]),
            theta=None if "theta" not in d else np.asarray(d["theta"], dtype=float),
            gamma=None if "gamma" not in d else np.asarray(d["gamma"], dtype=float),
            gamma_names=tuple(d.get("gamma_names", ("beta",))),
        )

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read_json(cls, path) -> "SensitivityReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def masked_to_list(m: np.ma.MaskedArray):
    """Nested lists with ``None`` where an entry is flagged undefined."""
    m = np.ma.masked_array(m)
    out = np.asarray(m.data, dtype=float).astype(object)
    out[np.ma.getmaskarray(m)] = None
    return out.tolist()


def equilibrate(m, sweeps: int = 8):
    """Power-of-two row and column scalings ``(r, c)`` that bring every row
    and column of ``diag(r) m diag(c)`` to unit max-norm (Ruiz iteration).

    Powers of two keep the scaling exact in floating point.
    """
    m = np.abs(np.asarray(m, dtype=float))
    r, c = np.ones(m.shape[0]), np.ones(m.shape[1])
    for _ in range(sweeps):
        s = r[:, None] * m * c[None, :]
        rmax, cmax = s.max(axis=1), s.max(axis=0)
        r = r / np.exp2(np.round(0.5 * np.log2(np.where(rmax > 0, rmax, 1.0))))
        c = c / np.exp2(np.round(0.5 * np.log2(np.where(cmax > 0, cmax, 1.0))))
    return r, c


def solve_sensitivity_system(bundle: DerivativeBundle, theta=None, gamma=None) -> SensitivityReport:
    """Solve the square system for ``dtheta/dgamma'``, ``dV/dgamma'``, ``dlam/dgamma'``.

    The system is equilibrated first; the reported condition number is that
    of the equilibrated matrix, since parameters and values are on very
    different scales (e.g. ``V`` grows like ``1 / (1 - beta)``).

    Raises:
        IllPosedError: the system matrix is singular or its condition
            number exceeds ``COND_LIMIT``.
    """
    dt, dv, _ = bundle.dims
    m, rhs = bundle.system()
    if not np.all(np.isfinite(m)) or not np.all(np.isfinite(rhs)):
        raise IllPosedError("sensitivity system has non-finite entries", condition_number=np.inf)
    r, c = equilibrate(m)
    scaled = r[:, None] * m * c[None, :]
    cond = float(np.linalg.cond(scaled))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllPosedError(f"sensitivity system is ill-posed (condition number {cond:.3e})",
                            condition_number=cond)
    sol = c[:, None] * lu_solve(lu_factor(scaled), r[:, None] * rhs)
    resid = float(np.max(np.abs(m @ sol - rhs)))
    return SensitivityReport(
        dtheta_dgamma=sol[:dt], dv_dgamma=sol[dt:dt + dv], dlambda_dgamma=sol[dt + dv:],
        condition_number=cond, residual=resid,
        theta=None if theta is None else np.atleast_1d(np.asarray(theta, dtype=float)),
        gamma=None if gamma is None else np.atleast_1d(np.asarray(gamma, dtype=float)),
    )


def unconstrained_sensitivity(hessian, cross) -> np.ndarray:
    """Solve ``H dtheta/dgamma' = -C`` for an unconstrained optimum."""
    hessian = np.atleast_2d(np.asarray(hessian, dtype=float))
    cross = np.asarray(cross, dtype=float)
    if cross.ndim == 1:
        cross = cross.reshape(hessian.shape[0], -1)
    try:
        return np.linalg.solve(hessian, -cross)
    except np.linalg.LinAlgError as exc:
        raise IllPosedError("Hessian of the concentrated objective is singular") from exc


def substituted_hessians(bundle: DerivativeBundle):
    """Concentrated-objective Hessian blocks built from constrained-problem pieces.

    Valid when the constraint does not depend on ``V`` (``V = F(theta; gamma)``),
    so that ``lam = -dL/dV``:

        H = A_tt + L_tv F_t + F_t' L_vt + F_t' L_vv F_t
        C = A_tg + L_tv F_g + F_t' L_vg + F_t' L_vv F_g
    """
    if np.any(bundle.F_v != 0):
        raise ContractError("substituted form requires a constraint free of V")
    a = bundle.a_blocks()
    ft, fg = bundle.F_t, bundle.F_g
    h = a["tt"] + bundle.L_tv @ ft + ft.T @ bundle.L_tv.T + ft.T @ bundle.L_vv @ ft
    c = a["tg"] + bundle.L_tv @ fg + ft.T @ bundle.L_vg + ft.T @ bundle.L_vv @ fg
    return h, c


def gmm_hessians(g, jac_theta, jac_gamma, W, dvec_jt_dtheta, dvec_jt_dgamma):
    """Hessian blocks for ``min g(theta; gamma)' W g(theta; gamma)`` (up to a factor 2).

    Args:
        g: moments ``(m,)`` at the optimum.
        jac_theta: ``dg/dtheta'`` ``(m, dt)``.
        jac_gamma: ``dg/dgamma'`` ``(m, dg)``.
        W: symmetric weighting matrix ``(m, m)``.
        dvec_jt_dtheta: Jacobian of ``vec[(dg/dtheta')']`` wrt ``theta'``, ``(m*dt, dt)``.
        dvec_jt_dgamma: same wrt ``gamma'``, ``(m*dt, dg)``.
    """
    g = np.asarray(g, dtype=float)
    jt = np.atleast_2d(np.asarray(jac_theta, dtype=float))
    jg = np.asarray(jac_gamma, dtype=float).reshape(len(g), -1)
    W = np.asarray(W, dtype=float)
    r = np.kron((g @ W)[None, :], np.eye(jt.shape[1]))
    h = jt.T @ W @ jt + r @ np.asarray(dvec_jt_dtheta, dtype=float)
    c = jt.T @ W @ jg + r @ np.asarray(dvec_jt_dgamma, dtype=float)
    return h, c


def elasticity(report, theta_hat, gamma) -> np.ma.MaskedArray:
    """Entrywise ``(dtheta_i/dgamma_j) * gamma_j / theta_i``; flagged where undefined."""
    jac = _jacobian(report)
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=float)).reshape(-1, 1)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float)).reshape(1, -1)
    undefined = (np.abs(theta) <= ZERO_DENOM) | (np.abs(gamma) <= ZERO_DENOM)
    safe_theta = np.where(np.abs(theta) <= ZERO_DENOM, 1.0, theta)
    return np.ma.masked_array(jac * gamma / safe_theta, mask=np.broadcast_to(undefined, jac.shape))


def semi_elasticity(report, gamma) -> np.ma.MaskedArray:
    """Entrywise ``(dtheta_i/dgamma_j) * gamma_j``; flagged where ``gamma_j = 0``."""
    jac = _jacobian(report)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float)).reshape(1, -1)
    undefined = np.broadcast_to(np.abs(gamma) <= ZERO_DENOM, jac.shape)
    return np.ma.masked_array(jac * gamma, mask=undefined)


def _jacobian(report) -> np.ndarray:
    if isinstance(report, SensitivityReport):
        jac = report.dtheta_dgamma
    else:
        jac = report
    jac = np.asarray(jac, dtype=float)
    return jac.reshape(-1, 1) if jac.ndim < 2 else jac


@dataclass
class CounterfactualSensitivity:
    dtheta_dgamma: np.ndarray
    dv_dgamma: np.ndarray


def counterfactual_sensitivity(report: SensitivityReport, spec, cf_model: dp.DdcModel,
                               theta_cf, v_cf, f_gamma=None) -> CounterfactualSensitivity:
    """Propagate baseline sensitivities through ``theta~ = H(theta)`` and the
    counterfactual fixed point ``V~ = F~(theta~, V~; gamma)``.

    ``f_gamma`` is ``dF~/dgamma'``; by default ``gamma`` is the discount factor.
    """
    dtheta_cf = spec.jacobian @ report.dtheta_dgamma
    f_t, f_v, f_b = dp.bellman_jacobians(cf_model, theta_cf, v_cf)
    f_g = f_b[:, None] if f_gamma is None else np.asarray(f_gamma, dtype=float).reshape(len(v_cf), -1)
    if f_g.shape[1] != dtheta_cf.shape[1]:
        raise ContractError("dF~/dgamma' column count must match d_gamma")
    lhs = f_v - np.eye(len(v_cf))
    try:
        dv_cf = np.linalg.solve(lhs, -f_g - f_t @ dtheta_cf)
    except np.linalg.LinAlgError as exc:
        raise IllPosedError("dF~/dV' - I is singular") from exc
    return CounterfactualSensitivity(dtheta_dgamma=dtheta_cf, dv_dgamma=dv_cf)


def taylor_approximate(theta_at_gamma, report, delta_gamma) -> np.ndarray:
    """First-order approximation ``theta(gamma) + J delta_gamma``."""
    jac = _jacobian(report)
    delta = np.atleast_1d(np.asarray(delta_gamma, dtype=float))
    out = np.atleast_1d(np.asarray(theta_at_gamma, dtype=float)) + jac @ delta
    return out


def approximation_error_table(estimate: float, derivative: float, deltas: Sequence[float],
                              truths: Sequence[float]) -> np.ndarray:
    """Percent errors of ``estimate - derivative * delta`` against re-estimated
    values at ``gamma - delta``."""
    deltas = np.asarray(deltas, dtype=float)
    truths = np.asarray(truths, dtype=float)
    approx = estimate - derivative * deltas
    return 100.0 * (approx - truths) / truths


TABLE1_COLUMNS = ("target", "beta", "estimate", "elasticity", "err_1e-4", "err_1e-3", "err_1e-2")


def write_table1_csv(rows: Sequence[dict], path) -> None:
    """Write local-sensitivity rows; missing values become empty cells."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE1_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row.get(k), float)
                                 else row[k]) for k in TABLE1_COLUMNS})


def read_table1_csv(path) -> list:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {"target": row["target"]}
            for k in TABLE1_COLUMNS[1:]:
                parsed[k] = None if row[k] == "" else float(row[k])
            out.append(parsed)
    return out
