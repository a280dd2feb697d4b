"""Bus-engine analysis pipeline: fit, local targets, Taylor errors, beta profiles
and tidy figure data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dp
from .estimate import (EstimationSolution, LinearUtilitySpec, ccp_logit_estimate, nfxp_estimate,
                       two_step_estimate)
from .globalsens import counterfactual_ccp_derivative_decomposition
from .local import (approximation_error_table, assemble_bundle_analytic, counterfactual_sensitivity,
                    solve_sensitivity_system)
from .zurcher import CounterfactualSpec, ZurcherConfig, utility_design

TARGETS = ("RC", "MC", "cf_ccp_max_state", "welfare_change")
DEFAULT_DELTAS = (1e-4, 1e-3, 1e-2)
FIGURE_COLUMNS = ("beta", "series", "value")


def target_values(config: ZurcherConfig, solution: EstimationSolution,
                  spec: Optional[CounterfactualSpec] = None) -> dict:
    """RC, MC, replacement CCP at the top state under the counterfactual and
    the average welfare change, at a fitted solution."""
    spec = CounterfactualSpec.scale_maintenance() if spec is None else spec
    model = config.model().with_beta(solution.beta)
    cf_model = spec.model(model)
    theta_cf = spec.apply(solution.theta_hat)
    v_cf = dp.solve_value_function(cf_model, theta_cf, v0=solution.v_hat)
    p_cf = dp.ccp_from_values(cf_model, theta_cf, v_cf)[:, 1]
    return {"RC": float(solution.theta_hat[1]), "MC": float(solution.theta_hat[0]),
            "cf_ccp_max_state": float(p_cf[-1]),
            "welfare_change": float(np.mean(v_cf - solution.v_hat))}


@dataclass
class LocalAnalysis:
    """Values and beta-derivatives of the four targets at one fit."""

    beta: float
    values: dict
    derivatives: dict
    report: object
    cf_ccp_derivative: np.ndarray

    def elasticity(self, name: str) -> Optional[float]:
        value = self.values[name]
        if abs(value) <= 1e-300:
            return None
        return self.derivatives[name] * self.beta / value


def local_analysis(config: ZurcherConfig, data: dp.PanelDataset, solution: EstimationSolution,
                   spec: Optional[CounterfactualSpec] = None) -> LocalAnalysis:
    spec = CounterfactualSpec.scale_maintenance() if spec is None else spec
    beta = solution.beta
    counts = data.counts(config.num_states, 2)
    bundle = assemble_bundle_analytic(config.with_beta(beta), solution, counts=counts)
    report = solve_sensitivity_system(bundle, theta=solution.theta_hat, gamma=[beta])
    model = config.model().with_beta(beta)
    cf_model = spec.model(model)
    theta_cf = spec.apply(solution.theta_hat)
    v_cf = dp.solve_value_function(cf_model, theta_cf, v0=solution.v_hat)
    cfs = counterfactual_sensitivity(report, spec, cf_model, theta_cf, v_cf)
    decomp = counterfactual_ccp_derivative_decomposition(cf_model, theta_cf, v_cf,
                                                         cfs.dtheta_dgamma[:, 0], cfs.dv_dgamma[:, 0])
    dtheta = report.dtheta_dgamma[:, 0]
    derivs = {"RC": float(dtheta[1]), "MC": float(dtheta[0]),
              "cf_ccp_max_state": float(decomp.derivative[-1]),
              "welfare_change": float(np.mean(cfs.dv_dgamma[:, 0] - report.dv_dgamma[:, 0]))}
    return LocalAnalysis(beta, target_values(config, solution, spec), derivs, report,
                         decomp.derivative)


class BetaProfile:
    """NFXP fits over beta, cached and warm-started from the nearest solved beta."""

    def __init__(self, config: ZurcherConfig, data: dp.PanelDataset, init_theta=None,
                 spec: Optional[CounterfactualSpec] = None):
        self.config = config
        self.data = data
        self.init_theta = init_theta
        self.spec = CounterfactualSpec.scale_maintenance() if spec is None else spec
        self.model = config.model()
        self._fits: dict = {}

    def add(self, solution: EstimationSolution) -> None:
        """Register an existing fit (e.g. one read from JSON)."""
        self._fits[solution.beta] = solution

    def solution(self, beta: float) -> EstimationSolution:
        beta = float(beta)
        if beta not in self._fits:
            init, v0 = self.init_theta, None
            if self._fits:
                near = min(self._fits, key=lambda b: abs(b - beta))
                init, v0 = self._fits[near].theta_hat, self._fits[near].v_hat
            try:
                self._fits[beta] = nfxp_estimate(self.model, self.data, gamma=beta,
                                                 init_theta=init, v0=v0)
            except Exception as exc:
                raise type(exc)(f"estimation failed at beta={beta!r}: {exc}") from exc
        return self._fits[beta]

    def targets(self, beta: float) -> dict:
        return target_values(self.config, self.solution(beta), self.spec)

    def target(self, name: str):
        """Scalar function ``beta -> target`` for bounds and breakdown search."""
        if name not in TARGETS:
            raise KeyError(f"unknown target {name!r}; choose from {TARGETS}")
        return lambda beta: self.targets(beta)[name]


def table1_rows(profile: BetaProfile, beta: float,
                deltas: Sequence[float] = DEFAULT_DELTAS) -> tuple:
    """Table-1 rows: estimate, elasticity and percent Taylor errors against
    re-estimation at ``beta - delta``."""
    sol = profile.solution(beta)
    local = local_analysis(profile.config, profile.data, sol, profile.spec)
    truths = [profile.targets(beta - d) for d in deltas]
    rows = []
    for name in TARGETS:
        errs = approximation_error_table(local.values[name], local.derivatives[name], deltas,
                                         [t[name] for t in truths])
        row = {"target": name, "beta": float(beta), "estimate": local.values[name],
               "elasticity": local.elasticity(name)}
        for d, e in zip(deltas, errs):
            row[f"err_{d:.0e}".replace("e-0", "e-")] = float(e)
        rows.append(row)
    return rows, local


def first_stage_ccp(config: ZurcherConfig, data: dp.PanelDataset, degree: int = 2) -> np.ndarray:
    return ccp_logit_estimate(data, config.num_states, 2, degree)


def two_step_path(config: ZurcherConfig, p, betas: Sequence[float]) -> np.ndarray:
    """Two-step ``(MC, RC)`` for each beta, from first-stage CCPs ``p``."""
    model = config.model()
    spec = LinearUtilitySpec(utility_design(config.num_states))
    return np.array([two_step_estimate(p, model, spec, beta=b) for b in betas])


def figure_rows(profile: BetaProfile, betas: Sequence[float], p_first_stage=None,
                states: Optional[Sequence[int]] = None) -> list:
    """Tidy ``(beta, series, value)`` rows for the three beta-profile figures.

    Series: ``nfxp_MC``, ``nfxp_RC``, ``two_step_MC``, ``two_step_RC``,
    ``first_stage_p_replace_x{x}`` (beta column empty: it does not depend on
    beta) and ``cf_ccp_x{x}`` for the requested 1-based states.
    """
    config = profile.config
    X = config.num_states
    states = (1, (X + 1) // 2, X) if states is None else states
    rows = []
    for b in betas:
        sol = profile.solution(b)
        rows.append((float(b), "nfxp_MC", float(sol.theta_hat[0])))
        rows.append((float(b), "nfxp_RC", float(sol.theta_hat[1])))
        model = config.model().with_beta(b)
        cf_model = profile.spec.model(model)
        theta_cf = profile.spec.apply(sol.theta_hat)
        v_cf = dp.solve_value_function(cf_model, theta_cf, v0=sol.v_hat)
        p_cf = dp.ccp_from_values(cf_model, theta_cf, v_cf)[:, 1]
        rows.extend((float(b), f"cf_ccp_x{x}", float(p_cf[x - 1])) for x in states)
    if p_first_stage is not None:
        path = two_step_path(config, p_first_stage, betas)
        for b, th in zip(betas, path):
            rows.append((float(b), "two_step_MC", float(th[0])))
            rows.append((float(b), "two_step_RC", float(th[1])))
        rows.extend((None, f"first_stage_p_replace_x{x + 1}", float(p_first_stage[x, 1]))
                    for x in range(X))
    return rows


def write_figure_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIGURE_COLUMNS)
        for b, series, value in rows:
            writer.writerow(["" if b is None else repr(b), series, repr(value)])


def read_figure_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return [(None if r["beta"] == "" else float(r["beta"]), r["series"], float(r["value"]))
                for r in csv.DictReader(fh)]
