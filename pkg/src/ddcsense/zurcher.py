"""Bus-engine replacement model.

Action 0 keeps the engine, action 1 replaces it (the reference action). Flow
utilities are ``pi(0, x) = RC - MC * x`` and ``pi(1, x) = 0`` with
``theta = (MC, RC)``. Replacement resets mileage to state 1; otherwise mileage
moves up by 0, 1 or 2 states with probabilities ``1 - phi1 - phi2, phi1, phi2``
(two outcomes at state X-1, absorbing at state X).

``p(x)`` below always means the replacement probability ``P[a = 1 | x]``.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dp
from .errors import ContractError, DomainError

CONFIG_KEYS = ("num_states", "phi1", "phi2", "mc", "rc", "beta")


@dataclass(frozen=True)
class ZurcherConfig:
    num_states: int = 20
    phi1: float = 0.35
    phi2: float = 0.10
    mc: float = 0.05
    rc: float = 8.0
    beta: float = 0.95

    def __post_init__(self):
        if self.num_states < 3:
            raise ContractError("need at least 3 mileage states")
        if self.phi1 < 0 or self.phi2 < 0 or self.phi1 + self.phi2 > 1:
            raise ContractError("phi1, phi2 must be nonnegative with phi1 + phi2 <= 1")
        if not 0 <= self.beta < 1:
            raise DomainError(f"discount factor must lie in [0, 1), got {self.beta}")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.mc, self.rc])

    def with_theta(self, theta) -> "ZurcherConfig":
        return replace(self, mc=float(theta[0]), rc=float(theta[1]))

    def with_beta(self, beta) -> "ZurcherConfig":
        return replace(self, beta=float(beta))

    def model(self) -> dp.DdcModel:
        return make_model(self)

    def write(self, path) -> None:
        """Write as flat ``key = value`` lines (``repr`` keeps full precision)."""
        lines = [f"{k} = {getattr(self, k)!r}" for k in CONFIG_KEYS]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "ZurcherConfig":
        text = Path(path).read_text()
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not text.lstrip().startswith("["):
            text = "[model]\n" + text
        parser.read_string(text)
        section = parser["model"] if parser.has_section("model") else parser[parser.sections()[0]]
        return cls.from_mapping(section)

    @classmethod
    def from_mapping(cls, mapping) -> "ZurcherConfig":
        kwargs = {}
        for k in CONFIG_KEYS:
            if k in mapping:
                kwargs[k] = int(mapping[k]) if k == "num_states" else float(mapping[k])
        return cls(**kwargs)


def build_transitions(config: ZurcherConfig):
    """Return ``(Q_0, Q_1)`` for keep and replace."""
    n = config.num_states
    f1, f2 = config.phi1, config.phi2
    q0 = np.zeros((n, n))
    for x in range(n - 2):
        q0[x, x] = 1 - f1 - f2
        q0[x, x + 1] = f1
        q0[x, x + 2] = f2
    q0[n - 2, n - 2] = 1 - f1
    q0[n - 2, n - 1] = f1
    q0[n - 1, n - 1] = 1.0
    q1 = np.zeros((n, n))
    q1[:, 0] = 1.0
    return q0, q1


def mileage(num_states: int) -> np.ndarray:
    return np.arange(1, num_states + 1, dtype=float)


def utility_design(num_states: int) -> np.ndarray:
    """``Pi_0``: rows ``(-x, 1)`` so that ``pi_0 = Pi_0 @ (MC, RC)``."""
    x = mileage(num_states)
    return np.column_stack([-x, np.ones_like(x)])


def flow_utility(config: ZurcherConfig, theta, a: int, x: int) -> float:
    mc, rc = theta
    if not 1 <= x <= config.num_states:
        raise DomainError(f"state {x} outside 1..{config.num_states}")
    return float(rc - mc * x) if a == 0 else 0.0


def make_model(config: ZurcherConfig, transitions=None) -> dp.DdcModel:
    q0, q1 = build_transitions(config) if transitions is None else transitions
    design = utility_design(config.num_states)
    grad = np.zeros((config.num_states, 2, 2))
    grad[:, 0, :] = design

    def utility(theta):
        return np.column_stack([design @ theta, np.zeros(config.num_states)])

    def utility_grad(theta):
        return grad

    return dp.DdcModel(np.stack([q0, q1]), utility, utility_grad, config.beta)


@dataclass
class DerivativeBank:
    """First and second derivatives of the log-likelihood ``L`` and the
    Bellman map ``F`` with respect to ``theta`` (2), ``V`` (X) and ``beta``.

    Naming: ``L_tv[i, y] = d2L / dtheta_i dV_y``; ``F_tv[x, i, y] =
    d2F(x) / dtheta_i dV_y``; ``F_vv[x, y, z] = d2F(x) / dV_y dV_z``; etc.
    """

    p: np.ndarray
    L: float
    L_t: np.ndarray
    L_v: np.ndarray
    L_b: float
    L_tt: np.ndarray
    L_tv: np.ndarray
    L_tb: np.ndarray
    L_vv: np.ndarray
    L_vb: np.ndarray
    F: np.ndarray
    F_t: np.ndarray
    F_v: np.ndarray
    F_b: np.ndarray
    F_tt: np.ndarray
    F_tv: np.ndarray
    F_tb: np.ndarray
    F_vv: np.ndarray
    F_vb: np.ndarray


def analytic_derivative_bank(config: ZurcherConfig, theta, v, data: Optional[dp.PanelDataset] = None,
                             counts=None, beta: Optional[float] = None,
                             transitions=None) -> DerivativeBank:
    """Closed-form derivatives of ``L(theta, V; beta)`` and ``F(theta, V; beta)``.

    ``p`` is computed from ``(theta, V, beta)`` directly, so the bank is valid
    at any evaluation point, not only at a fixed point. Pass either ``data``
    or a precomputed ``(X, 2)`` ``counts`` table.
    """
    n_x = config.num_states
    beta = config.beta if beta is None else float(beta)
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    if theta.shape != (2,) or v.shape != (n_x,):
        raise ContractError(f"expected theta (2,) and V ({n_x},), got {theta.shape}, {v.shape}")
    if counts is None:
        if data is None:
            raise ContractError("need data or counts")
        counts = data.counts(n_x, 2)
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (n_x, 2):
        raise ContractError(f"counts must have shape ({n_x}, 2)")
    q0, q1 = build_transitions(config) if transitions is None else transitions
    g = utility_design(n_x)
    d = q0 - q1
    q0v, q1v = q0 @ v, q1 @ v
    dv = q0v - q1v
    u0 = g @ theta + beta * q0v
    u1 = beta * q1v
    f = np.logaddexp(u0, u1)
    p = np.exp(u1 - f)
    s = p * (1 - p)
    n_tot = counts.sum(axis=1)
    n1 = counts[:, 1]
    resid = n_tot * p - n1
    ns = n_tot * s

    with np.errstate(divide="ignore"):
        ll = np.where(counts[:, 1] > 0, n1 * np.log(p), 0.0).sum() + \
            np.where(counts[:, 0] > 0, counts[:, 0] * np.log1p(-p), 0.0).sum()

    L_t = g.T @ resid
    L_v = beta * d.T @ resid
    L_b = float(resid @ dv)
    L_tt = -(g * ns[:, None]).T @ g
    L_tv = -beta * (g * ns[:, None]).T @ d
    L_tb = -g.T @ (ns * dv)
    L_vv = -beta ** 2 * (d * ns[:, None]).T @ d
    L_vb = -d.T @ (-resid + beta * ns * dv)

    F_t = (1 - p)[:, None] * g
    F_v = beta * ((1 - p)[:, None] * q0 + p[:, None] * q1)
    F_b = (1 - p) * q0v + p * q1v
    F_tt = s[:, None, None] * g[:, :, None] * g[:, None, :]
    F_tv = beta * s[:, None, None] * g[:, :, None] * d[:, None, :]
    F_tb = (s * dv)[:, None] * g
    F_vv = beta ** 2 * s[:, None, None] * d[:, :, None] * d[:, None, :]
    F_vb = (1 - p)[:, None] * q0 + p[:, None] * q1 + beta * (s * dv)[:, None] * d

    return DerivativeBank(p=p, L=float(ll), L_t=L_t, L_v=L_v, L_b=L_b, L_tt=L_tt, L_tv=L_tv,
                          L_tb=L_tb, L_vv=L_vv, L_vb=L_vb, F=f, F_t=F_t, F_v=F_v, F_b=F_b,
                          F_tt=F_tt, F_tv=F_tv, F_tb=F_tb, F_vv=F_vv, F_vb=F_vb)


def simulate_panel(config: ZurcherConfig, num_units: int, num_periods: int, seed: int,
                   initial_state: int = 1) -> dp.PanelDataset:
    """Forward-simulate a panel from the solved model.

    Actions are drawn directly from the model CCPs. All units start at
    ``initial_state``.
    """
    model = make_model(config)
    v = dp.solve_value_function(model, config.theta)
    p1 = dp.ccp_from_values(model, config.theta, v)[:, 1]
    cum0 = np.cumsum(model.transitions[0], axis=1)
    rng = np.random.default_rng(seed)
    state = np.full(num_units, initial_state - 1)
    states = np.empty((num_units, num_periods), dtype=np.int64)
    actions = np.empty((num_units, num_periods), dtype=np.int64)
    for t in range(num_periods):
        a = (rng.random(num_units) < p1[state]).astype(np.int64)
        u = rng.random(num_units)
        states[:, t] = state + 1
        actions[:, t] = a
        keep_next = np.minimum((cum0[state] <= u[:, None]).sum(axis=1), config.num_states - 1)
        state = np.where(a == 1, 0, keep_next)
    unit = np.repeat(np.arange(num_units), num_periods)
    period = np.tile(np.arange(1, num_periods + 1), num_units)
    return dp.PanelDataset(unit, period, states.ravel(), actions.ravel())


def estimate_transition_probs(data: dp.PanelDataset, num_states: int):
    """Frequency estimates of ``(phi1, phi2)`` from consecutive keep decisions.

    Uses transitions out of states ``x <= X-2`` where all three increments are
    feasible.
    """
    order = np.lexsort((data.period, data.unit))
    u, t = data.unit[order], data.period[order]
    x, a = data.state[order], data.action[order]
    ok = (u[1:] == u[:-1]) & (t[1:] == t[:-1] + 1) & (a[:-1] == 0) & (x[:-1] <= num_states - 2)
    step = (x[1:] - x[:-1])[ok]
    if len(step) == 0:
        raise DomainError("no usable keep transitions in data")
    if np.any((step < 0) | (step > 2)):
        raise DomainError("mileage increments outside {0, 1, 2} under keep")
    return float(np.mean(step == 1)), float(np.mean(step == 2))


@dataclass
class CounterfactualSpec:
    """Affine parameter map ``H(theta) = jacobian @ theta + offset`` plus
    optional replacement transition matrices ``(Q~_0, Q~_1)``."""

    jacobian: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    transitions: Optional[tuple] = None

    def __post_init__(self):
        self.jacobian = np.atleast_2d(np.asarray(self.jacobian, dtype=float))
        self.offset = np.asarray(self.offset, dtype=float)
        if self.jacobian.shape[0] != self.offset.shape[0]:
            raise ContractError("jacobian rows must match offset length")

    def apply(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.jacobian.shape[1] != theta.shape[0]:
            raise ContractError(f"jacobian expects d_theta={self.jacobian.shape[1]}")
        return self.jacobian @ theta + self.offset

    def model(self, base: dp.DdcModel) -> dp.DdcModel:
        if self.transitions is None:
            return base
        return base.with_transitions(np.stack(self.transitions))

    @classmethod
    def identity(cls, d_theta: int = 2) -> "CounterfactualSpec":
        return cls(np.eye(d_theta), np.zeros(d_theta))

    @classmethod
    def scale_maintenance(cls, factor: float = 0.9) -> "CounterfactualSpec":
        return cls(np.diag([factor, 1.0]), np.zeros(2))

    def to_dict(self) -> dict:
        out = {"jacobian": self.jacobian.tolist(), "offset": self.offset.tolist()}
        if self.transitions is not None:
            out["transitions"] = [np.asarray(q).tolist() for q in self.transitions]
        return out


def counterfactual_welfare(model: dp.DdcModel, theta, spec: CounterfactualSpec,
                           v0=None) -> float:
    """Average change in ex ante value, ``mean(V~ - V)``."""
    v = dp.solve_value_function(model, theta, v0=v0)
    v_cf = dp.solve_value_function(spec.model(model), spec.apply(theta), v0=v)
    return float(np.mean(v_cf - v))


def config_dict(config: ZurcherConfig) -> dict:
    return asdict(config)


def dumps_config(config: ZurcherConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)
