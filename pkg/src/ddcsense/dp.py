"""Model-agnostic machinery for stationary dynamic discrete choice models.

States are indexed ``0..X-1`` internally and ``1..X`` in files and messages.
Actions are ``0..A``; the last action ``A`` is the reference action used by
the Hotz-Miller inversion and the CCP-to-utility representation.

Shock distribution is type-1 extreme value throughout, so the ex ante value
function solves

    V(x) = log sum_a exp[pi(a, x; theta) + beta * Q_a(x)' V]

and conditional choice probabilities are the softmax of the choice-specific
values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import logsumexp

from .errors import ContractError, ConvergenceError, DomainError

STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DdcModel:
    """A finite-state, stationary DDC model.

    Attributes:
        transitions: array ``(A+1, X, X)``; ``transitions[a]`` is the
            row-stochastic matrix ``Q_a``.
        utility: ``theta -> (X, A+1)`` array of flow utilities ``pi(a, x)``.
        utility_grad: ``theta -> (X, A+1, d_theta)`` array of ``d pi / d theta``.
        beta: discount factor in ``[0, 1)``.
        psi: optional map ``p -> (X, A+1)`` array ``psi_a(p)``; ``None`` means
            the logit case ``psi_a(p) = -log p_a``.
    """

    transitions: np.ndarray
    utility: Callable[[np.ndarray], np.ndarray]
    utility_grad: Callable[[np.ndarray], np.ndarray]
    beta: float
    psi: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None)

    def __post_init__(self):
        q = np.asarray(self.transitions, dtype=float)
        if q.ndim != 3 or q.shape[1] != q.shape[2]:
            raise ContractError(f"transitions must have shape (A+1, X, X), got {q.shape}")
        if np.any(q < 0):
            raise ContractError("transition matrices must be nonnegative")
        rowsum = q.sum(axis=2)
        if np.max(np.abs(rowsum - 1.0)) > STOCHASTIC_TOL:
            raise ContractError("transition rows must sum to one")
        if not 0.0 <= self.beta < 1.0:
            raise DomainError(f"discount factor must lie in [0, 1), got {self.beta}")
        object.__setattr__(self, "transitions", q)

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[0]

    def flow_utility(self, theta, a: int, x: int) -> float:
        """Flow utility of action ``a`` at (1-based) state ``x``."""
        return float(self.utility(np.asarray(theta, dtype=float))[x - 1, a])

    def with_beta(self, beta: float) -> "DdcModel":
        return replace(self, beta=float(beta))

    def with_transitions(self, transitions) -> "DdcModel":
        return replace(self, transitions=np.asarray(transitions, dtype=float))


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Observed panel of (unit, period, state, action) records.

    ``state`` is 1-based, ``action`` is 0-based, matching the CSV format.
    """

    unit: np.ndarray
    period: np.ndarray
    state: np.ndarray
    action: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.unit, self.period, self.state, self.action)]
        n = len(arrays[0])
        if any(len(a) != n for a in arrays):
            raise ContractError("panel columns must have equal length")
        for name, arr in zip(("unit", "period", "state", "action"), arrays):
            object.__setattr__(self, name, arr.astype(np.int64))
        if n and (self.state.min() < 1 or self.action.min() < 0):
            raise DomainError("states are 1-based and actions 0-based")
        order = np.lexsort((self.period, self.unit))
        u, t = self.unit[order], self.period[order]
        same = u[1:] == u[:-1]
        if np.any(t[1:][same] <= t[:-1][same]):
            raise DomainError("periods must be strictly increasing within each unit")

    @classmethod
    def from_records(cls, records: Iterable[tuple]) -> "PanelDataset":
        rows = list(records)
        if not rows:
            empty = np.zeros(0, dtype=np.int64)
            return cls(empty, empty, empty, empty)
        cols = np.array(rows, dtype=np.int64).T
        return cls(*cols)

    def __len__(self) -> int:
        return len(self.state)

    def records(self):
        return list(zip(self.unit.tolist(), self.period.tolist(),
                        self.state.tolist(), self.action.tolist()))

    def check_ranges(self, num_states: int, num_actions: int) -> None:
        if len(self) == 0:
            return
        if self.state.max() > num_states:
            raise DomainError(f"state {self.state.max()} exceeds num_states={num_states}")
        if self.action.max() >= num_actions:
            raise DomainError(f"action {self.action.max()} exceeds num_actions-1={num_actions - 1}")

    def counts(self, num_states: int, num_actions: int) -> np.ndarray:
        """``(X, A+1)`` table of observation counts per (state, action)."""
        self.check_ranges(num_states, num_actions)
        out = np.zeros((num_states, num_actions))
        np.add.at(out, (self.state - 1, self.action), 1.0)
        return out

    def concat(self, other: "PanelDataset") -> "PanelDataset":
        offset = (self.unit.max() + 1) if len(self) else 0
        return PanelDataset(
            np.concatenate([self.unit, other.unit + offset]),
            np.concatenate([self.period, other.period]),
            np.concatenate([self.state, other.state]),
            np.concatenate([self.action, other.action]),
        )

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["unit", "period", "state", "action"])
            writer.writerows(self.records())

    @classmethod
    def read_csv(cls, path) -> "PanelDataset":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"unit", "period", "state", "action"} - set(reader.fieldnames or [])
            if missing:
                raise ContractError(f"{path}: missing columns {sorted(missing)}")
            rows = [(int(r["unit"]), int(r["period"]), int(r["state"]), int(r["action"]))
                    for r in reader]
        return cls.from_records(rows)


def _utilities(model: DdcModel, theta) -> np.ndarray:
    u = np.asarray(model.utility(np.asarray(theta, dtype=float)), dtype=float)
    if u.shape != (model.num_states, model.num_actions):
        raise ContractError(f"utility returned shape {u.shape}, expected "
                            f"{(model.num_states, model.num_actions)}")
    bad = np.argwhere(~np.isfinite(u))
    if len(bad):
        x, a = bad[0]
        raise DomainError(f"non-finite flow utility at action {a}, state {x + 1}")
    return u


def choice_values(model: DdcModel, theta, v) -> np.ndarray:
    """Choice-specific values ``pi(a, x) + beta * Q_a(x)' V`` as ``(X, A+1)``."""
    u = _utilities(model, theta)
    v = np.asarray(v, dtype=float)
    return u + model.beta * np.einsum("axy,y->xa", model.transitions, v)


def bellman_apply(model: DdcModel, theta, v) -> np.ndarray:
    """One application of the log-sum-exp Bellman operator."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise DomainError("value vector must be finite")
    return logsumexp(choice_values(model, theta, v), axis=1)


def _softmax(cv: np.ndarray) -> np.ndarray:
    z = cv - cv.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def bellman_jacobians(model: DdcModel, theta, v):
    """Derivatives of the Bellman operator at ``(theta, v)``.

    Returns:
        ``(F_theta, F_v, F_beta)`` with shapes ``(X, d)``, ``(X, X)`` and ``(X,)``.
    """
    cv = choice_values(model, theta, v)
    p = _softmax(cv)
    g = np.asarray(model.utility_grad(np.asarray(theta, dtype=float)), dtype=float)
    f_theta = np.einsum("xa,xad->xd", p, g)
    f_v = model.beta * np.einsum("xa,axy->xy", p, model.transitions)
    f_beta = np.einsum("xa,axy,y->x", p, model.transitions, np.asarray(v, dtype=float))
    return f_theta, f_v, f_beta


def solve_value_function(model: DdcModel, theta, tol: float = 1e-10, max_iter: int = 10_000,
                         v0=None, newton_steps: int = 5, newton_tol: float = 1e-12,
                         switch_after: int = 50) -> np.ndarray:
    """Solve ``V = Psi(theta, V)`` by successive approximation plus Newton polish.

    Successive approximation runs until the sup-norm residual drops below
    ``max(tol, 10 * eps * |V|)`` or ``switch_after`` sweeps have been spent.
    Newton steps on ``V - Psi(V)`` (equivalently, smoothed policy iteration)
    then drive the residual below ``min(tol, newton_tol * max(1, |V|))``,
    stopping early once it no longer decreases near roundoff level. Full
    steps are used throughout: the operator is convex in ``V``, so Newton
    converges from any start even when the residual rises on early steps.
    At least one Newton step is always taken; if successive approximation was cut short,
    Newton may use the remaining ``max_iter`` budget instead of
    ``newton_steps``.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    theta = np.asarray(theta, dtype=float)
    x = model.num_states
    v = np.zeros(x) if v0 is None else np.array(v0, dtype=float)
    eps = np.finfo(float).eps
    residual = np.inf
    it = 0
    while it < max_iter:
        it += 1
        v_new = bellman_apply(model, theta, v)
        residual = np.max(np.abs(v_new - v))
        v = v_new
        if residual <= max(tol, 10 * eps * np.max(np.abs(v))) or it >= switch_after:
            break
    converged_sa = residual <= max(tol, 10 * eps * np.max(np.abs(v)))
    rescue = not converged_sa and it < max_iter
    steps = max(max_iter - it, 1) if rescue else newton_steps
    eye = np.eye(x)
    best_v, best_res = v, np.inf
    for k in range(steps + 1):
        g = v - bellman_apply(model, theta, v)
        residual = np.max(np.abs(g))
        scale = max(1.0, np.max(np.abs(v)))
        # far from the solution full steps may raise the residual before the
        # convex operator pulls them in, so only a stall near roundoff counts
        stalled = residual >= best_res and best_res <= np.sqrt(eps) * scale
        if residual < best_res:
            best_v, best_res = v, residual
        target = min(tol, newton_tol * scale)
        if k == steps or (k > 0 and (residual <= target or stalled)):
            break
        _, f_v, _ = bellman_jacobians(model, theta, v)
        v = v - np.linalg.solve(eye - f_v, g)
    # Newton can stall at roundoff level slightly above an earlier iterate
    v, residual = best_v, best_res
    # roundoff floor of the log-sum-exp evaluation when |V| is large
    if not residual <= max(tol, 64 * eps * np.max(np.abs(v))):
        raise ConvergenceError(
            f"value function did not converge: residual {residual:.3e} > tol {tol:.1e}",
            residual=residual, iterations=it)
    return v


def ccp_from_values(model: DdcModel, theta, v) -> np.ndarray:
    """Conditional choice probabilities ``(X, A+1)`` implied by ``(theta, v)``."""
    p = _softmax(choice_values(model, theta, v))
    if not np.all(np.isfinite(p)):
        raise DomainError("non-finite choice probabilities")
    zero = np.argwhere(p <= 0.0)
    if len(zero):
        x, a = zero[0]
        raise DomainError(f"choice probability underflowed to 0 at action {a}, state {x + 1}")
    return p


def log_likelihood(model: DdcModel, theta, v, data: PanelDataset) -> float:
    """Log-likelihood of the observed actions given CCPs implied by ``(theta, v)``."""
    counts = data.counts(model.num_states, model.num_actions)
    p = ccp_from_values(model, theta, v)
    return log_likelihood_from_counts(p, counts)


def log_likelihood_from_counts(p: np.ndarray, counts: np.ndarray) -> float:
    mask = counts > 0
    if np.any(p[mask] <= 0):
        raise DomainError("zero probability assigned to an observed action")
    return float(np.sum(counts[mask] * np.log(p[mask])))


def hotz_miller_csv(p) -> np.ndarray:
    """Choice-specific value differences ``log p_a - log p_A`` (``(X, A+1)``)."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise DomainError("Hotz-Miller inversion needs interior probabilities")
    logp = np.log(p)
    return logp - logp[:, -1:]


def _psi(model: DdcModel, p: np.ndarray) -> np.ndarray:
    if model.psi is None:
        return -np.log(p)
    return np.asarray(model.psi(p), dtype=float)


def ccp_to_utilities(p, model: DdcModel, beta: Optional[float] = None,
                     pi_bar_A=None) -> np.ndarray:
    """Flow utilities ``pi_a`` (a != A) implied by CCPs and transitions.

    Computes ``(I - beta Q_a)(I - beta Q_A)^{-1} (pi_bar_A + psi_A) - psi_a``,
    which is ``(I - beta Q_a)(I - beta Q_A)^{-1}(-log p_A) + log p_a`` for
    logit shocks and ``pi_A = 0``.

    Returns:
        ``(X, A)`` array whose column ``a`` is ``pi_a``.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise DomainError("CCP-to-utility map needs interior probabilities")
    beta = model.beta if beta is None else float(beta)
    q = model.transitions
    n_a = model.num_actions
    eye = np.eye(model.num_states)
    psi = _psi(model, p)
    w = psi[:, -1] if pi_bar_A is None else psi[:, -1] + np.asarray(pi_bar_A, dtype=float)
    s = lu_solve(lu_factor(eye - beta * q[-1]), w)
    out = np.empty((model.num_states, n_a - 1))
    for a in range(n_a - 1):
        out[:, a] = s - beta * q[a] @ s - psi[:, a]
    return out


def log_likelihood_gradients(model: DdcModel, theta, v, counts):
    """Partial derivatives of the log-likelihood at ``(theta, v)``.

    ``V`` is treated as a free argument here (not as a function of theta).

    Returns:
        ``(L, L_theta, L_v)`` with shapes ``()``, ``(d,)``, ``(X,)``.
    """
    counts = np.asarray(counts, dtype=float)
    p = ccp_from_values(model, theta, v)
    ll = log_likelihood_from_counts(p, counts)
    g = np.asarray(model.utility_grad(np.asarray(theta, dtype=float)), dtype=float)
    excess = counts - counts.sum(axis=1, keepdims=True) * p
    l_theta = np.einsum("xa,xad->d", excess, g)
    l_v = model.beta * np.einsum("xa,axy->y", excess, model.transitions)
    return ll, l_theta, l_v
