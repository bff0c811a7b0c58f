"""Finite-horizon tabular MDPs and backward induction on the augmented state (s, x).

The accumulated cost ``x`` is appended to the state. For a fixed parameter
theta the augmented stage cost is ``f_theta(x + c) - f_theta(x)``, and the
augmented values telescope: ``V_0(s) = Vaug_0(s, 0) + f_theta(0)``.

All DP routines are batched over theta: values carry a leading axis of
length m, one slice per parameter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DomainError, NumericError
from .risk import RiskFamily, ThetaGrid, minimize_over_theta

log = logging.getLogger(__name__)

ROW_TOL = 1e-12
LATTICE_TOL = 1e-9
DRIFT_TOL = 1e-12
_CHUNK_ELEMS = 4_000_000


@dataclass
class FiniteHorizonMdp:
    """MDP with stages 0..T.

    ``costs[t]`` has shape (S_t, A_t) with entries in [0, 1]. ``kernels[t]``
    for t < T maps (s, a) to a distribution over S_{t+1}; it is either a
    dense (S_t, A_t, S_{t+1}) array or a sparse (S_t * A_t, S_{t+1}) matrix.
    """

    T: int
    costs: list
    kernels: list
    state_labels: list | None = None
    action_labels: list | None = None

    def __post_init__(self):
        if self.T < 0 or len(self.costs) != self.T + 1 or len(self.kernels) != self.T:
            raise ConfigError("need T+1 cost arrays and T kernels")
        self.costs = [np.asarray(c, float) for c in self.costs]
        for t, c in enumerate(self.costs):
            if c.ndim != 2 or min(c.shape) < 1:
                raise ConfigError(f"costs[{t}] must be a non-empty (S, A) array")
            if not np.all(np.isfinite(c)) or c.min() < 0 or c.max() > 1:
                raise ConfigError(f"costs[{t}] must lie in [0, 1]")
        kernels = []
        for t, P in enumerate(self.kernels):
            S, A = self.costs[t].shape
            S_next = self.costs[t + 1].shape[0]
            if sp.issparse(P):
                P = sp.csr_matrix(P, dtype=float)
                if P.shape != (S * A, S_next):
                    raise ConfigError(f"kernel {t} has shape {P.shape}, expected {(S * A, S_next)}")
                rows = np.asarray(P.sum(axis=1)).ravel()
                neg = P.data.size and P.data.min() < 0
            else:
                P = np.asarray(P, float)
                if P.shape != (S, A, S_next):
                    raise ConfigError(f"kernel {t} has shape {P.shape}, expected {(S, A, S_next)}")
                rows = P.sum(axis=2).ravel()
                neg = P.min() < 0
            if neg or np.max(np.abs(rows - 1.0)) > ROW_TOL:
                raise ConfigError(f"kernel {t} rows must be non-negative and sum to 1")
            kernels.append(P)
        self.kernels = kernels

    def n_states(self, t: int) -> int:
        return self.costs[t].shape[0]

    def n_actions(self, t: int) -> int:
        return self.costs[t].shape[1]

    def kernel_matrix(self, t: int):
        """Kernel t as an (S_t * A_t, S_{t+1}) matrix, dense or sparse."""
        P = self.kernels[t]
        return P if sp.issparse(P) else P.reshape(-1, P.shape[2])

    def kernel_dense(self, t: int) -> np.ndarray:
        P = self.kernels[t]
        if sp.issparse(P):
            return P.toarray().reshape(self.n_states(t), self.n_actions(t), -1)
        return P

    def cost_bound(self) -> float:
        """Upper bound on the total cost: sum of per-stage maxima."""
        return float(sum(c.max() for c in self.costs))

    @classmethod
    def homogeneous(cls, T: int, costs, kernel, **kw) -> "FiniteHorizonMdp":
        costs = np.asarray(costs, float)
        kernel = np.asarray(kernel, float)
        return cls(T, [costs] * (T + 1), [kernel] * T, **kw)


# ---------------------------------------------------------------------------
# x discretization


@dataclass(frozen=True)
class XGrid:
    """Discretization of the accumulated cost.

    ``lattice`` mode (step 1/K) is exact when every cost is a multiple of
    1/K. ``uniform`` mode uses spacing at most ``h`` with linear
    interpolation. Stage t covers ``[x0_lo, x0_hi + sum_{k<t} max c_k]``.
    """

    mode: str
    K: int | None = None
    h: float | None = None
    x0: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.mode == "lattice":
            if self.K is None or int(self.K) < 1:
                raise ConfigError("lattice grid needs integer K >= 1")
            object.__setattr__(self, "K", int(self.K))
        elif self.mode == "uniform":
            if self.h is None or not self.h > 0:
                raise ConfigError("uniform grid needs spacing h > 0")
        else:
            raise ConfigError(f"unknown x-grid mode {self.mode!r}")
        lo, hi = map(float, self.x0)
        if hi < lo:
            raise ConfigError("x0 window must satisfy lo <= hi")
        if self.mode == "lattice":
            for v in (lo, hi):
                if abs(v * self.K - round(v * self.K)) > LATTICE_TOL:
                    raise ConfigError("lattice x0 window must sit on the 1/K lattice")
        object.__setattr__(self, "x0", (lo, hi))

    @classmethod
    def lattice(cls, K: int, x0=(0.0, 0.0)) -> "XGrid":
        return cls("lattice", K=K, x0=x0)

    @classmethod
    def uniform(cls, h: float, x0=(0.0, 0.0)) -> "XGrid":
        return cls("uniform", h=h, x0=x0)

    @property
    def spacing(self) -> float:
        return 1.0 / self.K if self.mode == "lattice" else float(self.h)

    def validate(self, mdp: FiniteHorizonMdp) -> None:
        if self.mode != "lattice":
            return
        for t, c in enumerate(mdp.costs):
            scaled = c * self.K
            bad = np.abs(scaled - np.round(scaled)) > LATTICE_TOL * max(1, self.K)
            if np.any(bad):
                s, a = map(int, np.argwhere(bad)[0])
                raise ConfigError(
                    f"cost c_{t}({s},{a}) = {c[s, a]!r} is not a multiple of 1/{self.K}")

    def ranges(self, mdp: FiniteHorizonMdp) -> list[tuple[float, float]]:
        lo, hi = self.x0
        out = []
        for t in range(mdp.T + 1):
            out.append((lo, hi))
            hi = hi + float(mdp.costs[t].max())
        return out

    def nodes(self, mdp: FiniteHorizonMdp) -> list[np.ndarray]:
        out = []
        for lo, hi in self.ranges(mdp):
            if self.mode == "lattice":
                j_lo = int(round(lo * self.K))
                j_hi = int(round(hi * self.K))
                out.append(np.arange(j_lo, j_hi + 1) / self.K)
            else:
                n = max(1, int(math.ceil((hi - lo) / self.h - 1e-12)))
                out.append(np.linspace(lo, hi, n + 1) if hi > lo else np.array([lo]))
        return out


def interp_weights(nodes: np.ndarray, q: np.ndarray):
    """Left indices and weights for linear interpolation of ``q`` on ``nodes``.

    Queries beyond the node range are clamped; the caller is responsible for
    keeping drift small.
    """
    q = np.asarray(q, float)
    n = nodes.size
    if n == 1:
        return np.zeros(q.shape, dtype=np.intp), np.zeros(q.shape)
    qc = np.clip(q, nodes[0], nodes[-1])
    i = np.clip(np.searchsorted(nodes, qc, side="right") - 1, 0, n - 2)
    w = (qc - nodes[i]) / (nodes[i + 1] - nodes[i])
    return i, w


# ---------------------------------------------------------------------------
# tables and policies


@dataclass
class ValueTable:
    """Augmented values per stage; ``values[t]`` has shape (S_t, N_t)."""

    values: list
    nodes: list
    theta: np.ndarray

    def at(self, t: int, s: int, x: float) -> float:
        i, w = interp_weights(self.nodes[t], np.array([x]))
        row = self.values[t][s]
        if self.nodes[t].size == 1:
            return float(row[0])
        return float((1 - w[0]) * row[i[0]] + w[0] * row[i[0] + 1])


@dataclass
class AugPolicy:
    """Policy on the augmented grid.

    Exactly one of ``actions`` (per stage, (S_t, N_t) int arrays) or
    ``probs`` (per stage, (S_t, N_t, A_t) arrays) is set.
    """

    nodes: list
    actions: list | None = None
    probs: list | None = None
    L_pi: float | None = None

    def __post_init__(self):
        if (self.actions is None) == (self.probs is None):
            raise ConfigError("policy needs exactly one of actions or probs")
        if self.actions is not None:
            self.actions = [np.asarray(a, dtype=np.intp) for a in self.actions]
        else:
            self.probs = [np.asarray(p, float) for p in self.probs]
            for t, p in enumerate(self.probs):
                if np.any(p < 0) or np.max(np.abs(p.sum(axis=-1) - 1.0)) > 1e-12:
                    raise ConfigError(f"policy distributions at stage {t} must sum to 1")

    @property
    def deterministic(self) -> bool:
        return self.actions is not None

    def stage_probs(self, t: int, n_actions: int) -> np.ndarray:
        if self.probs is not None:
            return self.probs[t]
        return np.eye(n_actions)[self.actions[t]]

    def check(self, mdp: FiniteHorizonMdp, nodes: list) -> None:
        if len(self.nodes) != mdp.T + 1:
            raise ConfigError("policy horizon does not match the MDP")
        for t in range(mdp.T + 1):
            S, A, N = mdp.n_states(t), mdp.n_actions(t), nodes[t].size
            if self.nodes[t].shape != nodes[t].shape or np.max(np.abs(self.nodes[t] - nodes[t])) > 1e-12:
                raise ConfigError(f"policy x-nodes at stage {t} do not match the grid")
            if self.actions is not None:
                a = self.actions[t]
                if a.shape != (S, N):
                    raise ConfigError(f"policy undefined on part of stage {t}")
                if a.min() < 0 or a.max() >= A:
                    raise ConfigError(f"policy action index out of range at stage {t}")
            elif self.probs[t].shape != (S, N, A):
                raise ConfigError(f"policy undefined on part of stage {t}")
        if self.L_pi is not None:
            gap = policy_lipschitz_gap(self, mdp)
            if gap > 1e-9:
                raise ConfigError(f"policy violates its declared L_pi by {gap:.3g}")

    def action_at(self, t: int, s: int, x: float) -> int:
        """Action at the node nearest ``x`` (deterministic policies)."""
        if self.actions is None:
            raise ConfigError("action_at needs a deterministic policy")
        j = int(np.argmin(np.abs(self.nodes[t] - x)))
        return int(self.actions[t][s, j])

    @classmethod
    def constant(cls, mdp: FiniteHorizonMdp, grid: XGrid, action: int = 0) -> "AugPolicy":
        nodes = grid.nodes(mdp)
        return cls(nodes, actions=[np.full((mdp.n_states(t), nodes[t].size), action)
                                   for t in range(mdp.T + 1)])

    @classmethod
    def uniform_random(cls, mdp: FiniteHorizonMdp, grid: XGrid) -> "AugPolicy":
        nodes = grid.nodes(mdp)
        return cls(nodes, probs=[np.full((mdp.n_states(t), nodes[t].size, mdp.n_actions(t)),
                                         1.0 / mdp.n_actions(t)) for t in range(mdp.T + 1)],
                   L_pi=0.0)

    @classmethod
    def markov(cls, mdp: FiniteHorizonMdp, grid: XGrid, probs) -> "AugPolicy":
        """Stationary policy ``pi(a|s)`` that ignores the accumulated cost."""
        probs = np.asarray(probs, float)
        nodes = grid.nodes(mdp)
        return cls(nodes, probs=[np.broadcast_to(probs[:, None, :], (probs.shape[0], n.size, probs.shape[1]))
                                 for n in nodes], L_pi=0.0)

    @classmethod
    def random(cls, mdp: FiniteHorizonMdp, grid: XGrid, rng: np.random.Generator,
               randomized: bool = False) -> "AugPolicy":
        nodes = grid.nodes(mdp)
        if not randomized:
            return cls(nodes, actions=[rng.integers(0, mdp.n_actions(t), (mdp.n_states(t), nodes[t].size))
                                       for t in range(mdp.T + 1)])
        probs = [rng.dirichlet(np.ones(mdp.n_actions(t)), (mdp.n_states(t), nodes[t].size))
                 for t in range(mdp.T + 1)]
        return cls(nodes, probs=probs)


def policy_lipschitz_gap(policy: AugPolicy, mdp: FiniteHorizonMdp) -> float:
    """Largest excess of ``|pi(.|x) - pi(.|x')|_1`` over ``L_pi |x - x'|`` on adjacent nodes."""
    L = policy.L_pi or 0.0
    worst = 0.0
    for t in range(mdp.T + 1):
        p = policy.stage_probs(t, mdp.n_actions(t))
        if p.shape[1] < 2:
            continue
        jump = np.abs(np.diff(p, axis=1)).sum(axis=2)
        dx = np.diff(policy.nodes[t])
        worst = max(worst, float(np.max(jump - L * dx)))
    return worst


# ---------------------------------------------------------------------------
# moduli


def eval_modulus(T: int, t: int, L_C: float, L_pi: float = 0.0) -> float:
    """Lipschitz modulus in x of the augmented evaluation value at stage t."""
    if not 0 <= t <= T:
        raise DomainError("need 0 <= t <= T")
    k = T - t + 1
    return (2.0 + (T - t + 2) / 2.0 * L_pi) * k * L_C


def opt_modulus(T: int, t: int, L_C: float) -> float:
    """Lipschitz modulus in x of the augmented optimal value at stage t."""
    if not 0 <= t <= T:
        raise DomainError("need 0 <= t <= T")
    return 2.0 * (T - t + 1) * L_C


# ---------------------------------------------------------------------------
# dynamic programming


def augmented_cost(mdp: FiniteHorizonMdp, family: RiskFamily, theta, t: int, s: int,
                   x: float, a: int) -> float:
    """Stage cost ``f_theta(x + c_t(s, a)) - f_theta(x)`` of the augmented MDP."""
    hi = float(sum(c.max() for c in mdp.costs[:t]))
    if not -DRIFT_TOL <= x <= hi + DRIFT_TOL:
        raise DomainError(f"x = {x!r} outside the reachable range [0, {hi}] at stage {t}")
    theta = family.check_theta(theta)
    c = float(mdp.costs[t][s, a])
    f = family.values(theta[None, :], np.array([x + c, x]))[0]
    return float(f[0] - f[1])


def _matmul(P, V2):
    out = P @ V2
    return np.asarray(out)


def _backward(mdp: FiniteHorizonMdp, family: RiskFamily, thetas: np.ndarray, grid: XGrid,
              policy: AugPolicy | None = None, keep: bool = False):
    """Core backward recursion for a batch of parameters.

    Returns ``(V0, tables, greedy)`` where V0 has shape (m, S_0, N_0). When
    ``keep`` is set, ``tables[t]`` has shape (m, S_t, N_t) and, for the
    optimization recursion, ``greedy[t]`` has shape (m, S_t, N_t).
    """
    grid.validate(mdp)
    nodes = grid.nodes(mdp)
    if policy is not None:
        policy.check(mdp, nodes)
    m = thetas.shape[0]
    tables = [None] * (mdp.T + 1)
    greedy = [None] * (mdp.T + 1)
    V_next = None
    for t in range(mdp.T, -1, -1):
        S, A = mdp.costs[t].shape
        xs = nodes[t]
        N = xs.size
        c = mdp.costs[t]
        q = xs[None, None, :] + c[:, :, None]  # (S, A, N)
        f_q = family.values(thetas, q)  # (m, S, A, N)
        f_x = family.values(thetas, xs)  # (m, N)
        Q = f_q - f_x[:, None, None, :]
        if t < mdp.T:
            nx = nodes[t + 1]
            S_next = V_next.shape[1]
            # U[s, a, m, k] = sum_s' P[s, a, s'] V_next[m, s', k]
            V2 = np.moveaxis(V_next, 1, 0).reshape(S_next, -1)
            U = _matmul(mdp.kernel_matrix(t), V2).reshape(S, A, m, nx.size)
            U = np.moveaxis(U, 2, 0)  # (m, S, A, N_next)
            if grid.mode == "lattice":
                shift = np.rint(c * grid.K).astype(np.intp)
                base = int(round((xs[0] - nx[0]) * grid.K))
                idx = base + np.arange(N)[None, None, :] + shift[:, :, None]
                cont = np.take_along_axis(U, np.broadcast_to(idx, (m,) + idx.shape), axis=3)
            else:
                over = q.max() - nx[-1]
                if over > DRIFT_TOL * (t + 1) * max(1.0, nx[-1]):
                    raise NumericError(f"x-grid does not cover stage {t + 1} (overshoot {over:.3g})")
                i, w = interp_weights(nx, q)
                ib = np.broadcast_to(i, (m,) + i.shape)
                left = np.take_along_axis(U, ib, axis=3)
                if nx.size > 1:
                    right = np.take_along_axis(U, ib + 1, axis=3)
                    cont = (1.0 - w) * left + w * right
                else:
                    cont = left
            Q = Q + cont
        if np.isnan(Q).any():
            j = np.argwhere(np.isnan(Q))[0]
            raise NumericError(f"NaN in augmented DP at stage {t}, state {int(j[1])}, action {int(j[2])}")
        if policy is None:
            a_star = np.argmin(Q, axis=2)  # lowest index on ties
            V = np.take_along_axis(Q, a_star[:, :, None, :], axis=2)[:, :, 0, :]
            if keep:
                greedy[t] = a_star
        else:
            if policy.deterministic:
                a_pol = policy.actions[t]
                V = np.take_along_axis(Q, np.broadcast_to(a_pol[None, :, None, :], (m, S, 1, N)), axis=2)[:, :, 0, :]
            else:
                probs = policy.probs[t]  # (S, N, A)
                V = np.einsum("msan,sna->msn", Q, probs)
        if keep:
            tables[t] = V
        V_next = V
    return V_next, tables, greedy


def _chunks(mdp: FiniteHorizonMdp, grid: XGrid, m: int) -> int:
    nodes = grid.nodes(mdp)
    per_theta = max(mdp.costs[t].size * nodes[t].size for t in range(mdp.T + 1))
    return max(1, min(m, _CHUNK_ELEMS // max(per_theta, 1)))


def batch_initial_table(mdp: FiniteHorizonMdp, family: RiskFamily, thetas, grid: XGrid,
                        policy: AugPolicy | None = None, x: float = 0.0) -> np.ndarray:
    """``Vaug_0(s, x) + f_theta(x)`` for every theta and stage-0 state; shape (m, S_0).

    With ``x = 0`` this is the risk objective at each parameter.
    """
    thetas = np.atleast_2d(np.asarray(thetas, float))
    nodes0 = grid.nodes(mdp)[0]
    i, w = interp_weights(nodes0, np.array([x]))
    out = np.empty((thetas.shape[0], mdp.n_states(0)))
    step = _chunks(mdp, grid, thetas.shape[0])
    for lo in range(0, thetas.shape[0], step):
        th = thetas[lo:lo + step]
        V0, _, _ = _backward(mdp, family, th, grid, policy)
        if nodes0.size == 1:
            v = V0[:, :, 0]
        else:
            v = (1 - w[0]) * V0[:, :, i[0]] + w[0] * V0[:, :, i[0] + 1]
        out[lo:lo + step] = v + family.values(th, np.array(x))[:, None]
    return out


def batch_initial_values(mdp: FiniteHorizonMdp, family: RiskFamily, thetas, s0: int,
                         grid: XGrid, policy: AugPolicy | None = None, x: float = 0.0) -> np.ndarray:
    """Risk objective ``Vaug_0(s0, x) + f_theta(x)`` for every theta in the batch."""
    return batch_initial_table(mdp, family, thetas, grid, policy, x)[:, s0]


def dp_optimize(mdp: FiniteHorizonMdp, family: RiskFamily, theta, grid: XGrid):
    """Optimal augmented values and the greedy policy at one parameter."""
    theta = family.check_theta(theta)
    _, tables, greedy = _backward(mdp, family, theta[None, :], grid, keep=True)
    nodes = grid.nodes(mdp)
    table = ValueTable([v[0] for v in tables], nodes, theta)
    return table, AugPolicy(nodes, actions=[g[0] for g in greedy])


def dp_evaluate(mdp: FiniteHorizonMdp, policy: AugPolicy, family: RiskFamily, theta,
                grid: XGrid) -> ValueTable:
    """Augmented values of ``policy`` at one parameter."""
    theta = family.check_theta(theta)
    _, tables, _ = _backward(mdp, family, theta[None, :], grid, policy=policy, keep=True)
    return ValueTable([v[0] for v in tables], grid.nodes(mdp), theta)


def _default_theta_grid(mdp: FiniteHorizonMdp, family: RiskFamily) -> ThetaGrid:
    return family.default_grid(mdp.cost_bound())


def optimal_risk(mdp: FiniteHorizonMdp, family: RiskFamily, theta_grid: ThetaGrid | None,
                 s0: int, grid: XGrid, refine: bool = False):
    """Minimal risk from ``s0``: ``min_theta Vaug_0(s0, 0) + f_theta(0)``.

    Returns ``(risk, theta_star, greedy_policy)``.
    """
    theta_grid = theta_grid or _default_theta_grid(mdp, family)
    box = family.box(mdp.cost_bound())

    def objective(thetas):
        return batch_initial_values(mdp, family, thetas, s0, grid)

    risk, theta = minimize_over_theta(objective, theta_grid, box, refine)
    _, policy = dp_optimize(mdp, family, theta, grid)
    return risk, theta, policy


def policy_risk(mdp: FiniteHorizonMdp, policy: AugPolicy, family: RiskFamily,
                theta_grid: ThetaGrid | None, s0: int, grid: XGrid, refine: bool = True):
    """Risk of a fixed augmented policy from ``s0``; returns ``(risk, theta_star)``."""
    theta_grid = theta_grid or _default_theta_grid(mdp, family)
    box = family.box(mdp.cost_bound())

    def objective(thetas):
        return batch_initial_values(mdp, family, thetas, s0, grid, policy=policy)

    return minimize_over_theta(objective, theta_grid, box, refine)


def lipschitz_excess(table: ValueTable, moduli: Sequence[float]) -> float:
    """Largest ``|V(x_{j+1}) - V(x_j)| - modulus_t * dx`` over stages and states."""
    worst = -math.inf
    for t, V in enumerate(table.values):
        if V.shape[1] < 2:
            continue
        dV = np.abs(np.diff(V, axis=1))
        dx = np.diff(table.nodes[t])[None, :]
        worst = max(worst, float(np.max(dV - moduli[t] * dx)))
    return worst
