"""Discounted infinite-horizon problems: T-stage truncation and fixed-point residuals.

Risk is computed by truncating to stages 0..T with stage costs
``gamma**t * c`` and solving the finite-horizon augmented DP. The
fixed-point operators in (s, x, theta) serve as checks: applying them to
the stage-0 values of a T-stage truncation yields the (T+1)-stage values,
so their residual measures the truncation gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UnsupportedFamilyError
from .mdp import AugPolicy, FiniteHorizonMdp, XGrid, _backward, interp_weights
from .risk import RiskFamily, check_scaling

SCALING_TOL = 1e-9
_SCALING_PROBES = np.linspace(-3.0, 3.0, 61)


@dataclass
class InfiniteMdp:
    """Stationary MDP with costs in [0, 1] and discount ``gamma`` in [0, 1)."""

    costs: np.ndarray
    kernel: np.ndarray
    gamma: float

    def __post_init__(self):
        self.costs = np.asarray(self.costs, float)
        self.kernel = np.asarray(self.kernel, float)
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("discount gamma must lie in [0, 1)")
        S, A = self.costs.shape
        if self.kernel.shape != (S, A, S):
            raise ConfigError(f"kernel must have shape {(S, A, S)}")
        if self.costs.min() < 0 or self.costs.max() > 1:
            raise ConfigError("costs must lie in [0, 1]")
        if self.kernel.min() < 0 or np.max(np.abs(self.kernel.sum(axis=2) - 1)) > 1e-12:
            raise ConfigError("kernel rows must be distributions")

    @property
    def n_states(self) -> int:
        return self.costs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.costs.shape[1]


@dataclass(frozen=True)
class TruncationPlan:
    T: int
    epsilon_trunc: float


def truncation_bound(gamma: float, L_C: float, T: int) -> float:
    return L_C * gamma ** T / (1.0 - gamma)


def horizon_for(gamma: float, L_C: float, eps: float) -> int:
    """Smallest integer T >= 1 with ``L_C gamma^T / (1 - gamma) <= eps``."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigError("discount gamma must lie in [0, 1)")
    if not eps > 0:
        raise ConfigError("eps must be positive")
    if gamma == 0.0:
        return 1
    guess = math.log(eps * (1.0 - gamma) / L_C) / math.log(gamma)
    T = max(1, int(math.ceil(guess)) - 2)
    while truncation_bound(gamma, L_C, T) > eps:
        T += 1
    while T > 1 and truncation_bound(gamma, L_C, T - 1) <= eps:
        T -= 1
    return T


def truncate_at(inf: InfiniteMdp, T: int) -> FiniteHorizonMdp:
    """Stages 0..T with stage costs ``gamma**t * c``."""
    if T < 0:
        raise ConfigError("T must be non-negative")
    costs = [inf.gamma ** t * inf.costs for t in range(T + 1)]
    return FiniteHorizonMdp(T, costs, [inf.kernel] * T)


def truncate(inf: InfiniteMdp, eps: float, L_C: float):
    """T-stage approximation with guaranteed truncation error at most ``eps``."""
    T = horizon_for(inf.gamma, L_C, eps)
    return truncate_at(inf, T), TruncationPlan(T, truncation_bound(inf.gamma, L_C, T))


# ---------------------------------------------------------------------------
# value surfaces over (s, x, theta)


class ValueSurface:
    """Stage-0 augmented values of a T-stage truncation as a function of (s, x, theta).

    One finite-horizon DP is solved per distinct theta (cached) on an
    x-window starting at stage 0. ``policy`` is a stationary ``pi(a|s)``
    array; without it the optimal values are used. Lookups outside the
    window extrapolate linearly and are counted in ``extrapolated``.
    """

    def __init__(self, inf: InfiniteMdp, family: RiskFamily, T: int, grid: XGrid,
                 policy=None):
        self.inf = inf
        self.family = family
        self.T = T
        self.grid = grid
        self.mdp = truncate_at(inf, T)
        self.policy = None if policy is None else AugPolicy.markov(self.mdp, grid, policy)
        self.nodes = grid.nodes(self.mdp)[0]
        self.extrapolated = 0
        self._cache: dict = {}

    def table(self, theta) -> np.ndarray:
        theta = np.asarray(theta, float).ravel()
        key = tuple(theta.tolist())
        if key not in self._cache:
            V0, _, _ = _backward(self.mdp, self.family, theta[None, :], self.grid, self.policy)
            self._cache[key] = V0[0]
        return self._cache[key]

    def __call__(self, s, x, theta) -> np.ndarray:
        """Values at states ``s`` and positions ``x`` (broadcast together)."""
        V = self.table(theta)
        s, x = np.broadcast_arrays(np.asarray(s, np.intp), np.asarray(x, float))
        nodes = self.nodes
        if nodes.size == 1:
            return V[s, 0]
        i, w = interp_weights(nodes, x)
        # linear extension beyond the window
        lo, hi = nodes[0], nodes[-1]
        below, above = x < lo - 1e-12, x > hi + 1e-12
        self.extrapolated += int(below.sum() + above.sum())
        i = np.where(below, 0, np.where(above, nodes.size - 2, i))
        w = np.where(below | above, (x - nodes[i]) / (nodes[i + 1] - nodes[i]), w)
        return (1.0 - w) * V[s, i] + w * V[s, i + 1]


@dataclass
class ResidualReport:
    residual: float
    points: int
    extrapolated: int = 0
    per_theta: list = field(default_factory=list)


def _require_scaling(family: RiskFamily, thetas, gamma: float) -> None:
    if not math.isfinite(family.L_f):
        raise UnsupportedFamilyError(
            "family has no global Lipschitz constant in z; use a finite truncation level")
    for th in thetas:
        r = check_scaling(family, th, gamma, _SCALING_PROBES)
        if r > SCALING_TOL:
            raise UnsupportedFamilyError(f"scaling identity fails with residual {r:.3g}")


def _residual(inf, family, surface, x_points, thetas, policy, minimize):
    gamma = inf.gamma
    if not 0.0 < gamma < 1.0:
        raise ConfigError("residuals need a discount in (0, 1)")
    thetas = [np.asarray(t, float).ravel() for t in np.atleast_2d(np.asarray(thetas, float))]
    _require_scaling(family, thetas, gamma)
    x = np.asarray(x_points, float)
    S, A = inf.costs.shape
    c = inf.costs
    states = np.arange(S)
    start = surface.extrapolated
    worst, per = 0.0, []
    for th in thetas:
        V_here = surface(states[:, None], x[None, :], th)  # (S, N)
        q = x[None, None, :] + c[:, :, None]  # (S, A, N)
        f = family.values(th[None, :], q)[0] - family.values(th[None, :], x)[0][None, None, :]
        nxt = np.stack([surface(s2, q / gamma, th / gamma) for s2 in range(S)], axis=-1)
        cont = np.einsum("sant,sat->san", nxt, inf.kernel)
        Q = f + gamma * cont
        TV = Q.min(axis=1) if minimize else np.einsum("san,sa->sn", Q, policy)
        r = float(np.max(np.abs(TV - V_here)))
        per.append(r)
        worst = max(worst, r)
    return ResidualReport(worst, len(thetas) * S * x.size, surface.extrapolated - start, per)


def _check_policy(inf: InfiniteMdp, policy) -> np.ndarray:
    policy = np.asarray(policy, float)
    if policy.shape != inf.costs.shape or np.any(policy < 0) or \
            np.max(np.abs(policy.sum(axis=1) - 1)) > 1e-12:
        raise ConfigError("policy must be an (S, A) array of distributions")
    return policy


def bellman_residual_eval(inf: InfiniteMdp, policy, family: RiskFamily, surface: ValueSurface,
                          x_points, thetas) -> ResidualReport:
    """Max-norm residual of the policy operator in (s, x, theta).

    ``T[V](s,x,th) = sum_a pi(a|s) [f_th(x+c) - f_th(x) + gamma E V(S1, (x+c)/gamma, th/gamma)]``
    evaluated at every state, ``x`` in ``x_points`` and ``th`` in ``thetas``.
    """
    return _residual(inf, family, surface, x_points, thetas, _check_policy(inf, policy), False)


def bellman_residual_opt(inf: InfiniteMdp, family: RiskFamily, surface: ValueSurface,
                         x_points, thetas) -> ResidualReport:
    """Max-norm residual of the optimality operator (minimum over actions)."""
    return _residual(inf, family, surface, x_points, thetas, None, True)


def cvar_operator_residual(inf: InfiniteMdp, policy, alpha: float, theta: float,
                           surface: ValueSurface, x_points) -> ResidualReport:
    """Residual of the CVaR operator with a single augmented variable.

    The continuation is looked up at ``x' = (X1 + (gamma - 1) theta) / gamma``
    with theta held fixed, plus the constant ``(1 - gamma) theta``.
    """
    family = surface.family
    if family.kind != "cvar":
        raise UnsupportedFamilyError("the single-variable operator is specific to CVaR")
    if abs(family.alpha - alpha) > 0:
        raise ConfigError("alpha does not match the surface family")
    gamma = inf.gamma
    if not 0.0 < gamma < 1.0:
        raise ConfigError("residuals need a discount in (0, 1)")
    policy = _check_policy(inf, policy)
    th = np.array([float(theta)])
    x = np.asarray(x_points, float)
    S = inf.n_states
    states = np.arange(S)
    start = surface.extrapolated

    def f(z):
        return family.values(th[None, :], z)[0]

    V_here = surface(states[:, None], x[None, :], th)
    X1 = x[None, None, :] + inf.costs[:, :, None]
    xs = (X1 + (gamma - 1.0) * th[0]) / gamma
    nxt = np.stack([surface(s2, xs, th) for s2 in range(S)], axis=-1)
    cont = np.einsum("sant,sat->san", gamma * nxt, inf.kernel) + gamma * f(xs) - f(X1)
    Q = f(X1) - f(x)[None, None, :] + (1.0 - gamma) * th[0] + cont
    TV = np.einsum("san,sa->sn", Q, policy)
    r = float(np.max(np.abs(TV - V_here)))
    return ResidualReport(r, S * x.size, surface.extrapolated - start, [r])


def residual_bound(family: RiskFamily, gamma: float, T: int) -> float:
    """Bound ``2 L_f gamma^T / (1 - gamma)`` on the residual of T-truncated values."""
    return 2.0 * family.L_f * gamma ** T / (1.0 - gamma)


def truncate_soc(problem, gamma: float, T: int):
    """Stationary control problem truncated to stages 0..T with weights ``gamma**t``.

    ``problem`` supplies the dynamics, cost and a scenario set for its
    first stage, which is reused at every stage.
    """
    from .soc import SocProblem

    if not 0.0 <= gamma < 1.0:
        raise ConfigError("discount gamma must lie in [0, 1)")
    if not problem.noise:
        raise ConfigError("need a scenario set to repeat")
    if problem.cost.kind == "table" or getattr(problem.dynamics, "kind", "") == "table":
        raise ConfigError("stage-indexed tables cannot be repeated over a longer horizon")
    return SocProblem(T, problem.state_box, problem.action_box, problem.dynamics, problem.cost,
                      problem.noise[0], problem.L, gamma ** np.arange(T + 1))
