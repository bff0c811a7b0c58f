"""Risk-averse stochastic optimal control on compact boxes.

States and actions are discretized by uniform product grids; noise is a
finite scenario set per stage. A problem on a grid reduces to a finite MDP
whose nodes are the grid points and whose kernel carries the multilinear
interpolation weights of ``F_t(s, a, xi)``, so the augmented DP of the
``mdp`` module applies unchanged.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DynamicsError
from .mdp import (AugPolicy, FiniteHorizonMdp, ValueTable, XGrid, batch_initial_table,
                  dp_evaluate, dp_optimize, eval_modulus, interp_weights, opt_modulus)
from .risk import RiskFamily, ThetaGrid, minimize_over_theta

BOX_TOL = 1e-12


def _box(b) -> np.ndarray:
    b = np.asarray(b, float).reshape(-1, 2)
    if np.any(b[:, 0] > b[:, 1]) or not np.all(np.isfinite(b)):
        raise ConfigError("boxes need finite [lo, hi] rows with lo <= hi")
    return b


@dataclass
class LinearDynamics:
    """``s' = A s + B a + xi``, optionally clamped to the state box."""

    A: np.ndarray
    B: np.ndarray
    clamp: bool = True
    kind: str = field(default="linear", init=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, float))
        self.B = np.atleast_2d(np.asarray(self.B, float))

    def next_states(self, t, s, a, xi, box, s_idx=None, a_idx=None):
        """Next states with shape (n_s, n_a, n_xi, d_S)."""
        out = (s @ self.A.T)[:, None, None, :] + (a @ self.B.T)[None, :, None, :] \
            + xi[None, None, :, :]
        return np.clip(out, box[:, 0], box[:, 1]) if self.clamp else out

    def lipschitz(self) -> float:
        return float(np.linalg.norm(np.hstack([self.A, self.B]), 2))


@dataclass
class TableDynamics:
    """Next state tabulated per stage on the grid: ``table[t][i, j, k]`` is a d_S vector."""

    table: list
    kind: str = field(default="table", init=False)

    def __post_init__(self):
        self.table = [np.asarray(t, float) for t in self.table]
        self.table = [t[..., None] if t.ndim == 3 else t for t in self.table]

    def next_states(self, t, s, a, xi, box, s_idx=None, a_idx=None):
        tab = self.table[t]
        if tab.shape[:3] != (s.shape[0], a.shape[0], xi.shape[0]):
            raise ConfigError(f"dynamics table for stage {t} does not match grid x scenarios")
        return tab


@dataclass
class CostSpec:
    """Stage cost ``c_t(s, a)`` in [0, 1].

    ``quadratic``: ``scale * (s'Q s + a'R a)`` clipped to [0, 1];
    ``constant``: ``value``; ``table``: per-stage arrays on the grid nodes.
    """

    kind: str
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    scale: float = 1.0
    value: float = 0.0
    table: list | None = None

    def __post_init__(self):
        if self.kind not in ("quadratic", "constant", "table"):
            raise ConfigError(f"unknown cost kind {self.kind!r}")
        if self.kind == "constant" and not 0.0 <= self.value <= 1.0:
            raise ConfigError("constant cost must lie in [0, 1]")
        if self.kind == "table":
            if self.table is None:
                raise ConfigError("table cost needs per-stage arrays")
            self.table = [np.asarray(t, float) for t in self.table]

    def evaluate(self, t, s, a) -> np.ndarray:
        """Cost on the product of state rows ``s`` and action rows ``a``."""
        if self.kind == "constant":
            return np.full((s.shape[0], a.shape[0]), self.value)
        if self.kind == "table":
            tab = self.table[t]
            if tab.shape != (s.shape[0], a.shape[0]):
                raise ConfigError(f"cost table for stage {t} does not match the grid")
            return tab
        Q = np.eye(s.shape[1]) if self.Q is None else np.atleast_2d(np.asarray(self.Q, float))
        R = np.eye(a.shape[1]) if self.R is None else np.atleast_2d(np.asarray(self.R, float))
        qs = np.einsum("ni,ij,nj->n", s, Q, s)
        qa = np.einsum("mi,ij,mj->m", a, R, a)
        return np.clip(self.scale * (qs[:, None] + qa[None, :]), 0.0, 1.0)


@dataclass
class SocProblem:
    """Finite-horizon control problem with stages 0..T.

    ``noise[t]`` is a tuple ``(xi, p)`` with ``xi`` of shape (k, d_S) for
    t < T; a bare tuple instead of a list is shared by all stages.
    ``weights[t]`` multiplies the stage cost (discounting after
    truncation); weights must lie in [0, 1].
    """

    T: int
    state_box: np.ndarray
    action_box: np.ndarray
    dynamics: object
    cost: CostSpec
    noise: list
    L: float | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.state_box = _box(self.state_box)
        self.action_box = _box(self.action_box)
        if isinstance(self.noise, tuple):
            self.noise = [self.noise] * max(self.T, 0)
        if len(self.noise) < self.T:
            raise ConfigError("need a scenario set for each stage t < T")
        parsed = []
        for t, (xi, p) in enumerate(self.noise[: self.T]):
            xi = np.asarray(xi, float).reshape(len(p), -1)
            p = np.asarray(p, float)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ConfigError(f"scenario probabilities at stage {t} must sum to 1")
            parsed.append((xi, p))
        self.noise = parsed
        if self.weights is None:
            self.weights = np.ones(self.T + 1)
        self.weights = np.asarray(self.weights, float)
        if self.weights.shape != (self.T + 1,) or self.weights.min() < 0 or self.weights.max() > 1:
            raise ConfigError("weights must hold T+1 values in [0, 1]")

    @property
    def d_S(self) -> int:
        return self.state_box.shape[0]

    @property
    def d_A(self) -> int:
        return self.action_box.shape[0]

    @property
    def radius(self) -> float:
        return float(max(np.abs(self.state_box).max(), np.abs(self.action_box).max()))

    def validate_lipschitz(self, probes: int = 500, seed: int = 0) -> float:
        """Largest sampled slope of the cost and dynamics; raises if it exceeds ``L``."""
        if self.cost.kind == "table" or getattr(self.dynamics, "kind", "") == "table":
            return float("nan")
        rng = np.random.default_rng(seed)
        lo = np.concatenate([self.state_box[:, 0], self.action_box[:, 0]])
        hi = np.concatenate([self.state_box[:, 1], self.action_box[:, 1]])
        u = rng.uniform(lo, hi, (probes, lo.size))
        v = rng.uniform(lo, hi, (probes, lo.size))
        dS = self.d_S
        worst = 0.0
        for t in range(self.T + 1):
            cu = np.array([self.weights[t] * self.cost.evaluate(t, x[None, :dS], x[None, dS:])[0, 0] for x in u])
            cv = np.array([self.weights[t] * self.cost.evaluate(t, x[None, :dS], x[None, dS:])[0, 0] for x in v])
            dist = np.linalg.norm(u - v, axis=1)
            ok = dist > 0
            worst = max(worst, float(np.max(np.abs(cu - cv)[ok] / dist[ok])))
            if t < self.T:
                xi = self.noise[t][0]
                for x, y, d in zip(u[ok], v[ok], dist[ok]):
                    fx = self.dynamics.next_states(t, x[None, :dS], x[None, dS:], xi, self.state_box)
                    fy = self.dynamics.next_states(t, y[None, :dS], y[None, dS:], xi, self.state_box)
                    worst = max(worst, float(np.max(np.linalg.norm(fx - fy, axis=-1)) / d))
        if self.L is not None and worst > self.L * (1 + 1e-9):
            raise ConfigError(f"declared L = {self.L} is below the sampled slope {worst:.6g}")
        return worst


@dataclass(frozen=True)
class SocGrid:
    hS: float
    hA: float
    xgrid: XGrid

    def __post_init__(self):
        if not (self.hS > 0 and self.hA > 0):
            raise ConfigError("grid spacings must be positive")

    @staticmethod
    def _axes(box, h):
        axes = []
        for lo, hi in box:
            n = max(1, int(math.ceil((hi - lo) / h - 1e-12)))
            axes.append(np.linspace(lo, hi, n + 1) if hi > lo else np.array([lo]))
        return axes

    def state_axes(self, problem: SocProblem):
        return self._axes(problem.state_box, self.hS)

    def action_axes(self, problem: SocProblem):
        return self._axes(problem.action_box, self.hA)

    @staticmethod
    def product(axes) -> np.ndarray:
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def halved(self) -> "SocGrid":
        xg = self.xgrid
        x = XGrid.lattice(2 * xg.K, xg.x0) if xg.mode == "lattice" else XGrid.uniform(xg.h / 2, xg.x0)
        return SocGrid(self.hS / 2, self.hA / 2, x)


def multilinear_weights(axes, points: np.ndarray):
    """Corner indices (flat) and weights for multilinear interpolation.

    ``points`` has shape (..., d). Returns arrays of shape (..., 2**d).
    """
    d = len(axes)
    shape = points.shape[:-1]
    idx, wts = [], []
    for k, ax in enumerate(axes):
        i, w = interp_weights(ax, points[..., k])
        idx.append(i)
        wts.append(w)
    sizes = [ax.size for ax in axes]
    strides = np.cumprod([1] + sizes[::-1][:-1])[::-1]
    flat_all, w_all = [], []
    for corner in itertools.product((0, 1), repeat=d):
        flat = np.zeros(shape, dtype=np.intp)
        w = np.ones(shape)
        for k, bit in enumerate(corner):
            if sizes[k] == 1:
                if bit:
                    w = w * 0.0
                continue
            flat = flat + (idx[k] + bit) * strides[k]
            w = w * (wts[k] if bit else 1.0 - wts[k])
        flat_all.append(flat)
        w_all.append(w)
    return np.stack(flat_all, axis=-1), np.stack(w_all, axis=-1)


def to_mdp(problem: SocProblem, grid: SocGrid) -> FiniteHorizonMdp:
    """Finite MDP over grid nodes with interpolation-weighted scenario kernels."""
    s_axes = grid.state_axes(problem)
    a_axes = grid.action_axes(problem)
    S = SocGrid.product(s_axes)
    A = SocGrid.product(a_axes)
    nS, nA = S.shape[0], A.shape[0]
    box = problem.state_box
    costs = []
    for t in range(problem.T + 1):
        c = problem.weights[t] * problem.cost.evaluate(t, S, A)
        if c.min() < 0 or c.max() > 1:
            raise ConfigError(f"stage {t} cost leaves [0, 1]")
        costs.append(c)
    kernels = []
    for t in range(problem.T):
        xi, p = problem.noise[t]
        nxt = problem.dynamics.next_states(t, S, A, xi, box)
        outside = (nxt < box[:, 0] - BOX_TOL) | (nxt > box[:, 1] + BOX_TOL)
        if np.any(outside):
            i, j, k = map(int, np.argwhere(outside.any(axis=-1))[0])
            raise DynamicsError(
                f"dynamics leave the state box at t={t}, s={S[i].tolist()}, a={A[j].tolist()}, "
                f"xi={xi[k].tolist()}: {nxt[i, j, k].tolist()}")
        flat, w = multilinear_weights(s_axes, nxt)  # (nS, nA, k, 2^d)
        w = w * p[None, None, :, None]
        rows = np.broadcast_to(np.arange(nS * nA).reshape(nS, nA, 1, 1), flat.shape)
        keep = w > 0
        P = sp.csr_matrix((w[keep], (rows[keep], flat[keep])), shape=(nS * nA, nS))
        kernels.append(P)
    return FiniteHorizonMdp(problem.T, costs, kernels)


def _state_weights(problem: SocProblem, grid: SocGrid, s0) -> tuple:
    s0 = np.asarray(s0, float).reshape(1, -1)
    if s0.shape[1] != problem.d_S:
        raise ConfigError("initial state has the wrong dimension")
    flat, w = multilinear_weights(grid.state_axes(problem), s0)
    return flat[0], w[0]


def soc_dp_optimize(problem: SocProblem, family: RiskFamily, theta, grid: SocGrid):
    """Optimal augmented values over (state node, x node) and the greedy policy."""
    return dp_optimize(to_mdp(problem, grid), family, theta, grid.xgrid)


def soc_dp_evaluate(problem: SocProblem, policy: AugPolicy, family: RiskFamily, theta,
                    grid: SocGrid) -> ValueTable:
    """Augmented values of a grid policy; actions index the action-grid nodes."""
    return dp_evaluate(to_mdp(problem, grid), policy, family, theta, grid.xgrid)


def soc_optimal_risk(problem: SocProblem, family: RiskFamily, theta_grid: ThetaGrid | None,
                     s0, grid: SocGrid, mdp: FiniteHorizonMdp | None = None,
                     policy: AugPolicy | None = None):
    """Risk from ``s0`` (interpolated between state nodes); ``(risk, theta_star)``.

    With ``policy`` the policy's risk is returned instead of the optimum.
    """
    mdp = mdp or to_mdp(problem, grid)
    theta_grid = theta_grid or family.default_grid(mdp.cost_bound())
    flat, w = _state_weights(problem, grid, s0)

    def objective(thetas):
        return batch_initial_table(mdp, family, thetas, grid.xgrid, policy)[:, flat] @ w

    return minimize_over_theta(objective, theta_grid, family.box(mdp.cost_bound()),
                               refine=policy is not None)


def soc_moduli(T: int, t: int, L_C: float, L: float, L_pi: float | None = None):
    """Lipschitz moduli ``(L_X, L_S)`` of the augmented values at stage t.

    Without ``L_pi`` the optimal-value recursion is used; otherwise the
    recursion for an ``L_pi``-Lipschitz policy.
    """
    if not 0 <= t <= T:
        raise ConfigError("need 0 <= t <= T")
    if L_pi is None:
        L_S = L * L_C
        for k in range(T - 1, t - 1, -1):
            L_S = (L_C + opt_modulus(T, k + 1, L_C) + L_S) * L
        return opt_modulus(T, t, L_C), L_S
    L_S = L_pi * L_C + L * L_C
    for k in range(T - 1, t - 1, -1):
        L_S = (T - k + 1) * L_pi * L_C + (L_C + eval_modulus(T, k + 1, L_C, L_pi) + L_S) * L
    return eval_modulus(T, t, L_C, L_pi), L_S


def refinement_bound(problem: SocProblem, family: RiskFamily, grid: SocGrid) -> float:
    """``(L_S^0 h_S + L_S^0 h_A + L_X^0 h) T`` for the given grid."""
    L_X, L_S = soc_moduli(problem.T, 0, family.L_C, problem.L)
    return (L_S * grid.hS + L_S * grid.hA + L_X * grid.xgrid.spacing) * max(problem.T, 1)


# ---------------------------------------------------------------------------
# embedding finite MDPs


def embed_mdp(mdp: FiniteHorizonMdp, xgrid: XGrid):
    """Encode a finite MDP as a control problem on integer grid points.

    States and actions become the integers 0..S-1 and 0..A-1 (spacing 1).
    Each stage's scenarios are the cells between the union of the kernel
    rows' CDF breakpoints; a scenario maps (s, a) to the inverse CDF of row
    (s, a) at the cell midpoint, so every row is reproduced exactly.
    Stages with fewer states or actions are padded with unreachable states
    and duplicated actions.
    Returns ``(problem, grid)``.
    """
    S_max = max(mdp.n_states(t) for t in range(mdp.T + 1))
    A_max = max(mdp.n_actions(t) for t in range(mdp.T + 1))
    costs, tables, noise = [], [], []
    for t in range(mdp.T + 1):
        S, A = mdp.costs[t].shape
        c = np.zeros((S_max, A_max))
        c[:S, :A] = mdp.costs[t]
        c[:S, A:] = mdp.costs[t][:, -1:]
        costs.append(c)
    for t in range(mdp.T):
        P = mdp.kernel_dense(t)
        S, A, S_next = P.shape
        cdf = np.cumsum(P, axis=2)
        cdf[..., -1] = 1.0
        br = np.unique(np.concatenate([[0.0], cdf.ravel()]))
        br = br[(br >= 0) & (br <= 1)]
        probs = np.diff(br)
        mids = (br[:-1] + br[1:]) / 2
        tab = np.zeros((S_max, A_max, mids.size))
        for s in range(S_max):
            for a in range(A_max):
                if s >= S:
                    tab[s, a, :] = min(s, S_next - 1)
                    continue
                aa = min(a, A - 1)
                idx = np.searchsorted(cdf[s, aa], mids, side="left")
                tab[s, a, :] = np.minimum(idx, S_next - 1)
        tables.append(tab)
        noise.append((mids[:, None], probs / probs.sum()))
    slope = 0.0
    for c in costs:
        slope = max(slope, float(np.abs(np.diff(c, axis=0)).max(initial=0)),
                    float(np.abs(np.diff(c, axis=1)).max(initial=0)))
    for tab in tables:
        slope = max(slope, float(np.abs(np.diff(tab, axis=0)).max(initial=0)),
                    float(np.abs(np.diff(tab, axis=1)).max(initial=0)))
    problem = SocProblem(
        mdp.T, [[0.0, S_max - 1.0]], [[0.0, A_max - 1.0]], TableDynamics(tables),
        CostSpec("table", table=costs), noise, L=max(slope, 1e-12))
    return problem, SocGrid(1.0, 1.0, xgrid)
