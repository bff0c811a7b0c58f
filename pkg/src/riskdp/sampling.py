"""Generative-model sampling, empirical kernels, rate sweeps and sample-size formulas.

Every (replicate, stage, state, action) pair owns an independent Philox
stream derived from the seed, so an empirical kernel does not depend on
the order in which pairs are sampled, and a run with ``n`` draws sees a
prefix of the run with ``2n`` draws.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError, RiskDPError
from .horizon import horizon_for
from .mdp import AugPolicy, FiniteHorizonMdp, XGrid, eval_modulus, opt_modulus, optimal_risk, policy_risk
from .risk import RiskFamily, ThetaGrid
from .soc import SocGrid, SocProblem, soc_moduli, soc_optimal_risk

log = logging.getLogger(__name__)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the given integer key path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), *key])))


@dataclass(frozen=True)
class GenerativeModel:
    """Sampling access to a ground-truth MDP or control problem."""

    truth: object
    seed: int = 0

    def draw_next_states(self, rep: int, t: int, s: int, a: int, n: int) -> np.ndarray:
        P = self.truth.kernel_dense(t)[s, a]
        cdf = np.cumsum(P)
        u = stream(self.seed, rep, t, s, a).random(n)
        return np.minimum(np.searchsorted(cdf, u, side="right"), P.size - 1)

    def draw_scenarios(self, rep: int, t: int, n: int) -> np.ndarray:
        _, p = self.truth.noise[t]
        u = stream(self.seed, rep, t).random(n)
        return np.minimum(np.searchsorted(np.cumsum(p), u, side="right"), p.size - 1)


def build_empirical_mdp(model: GenerativeModel, n: int, rep: int = 0) -> FiniteHorizonMdp:
    """Kernel rows replaced by frequencies of ``n`` draws per (t, s, a); costs unchanged."""
    if n < 1:
        raise ConfigError("need at least one sample per pair")
    mdp = model.truth
    kernels = []
    for t in range(mdp.T):
        S, A = mdp.costs[t].shape
        S_next = mdp.n_states(t + 1)
        P_hat = np.zeros((S, A, S_next))
        for s in range(S):
            for a in range(A):
                draws = model.draw_next_states(rep, t, s, a, n)
                P_hat[s, a] = np.bincount(draws, minlength=S_next) / n
        kernels.append(P_hat)
    return FiniteHorizonMdp(mdp.T, [c.copy() for c in mdp.costs], kernels)


def build_empirical_soc(model: GenerativeModel, n: int, rep: int = 0) -> SocProblem:
    """Scenario probabilities replaced by frequencies of ``n`` draws per stage."""
    if n < 1:
        raise ConfigError("need at least one sample per stage")
    prob = model.truth
    noise = []
    for t in range(prob.T):
        xi, p = prob.noise[t]
        counts = np.bincount(model.draw_scenarios(rep, t, n), minlength=p.size)
        keep = counts > 0
        noise.append((xi[keep], counts[keep] / n))
    return SocProblem(prob.T, prob.state_box, prob.action_box, prob.dynamics, prob.cost, noise,
                      prob.L, prob.weights)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    rows: list  # (n, rep, error, seconds)
    truth: float
    slope: float | None = None
    intercept: float | None = None
    slope_ci: tuple | None = None
    partial: bool = False
    medians: dict = field(default_factory=dict)

    def fit(self) -> None:
        """Least-squares slope of log median error against log n."""
        by_n: dict = {}
        for n, _, err, _ in self.rows:
            by_n.setdefault(n, []).append(err)
        self.medians = {n: float(np.median(v)) for n, v in sorted(by_n.items())}
        pts = [(math.log(n), math.log(m)) for n, m in self.medians.items() if m > 0]
        if len(pts) < 2 or len(pts) < len(self.medians):
            # zero medians carry no rate information
            self.slope = self.intercept = self.slope_ci = None
            return
        x, y = np.array(pts).T
        reg = stats.linregress(x, y)
        self.slope, self.intercept = float(reg.slope), float(reg.intercept)
        if len(pts) > 2:
            q = stats.t.ppf(0.975, len(pts) - 2)
            self.slope_ci = (self.slope - q * reg.stderr, self.slope + q * reg.stderr)
        else:
            self.slope_ci = None


def _solve(model, kind, family, theta_grid, s0, grid, policy, n, rep):
    if isinstance(model.truth, SocProblem):
        prob = build_empirical_soc(model, n, rep)
        return soc_optimal_risk(prob, family, theta_grid, s0, grid, policy=policy)[0]
    mdp = build_empirical_mdp(model, n, rep)
    if kind == "opt":
        return optimal_risk(mdp, family, theta_grid, s0, grid)[0]
    return policy_risk(mdp, policy, family, theta_grid, s0, grid)[0]


def _job(args):
    model, kind, family, theta_grid, s0, grid, policy, truth, n, rep, timing = args
    start = time.perf_counter()
    value = _solve(model, kind, family, theta_grid, s0, grid, policy, n, rep)
    secs = time.perf_counter() - start if timing else None
    return n, rep, abs(value - truth), secs


def _truth(model, kind, family, theta_grid, s0, grid, policy):
    if isinstance(model.truth, SocProblem):
        return soc_optimal_risk(model.truth, family, theta_grid, s0, grid, policy=policy)[0]
    if kind == "opt":
        return optimal_risk(model.truth, family, theta_grid, s0, grid)[0]
    return policy_risk(model.truth, policy, family, theta_grid, s0, grid)[0]


def _sweep(model, kind, family, theta_grid, n_list, reps, s0, grid, policy, jobs, timing):
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])) or not n_list or n_list[0] < 1:
        raise ConfigError("n_list must be positive and strictly increasing")
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    truth = _truth(model, kind, family, theta_grid, s0, grid, policy)
    tasks = [(model, kind, family, theta_grid, s0, grid, policy, truth, n, r, timing)
             for n in n_list for r in range(reps)]
    rows, partial = [], False
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(_job, tasks))
        else:
            rows = [_job(t) for t in tasks]
    except RiskDPError as exc:
        log.error("sweep aborted: %s", exc)
        partial = True
        rows = rows or []
    rows.sort(key=lambda r: (r[0], r[1]))
    result = SweepResult(rows, truth, partial=partial)
    result.fit()
    return result


def sweep_opt(model: GenerativeModel, family: RiskFamily, theta_grid: ThetaGrid | None, n_list,
              reps: int, s0, grid, jobs: int = 1, timing: bool = False) -> SweepResult:
    """Errors of the empirical optimal risk against the exact optimum, per (n, replicate)."""
    return _sweep(model, "opt", family, theta_grid, n_list, reps, s0, grid, None, jobs, timing)


def sweep_eval(model: GenerativeModel, policy: AugPolicy, family: RiskFamily,
               theta_grid: ThetaGrid | None, n_list, reps: int, s0, grid, jobs: int = 1,
               timing: bool = False) -> SweepResult:
    """Errors of the empirical risk of a fixed policy against its exact risk."""
    return _sweep(model, "eval", family, theta_grid, n_list, reps, s0, grid, policy, jobs, timing)


# ---------------------------------------------------------------------------
# sample sizes


def _check(eps, delta, **positive):
    if not eps > 0:
        raise ConfigError("eps must be positive")
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    for name, v in positive.items():
        if not v > 0:
            raise ConfigError(f"{name} must be positive")


def _hoeffding_n(T: int, L_C: float, eps: float, log_count: float, delta: float) -> int:
    """``ceil(8 T^4 L_C^2 / eps^2 * ln(count / delta))``, at least 1."""
    n = 8.0 * T ** 4 * L_C ** 2 / eps ** 2 * (log_count - math.log(delta))
    return max(1, int(math.ceil(n)))


def sample_size_eval(T, L_C, L_Theta, L_pi, d, S, A, R_Theta, eps, delta) -> int:
    """Samples per pair so a policy's empirical risk is eps-accurate w.p. 1 - delta.

    Proof-calibrated constants: ``eps_X = eps / (8 T L^{pi,0})``,
    ``eps_Theta = eps / (8 T L_Theta)`` and union bound over
    ``2 T |S| |A| (T / eps_X) (3 R_Theta / eps_Theta)^d`` events.
    """
    _check(eps, delta, T=T, L_C=L_C, L_Theta=L_Theta, d=d, S=S, A=A, R_Theta=R_Theta)
    if L_pi < 0:
        raise ConfigError("L_pi must be non-negative")
    eps_X = eps / (8 * T * eval_modulus(T, 0, L_C, L_pi))
    eps_Th = eps / (8 * T * L_Theta)
    log_count = (math.log(2 * T * S * A) + math.log(T / eps_X)
                 + d * math.log(3 * R_Theta / eps_Th))
    return _hoeffding_n(T, L_C, eps, log_count, delta)


def sample_size_opt(T, L_C, L_Theta, d, S, A, R_Theta, eps, delta) -> int:
    """As :func:`sample_size_eval` with the optimal-value modulus ``2 (T+1) L_C``."""
    _check(eps, delta, T=T, L_C=L_C, L_Theta=L_Theta, d=d, S=S, A=A, R_Theta=R_Theta)
    eps_X = eps / (8 * T * opt_modulus(T, 0, L_C))
    eps_Th = eps / (8 * T * L_Theta)
    log_count = (math.log(2 * T * S * A) + math.log(T / eps_X)
                 + d * math.log(3 * R_Theta / eps_Th))
    return _hoeffding_n(T, L_C, eps, log_count, delta)


def sample_size_soc(T, L_C, L_Theta, L, d, d_S, d_A, R, R_Theta, eps, delta, L_pi=None) -> int:
    """Scenario samples per stage for the control problem.

    Four nets (state, action, accumulated cost, parameter) each get radius
    ``eps / (16 T * modulus)`` so their discretization terms add to
    ``eps / (2T)``; the remaining half goes to the Hoeffding deviation.
    """
    _check(eps, delta, T=T, L_C=L_C, L_Theta=L_Theta, L=L, d=d, d_S=d_S, d_A=d_A, R=R,
           R_Theta=R_Theta)
    L_X, L_S = soc_moduli(T, 0, L_C, L, L_pi)
    eps_S = eps / (16 * T * L_S)
    eps_A = eps / (16 * T * L_S)
    eps_X = eps / (16 * T * L_X)
    eps_Th = eps / (16 * T * L_Theta)
    log_count = (math.log(2 * T) + d_S * math.log(3 * R / eps_S) + d_A * math.log(3 * R / eps_A)
                 + math.log(T / eps_X) + d * math.log(3 * R_Theta / eps_Th))
    return _hoeffding_n(T, L_C, eps, log_count, delta)


def sample_size_infinite(gamma, L_C, L_Theta, d, S, A, R_Theta, eps, delta, L_pi=None):
    """``(T, n)`` for a discounted problem: half of eps to truncation, half to sampling.

    With ``L_pi`` the evaluation bound is used, otherwise the optimization bound.
    """
    _check(eps, delta, L_C=L_C)
    T = horizon_for(gamma, L_C, eps / 2)
    if L_pi is None:
        n = sample_size_opt(T, L_C, L_Theta, d, S, A, R_Theta, eps / 2, delta)
    else:
        n = sample_size_eval(T, L_C, L_Theta, L_pi, d, S, A, R_Theta, eps / 2, delta)
    return T, n
