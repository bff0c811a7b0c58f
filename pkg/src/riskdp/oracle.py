"""Brute-force ground truth for tiny instances.

Accumulated costs are tracked as exact rationals, so atoms merge without
float-equality hazards. Policies are enumerated over the deterministic class
measurable in (stage, state, accumulated cost).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.linalg import null_space

from .errors import ConfigError, InstanceTooLargeError
from .mdp import AugPolicy, FiniteHorizonMdp
from .risk import DiscreteDist, PhiSpec, RiskFamily, ThetaGrid, risk_of_distribution

ATOM_CAP = 100_000
POLICY_CAP = 1_000_000


def _frac_costs(mdp: FiniteHorizonMdp):
    return [[[Fraction(float(v)) for v in row] for row in c] for c in mdp.costs]


def _supports(mdp: FiniteHorizonMdp):
    """Per stage, per (s, a): list of (s', prob) with positive probability."""
    out = []
    for t in range(mdp.T):
        P = mdp.kernel_dense(t)
        out.append([[[(int(k), float(P[s, a, k])) for k in np.flatnonzero(P[s, a] > 0)]
                     for a in range(P.shape[1])] for s in range(P.shape[0])])
    return out


def _policy_probs(policy, t, s, x: Fraction, n_actions: int) -> np.ndarray:
    if isinstance(policy, AugPolicy):
        nodes = policy.nodes[t]
        j = int(np.argmin(np.abs(nodes - float(x))))
        if abs(nodes[j] - float(x)) > 1e-9:
            raise ConfigError(f"policy has no node at x = {x} (stage {t}); use a lattice grid")
        if policy.deterministic:
            out = np.zeros(n_actions)
            out[policy.actions[t][s, j]] = 1.0
            return out
        return policy.probs[t][s, j]
    a = policy(t, s, x)
    if np.ndim(a) == 0:
        out = np.zeros(n_actions)
        out[int(a)] = 1.0
        return out
    return np.asarray(a, float)


def total_cost_atoms(mdp: FiniteHorizonMdp, policy, s0: int) -> dict:
    """Exact law of the total cost as ``{Fraction: probability}``.

    ``policy`` is an AugPolicy on a lattice grid or a callable
    ``(t, s, x) -> action or action distribution``.
    """
    costs = _frac_costs(mdp)
    supp = _supports(mdp)
    front = {(s0, Fraction(0)): 1.0}
    for t in range(mdp.T + 1):
        A = mdp.n_actions(t)
        nxt: dict = {}
        for (s, x), p in front.items():
            probs = _policy_probs(policy, t, s, x, A)
            for a in np.flatnonzero(probs > 0):
                xn = x + costs[t][s][a]
                pa = p * float(probs[a])
                if t == mdp.T:
                    nxt[xn] = nxt.get(xn, 0.0) + pa
                    continue
                for s2, q in supp[t][s][a]:
                    key = (s2, xn)
                    nxt[key] = nxt.get(key, 0.0) + pa * q
        if len(nxt) > ATOM_CAP:
            raise InstanceTooLargeError(f"atom front at stage {t} exceeds {ATOM_CAP}")
        front = nxt
    return front


def _to_dist(atoms: dict) -> DiscreteDist:
    keys = sorted(atoms)
    p = np.array([atoms[k] for k in keys])
    return DiscreteDist(np.array([float(k) for k in keys]), p / p.sum())


def exact_total_cost_distribution(mdp: FiniteHorizonMdp, policy, s0: int) -> DiscreteDist:
    """Finite distribution of the total cost under ``policy`` from ``s0``."""
    return _to_dist(total_cost_atoms(mdp, policy, s0))


def cvar_closed_form(dist: DiscreteDist, alpha: float) -> float:
    """Average of the upper alpha tail, splitting the boundary atom fractionally."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError("alpha must lie in (0, 1]")
    order = np.argsort(-dist.values, kind="stable")
    v, p = dist.values[order], dist.probs[order]
    remaining, acc = alpha, 0.0
    for vi, pi in zip(v, p):
        take = min(pi, remaining)
        acc += take * vi
        remaining -= take
        if remaining <= 0:
            break
    if remaining > 1e-12:
        # only reachable through rounding in the probabilities
        acc += remaining * v[-1]
    return float(acc / alpha)


@dataclass
class OraclePolicy:
    """Deterministic policy stored as explicit decisions at (t, s, x)."""

    decisions: dict = field(default_factory=dict)
    terminal: list | None = None

    def __call__(self, t, s, x):
        key = (t, s, Fraction(x))
        if key in self.decisions:
            return self.decisions[key]
        if self.terminal is not None and t == len(self.terminal) - 1:
            return self.terminal[t][s]
        return 0

    def to_aug(self, mdp: FiniteHorizonMdp, nodes: list) -> AugPolicy:
        """Lattice AugPolicy agreeing with the decisions on reached atoms."""
        actions = []
        for t in range(mdp.T + 1):
            a = np.zeros((mdp.n_states(t), nodes[t].size), dtype=np.intp)
            if t == mdp.T:
                a[:] = np.argmin(mdp.costs[t], axis=1)[:, None]
            actions.append(a)
        for (t, s, x), act in self.decisions.items():
            j = int(np.argmin(np.abs(nodes[t] - float(x))))
            actions[t][s, j] = act
        return AugPolicy(nodes, actions=actions)


def enumerate_policies(mdp: FiniteHorizonMdp, s0: int, cap: int = POLICY_CAP):
    """Yield ``(decisions, atoms)`` for every deterministic augmented policy.

    Only reached (s, x) pairs get decisions. The final stage always takes a
    cheapest action: every family in scope is monotone in the total cost,
    so any other terminal choice is dominated path by path.
    """
    costs = _frac_costs(mdp)
    supp = _supports(mdp)
    term = [int(np.argmin(row)) for row in mdp.costs[mdp.T]]
    count = 0

    def rec(t, front, decisions):
        nonlocal count
        if t == mdp.T:
            count += 1
            if count > cap:
                raise InstanceTooLargeError(f"more than {cap} policies to enumerate")
            atoms: dict = {}
            dec = dict(decisions)
            for (s, x), p in front.items():
                a = term[s]
                dec[(t, s, x)] = a
                xn = x + costs[t][s][a]
                atoms[xn] = atoms.get(xn, 0.0) + p
            yield dec, atoms
            return
        keys = sorted(front)
        for choice in itertools.product(range(mdp.n_actions(t)), repeat=len(keys)):
            nxt: dict = {}
            for (s, x), a in zip(keys, choice):
                p = front[(s, x)]
                xn = x + costs[t][s][a]
                for s2, q in supp[t][s][a]:
                    nxt[(s2, xn)] = nxt.get((s2, xn), 0.0) + p * q
            if len(nxt) > ATOM_CAP:
                raise InstanceTooLargeError(f"atom front at stage {t + 1} exceeds {ATOM_CAP}")
            dec = dict(decisions)
            dec.update({(t, s, x): a for (s, x), a in zip(keys, choice)})
            yield from rec(t + 1, nxt, dec)

    yield from rec(0, {(s0, Fraction(0)): 1.0}, {})


def oracle_optimal_risk(mdp: FiniteHorizonMdp, family: RiskFamily, theta_grid: ThetaGrid | None,
                        s0: int, cap: int = POLICY_CAP):
    """Exhaustive minimum of the risk over deterministic augmented policies.

    With a theta grid, each policy's risk is the grid minimum of
    ``E[f_theta(X)]`` (no refinement). Without one, CVaR uses the sorted-tail
    closed form and the phi family uses ``risk_of_distribution``.
    Returns ``(risk, OraclePolicy)``.
    """
    pts = theta_grid.points if theta_grid is not None else None
    best, best_dec = math.inf, None
    for dec, atoms in enumerate_policies(mdp, s0, cap):
        dist = _to_dist(atoms)
        if pts is not None:
            val = float(np.min(family.values(pts, dist.values) @ dist.probs))
        elif family.kind == "cvar":
            val = cvar_closed_form(dist, family.alpha)
        else:
            val = risk_of_distribution(family, dist)[0]
        if val < best:
            best, best_dec = val, dec
    term = [None] * mdp.T + [[int(np.argmin(row)) for row in mdp.costs[mdp.T]]]
    return best, OraclePolicy(best_dec, term)


# ---------------------------------------------------------------------------
# primal phi-divergence risk


def _radii(phi: PhiSpec, p: np.ndarray, U: np.ndarray, tau: float, L: float) -> np.ndarray:
    """Largest r with ``1 + r u`` feasible for each row u of ``U``, by bisection.

    The feasible end of each bracket is kept, so every returned radius is
    feasible.
    """
    with np.errstate(divide="ignore"):
        caps = np.where(U > 0, (L - 1.0) / U, np.where(U < 0, -1.0 / U, np.inf))
    r_hi = caps.min(axis=1)
    if not np.all(np.isfinite(r_hi)):
        raise ConfigError("degenerate direction")

    def div(r):
        return phi(np.clip(1.0 + r[:, None] * U, 0.0, L)) @ p

    lo, hi = np.zeros_like(r_hi), r_hi.copy()
    done = div(r_hi) <= tau
    lo[done] = r_hi[done]
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        ok = div(mid) <= tau
        lo = np.where(done | ~ok, lo, mid)
        hi = np.where(done | ok, hi, mid)
    return lo


def _radius(phi: PhiSpec, p: np.ndarray, u: np.ndarray, tau: float, L: float) -> float:
    return float(_radii(phi, p, u[None, :], tau, L)[0])


def primal_phi_risk(dist: DiscreteDist, phi, tau: float, L: float, warm=None,
                    n_angles: int = 3600, starts: int = 16, seed: int = 0):
    """Worst-case expectation over densities ``zeta`` with ``E[phi(zeta)] <= tau``, ``zeta <= L``.

    Returns ``(value, zeta)`` where ``zeta`` is feasible, so ``value`` is a
    lower bound on the truncated robust risk.

    The feasible set is convex and contains the all-ones density. A linear
    objective peaks on its boundary, so the search runs over directions
    ``u`` (with ``E[u] = 0``) and walks to the boundary by bisection: both
    rays for two atoms, a dense angle grid plus golden refinement for three,
    and multi-start local search on the sphere beyond that. ``warm`` may
    hold previous densities whose directions are tried first; feasible sets
    grow with L, so warm starts from smaller L keep the value monotone.
    """
    if isinstance(phi, str):
        phi = PhiSpec.named(phi)
    if tau < 0:
        raise ConfigError("divergence budget tau must be >= 0")
    if not L >= 1:
        raise ConfigError("truncation level L must be >= 1")
    v, p = dist.values, dist.probs
    n = v.size
    if n > 6:
        raise ConfigError("primal solver supports at most 6 atoms")
    phi1 = float(phi(1.0))
    if phi1 > tau + 1e-15:
        raise ConfigError("infeasible: the reference density violates the budget")
    ones = np.ones(n)
    mean = float(p @ v)
    if tau == 0 or L == 1 or n == 1 or np.ptp(v) == 0:
        return mean, ones

    basis = null_space(p[None, :])  # columns span {u : E[u] = 0}

    def point(coef):
        u = basis @ coef
        nu = np.linalg.norm(u)
        if nu == 0:
            return ones
        u = u / nu
        return 1.0 + _radius(phi, p, u, tau, L) * u

    def value(z):
        return float(p @ (z * v))

    cands = []
    for z in warm or []:
        z = np.asarray(z, float)
        if z.shape == (n,) and np.any(z != 1):
            cands.append(point(basis.T @ (z - 1.0)))

    if n == 2:
        cands += [point(np.array([1.0])), point(np.array([-1.0]))]
    elif n == 3:
        ang = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
        U = np.stack([np.cos(ang), np.sin(ang)], axis=1) @ basis.T
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        Z = 1.0 + _radii(phi, p, U, tau, L)[:, None] * U
        k = int(np.argmax(Z @ (p * v)))
        step = ang[1] - ang[0]
        lo, hi = ang[k] - step, ang[k] + step
        g = (math.sqrt(5) - 1) / 2
        f = lambda a: value(point(np.array([math.cos(a), math.sin(a)])))
        c, d = hi - g * (hi - lo), lo + g * (hi - lo)
        fc, fd = f(c), f(d)
        while hi - lo > 1e-12:
            if fc >= fd:
                hi, d, fd = d, c, fc
                c = hi - g * (hi - lo)
                fc = f(c)
            else:
                lo, c, fc = c, d, fd
                d = lo + g * (hi - lo)
                fd = f(d)
        cands += [point(np.array([math.cos(ang[k]), math.sin(ang[k])])),
                  point(np.array([math.cos(c), math.sin(c)]))]
    else:
        rng = np.random.default_rng(seed)
        dim = basis.shape[1]
        inits = [basis.T @ (v - mean)] + list(rng.standard_normal((starts - 1, dim)))
        for w in inits:
            w = w / np.linalg.norm(w)
            z = point(w)
            best = value(z)
            step = 0.5
            while step > 1e-10:
                improved = False
                for e in np.vstack([np.eye(dim), -np.eye(dim), rng.standard_normal((dim, dim))]):
                    w2 = w + step * e / np.linalg.norm(e)
                    w2 /= np.linalg.norm(w2)
                    z2 = point(w2)
                    if value(z2) > best:
                        w, z, best, improved = w2, z2, value(z2), True
                        break
                if not improved:
                    step /= 2
            cands.append(z)
    cands.append(ones)
    vals = [value(z) for z in cands]
    k = int(np.argmax(vals))
    return vals[k], cands[k]
