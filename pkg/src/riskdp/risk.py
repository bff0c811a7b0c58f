"""Risk-functional families f_theta and minimization over the parameter theta.

A family defines the risk of a random cost X as ``min_theta E[f_theta(X)]``.
Two families are supported:

* ``cvar``: ``f_theta(z) = theta + [z - theta]_+ / alpha``;
* ``phi``: the dual of a phi-divergence ball with density cap ``L``,
  ``f_(lam, mu)(z) = lam * tau + mu + (lam * phi_L)^*(z - mu)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import ConfigError, DomainError, InputError

LAMBDA_MIN = 1e-4
LAMBDA_MAX = 10.0
CONJ_TOL = 1e-10
DEFAULT_GRID_POINTS = 129

_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_min(fun, lo, hi, tol: float = 1e-10, max_iter: int = 200):
    """Minimize a unimodal function on ``[lo, hi]`` by golden-section search.

    Works elementwise on arrays: ``lo`` and ``hi`` broadcast together and
    ``fun`` must map an array of abscissae to an array of the same shape.
    The endpoints are compared against the interior result, so boundary
    minima are recovered exactly.

    Returns ``(x, fx)``.
    """
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    a, b = lo.copy(), hi.copy()
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = fun(c), fun(d)
    width = float(np.max(b - a)) if a.size else 0.0
    n_iter = 0
    if width > tol:
        n_iter = min(max_iter, int(math.ceil(math.log(tol / width) / math.log(_GOLD))) + 1)
    for _ in range(n_iter):
        left = fc <= fd
        na = np.where(left, a, c)
        nb = np.where(left, d, b)
        xn = np.where(left, nb - _GOLD * (nb - na), na + _GOLD * (nb - na))
        fn = fun(xn)
        c, fc, d, fd = (
            np.where(left, xn, d),
            np.where(left, fn, fd),
            np.where(left, c, xn),
            np.where(left, fc, fn),
        )
        a, b = na, nb
    x = np.where(fc <= fd, c, d)
    fx = np.minimum(fc, fd)
    for edge in (lo, hi):
        fe = fun(edge)
        better = fe < fx
        x = np.where(better, edge, x)
        fx = np.where(better, fe, fx)
    return x, fx


# ---------------------------------------------------------------------------
# phi-divergences


def _phi_kl(w):
    w = np.asarray(w, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)) - w + 1.0, 1.0)
    return np.where(w < 0, np.inf, out)


def _phi_chi2(w):
    w = np.asarray(w, float)
    return np.where(w < 0, np.inf, (w - 1.0) ** 2)


def _phi_tv(w):
    w = np.asarray(w, float)
    return np.where(w < 0, np.inf, np.abs(w - 1.0))


_BUILTIN_PHI = {
    "kl": (_phi_kl, True),
    "chi2": (_phi_chi2, True),
    "tv": (_phi_tv, False),
}


@dataclass(frozen=True)
class PhiSpec:
    """A convex divergence generator phi with phi(1) = 0 and phi = +inf on x < 0.

    Builtins: ``kl`` (w log w - w + 1), ``chi2`` ((w-1)^2), ``tv`` (|w-1|).
    All three also satisfy phi(0) = 1.
    """

    id: str
    func: Callable | None = field(default=None, compare=False)
    superlinear: bool = True

    def __post_init__(self):
        if self.id in _BUILTIN_PHI:
            fn, sup = _BUILTIN_PHI[self.id]
            object.__setattr__(self, "func", fn)
            object.__setattr__(self, "superlinear", sup)
        elif self.id == "custom":
            if self.func is None:
                raise ConfigError("custom phi needs a function")
        else:
            raise ConfigError(f"unknown phi {self.id!r}; expected kl, chi2, tv or custom")

    @classmethod
    def named(cls, name: str) -> "PhiSpec":
        aliases = {"chi-squared": "chi2", "chisquared": "chi2", "total_variation": "tv"}
        return cls(aliases.get(name.lower(), name.lower()))

    @classmethod
    def custom(cls, func: Callable, superlinear: bool = False) -> "PhiSpec":
        def wrapped(w):
            w = np.asarray(w, float)
            return np.where(w < 0, np.inf, func(np.maximum(w, 0.0)))

        return cls("custom", wrapped, superlinear)

    def __call__(self, w):
        return self.func(w)

    def validate(self, probes: int = 200, upper: float = 20.0, seed: int = 0) -> None:
        """Check midpoint convexity on random probe pairs and that 1 is a minimizer."""
        rng = np.random.default_rng(seed)
        u, v = rng.uniform(0.0, upper, size=(2, probes))
        mid = self((u + v) / 2)
        if np.any(mid > (self(u) + self(v)) / 2 + 1e-9):
            raise ConfigError(f"phi {self.id} fails midpoint convexity")
        if np.any(self(np.linspace(0.0, upper, 401)) < self(1.0) - 1e-12):
            raise ConfigError(f"phi {self.id} is not minimized at 1")


def _conjugate(phi: PhiSpec, lam, L: float, y):
    """Vectorized ``(lam * phi_L)^*(y)`` and its maximizer; no argument checks."""
    lam = np.asarray(lam, float)
    y = np.asarray(y, float)
    lam, y = np.broadcast_arrays(lam, y)
    if phi.id == "kl":
        r = y / lam
        if math.isfinite(L):
            w = np.exp(np.minimum(r, math.log(L)))
        else:
            with np.errstate(over="ignore"):
                w = np.exp(r)
        with np.errstate(over="ignore", invalid="ignore"):
            val = w * y - lam * _phi_kl(w)
            if not math.isfinite(L):
                val = np.where(np.isinf(w), np.inf, val)
        return val, w
    if phi.id == "chi2":
        w = np.clip(1.0 + y / (2.0 * lam), 0.0, L)
        with np.errstate(invalid="ignore"):
            val = w * y - lam * (w - 1.0) ** 2
        if not math.isfinite(L):
            val = np.where(np.isinf(w), np.inf, val)
        return val, w
    if phi.id == "tv":
        # concave piecewise-linear objective: maximum sits on a breakpoint
        cands = [np.zeros_like(y), np.ones_like(y)]
        if math.isfinite(L):
            cands.append(np.full_like(y, L))
        vals = np.stack([c * y - lam * np.abs(c - 1.0) for c in cands])
        idx = np.argmax(vals, axis=0)
        val = np.take_along_axis(vals, idx[None], 0)[0]
        w = np.take_along_axis(np.stack(cands), idx[None], 0)[0]
        if not math.isfinite(L):
            unbounded = y > lam
            val = np.where(unbounded, np.inf, val)
            w = np.where(unbounded, np.inf, w)
        return val, w
    if not math.isfinite(L):
        raise ConfigError("custom phi requires a finite truncation level")
    w, negval = golden_section_min(
        lambda t: -(t * y - lam * phi(t)), np.zeros_like(y), np.full_like(y, L), tol=CONJ_TOL
    )
    return -negval, w


def conjugate_truncated(phi: PhiSpec, lam, L: float, y):
    """Return ``(lam * phi_L)^*(y) = sup_{0 <= w <= L} w*y - lam*phi(w)``.

    Closed forms are used for ``kl`` and ``chi2`` (unconstrained maximizer
    clamped to ``[0, L]``) and ``tv`` (breakpoint enumeration); custom
    generators fall back to golden-section search with tolerance 1e-10.
    """
    lam_arr = np.asarray(lam, float)
    if np.any(lam_arr < LAMBDA_MIN):
        raise DomainError(f"lambda must be >= {LAMBDA_MIN}")
    if not L > 0:
        raise DomainError("truncation level L must be positive")
    val, _ = _conjugate(phi, lam, L, y)
    return val if np.ndim(val) else float(val)


# ---------------------------------------------------------------------------
# distributions and theta grids


@dataclass(frozen=True)
class DiscreteDist:
    """Finite distribution of a real random variable."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float).ravel()
        p = np.asarray(self.probs, float).ravel()
        if v.shape != p.shape or v.size == 0:
            raise ConfigError("distribution needs matching, non-empty values and probs")
        if not np.all(np.isfinite(v)):
            raise InputError("distribution values must be finite")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple[float, float]]) -> "DiscreteDist":
        merged: dict[float, float] = {}
        for v, p in atoms:
            merged[float(v)] = merged.get(float(v), 0.0) + float(p)
        keys = sorted(merged)
        return cls(np.array(keys), np.array([merged[k] for k in keys]))

    def mean(self) -> float:
        return float(self.values @ self.probs)

    def expect(self, fn) -> float:
        return float(np.asarray(fn(self.values)) @ self.probs)


@dataclass(frozen=True)
class ThetaGrid:
    """Axis-aligned product grid over the parameter box."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, float).ravel() for a in self.axes)
        if not axes or any(a.size == 0 for a in axes):
            raise ConfigError("theta grid must be non-empty on every axis")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, box, num: int = DEFAULT_GRID_POINTS) -> "ThetaGrid":
        box = np.asarray(box, float).reshape(-1, 2)
        return cls(tuple(np.linspace(lo, hi, num if hi > lo else 1) for lo, hi in box))

    @classmethod
    def with_step(cls, box, step: float) -> "ThetaGrid":
        box = np.asarray(box, float).reshape(-1, 2)
        axes = []
        for lo, hi in box:
            n = int(round((hi - lo) / step))
            axes.append(lo + step * np.arange(n + 1))
        return cls(tuple(axes))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def steps(self) -> np.ndarray:
        return np.array([a[1] - a[0] if a.size > 1 else 0.0 for a in self.axes])

    @property
    def max_step(self) -> float:
        return float(self.steps.max())

    @property
    def box(self) -> np.ndarray:
        return np.array([[a.min(), a.max()] for a in self.axes])


# ---------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class RiskFamily:
    kind: str
    alpha: float | None = None
    phi: PhiSpec | None = None
    tau: float = 0.0
    trunc_L: float = math.inf
    theta_box: tuple | None = None

    def __post_init__(self):
        if self.kind == "cvar":
            if self.alpha is None or not 0.0 < self.alpha <= 1.0:
                raise DomainError("CVaR level alpha must lie in (0, 1]")
        elif self.kind == "phi":
            if self.phi is None:
                raise ConfigError("phi family needs a divergence")
            if self.tau < 0:
                raise DomainError("divergence budget tau must be >= 0")
            if not self.trunc_L > 1:
                raise DomainError("truncation level L must exceed 1")
        else:
            raise ConfigError(f"unknown risk family {self.kind!r}")
        if self.theta_box is not None:
            box = np.asarray(self.theta_box, float).reshape(-1, 2)
            if box.shape[0] != self.theta_dim or np.any(box[:, 0] > box[:, 1]):
                raise ConfigError("theta_box must hold one [lo, hi] pair per parameter")
            if not np.all(np.isfinite(box)):
                raise ConfigError("theta_box must be bounded")
            if self.kind == "phi" and box[0, 0] < LAMBDA_MIN:
                raise DomainError(f"lambda lower bound must be >= {LAMBDA_MIN}")
            object.__setattr__(self, "theta_box", tuple(map(tuple, box.tolist())))

    @classmethod
    def cvar(cls, alpha: float, theta_box=None) -> "RiskFamily":
        return cls("cvar", alpha=alpha, theta_box=theta_box)

    @classmethod
    def phi_dual(cls, phi, tau: float, L: float = math.inf, theta_box=None) -> "RiskFamily":
        if isinstance(phi, str):
            phi = PhiSpec.named(phi)
        return cls("phi", phi=phi, tau=tau, trunc_L=L, theta_box=theta_box)

    @property
    def theta_dim(self) -> int:
        return 1 if self.kind == "cvar" else 2

    @property
    def L_C(self) -> float:
        """Lipschitz constant of f_theta in z."""
        if self.kind == "cvar":
            return 1.0 / self.alpha
        return float(self.trunc_L)

    @property
    def L_f(self) -> float:
        """Global Lipschitz constant in z, uniform over all theta."""
        return self.L_C

    @property
    def L_Theta(self) -> float:
        """Lipschitz constant of f_theta in theta (Euclidean norm).

        For the phi family the partial derivatives are ``tau - phi(w*)`` in
        lambda and ``1 - w*`` in mu, with the maximizer ``w*`` in ``[0, L]``.
        """
        if self.kind == "cvar":
            return 1.0 / self.alpha
        L = self.trunc_L
        if not math.isfinite(L):
            return math.inf
        phimax = float(max(self.phi(0.0), self.phi(L)))
        return math.hypot(max(self.tau, phimax), max(1.0, L - 1.0))

    def box(self, cost_bound: float) -> np.ndarray:
        """Parameter box; defaults derive from a bound on the total cost."""
        if self.theta_box is not None:
            return np.asarray(self.theta_box, float)
        if self.kind == "cvar":
            return np.array([[0.0, float(cost_bound)]])
        b = max(float(cost_bound), 1e-12)
        return np.array([[LAMBDA_MIN, LAMBDA_MAX], [-b, b]])

    def default_grid(self, cost_bound: float, num: int = DEFAULT_GRID_POINTS) -> ThetaGrid:
        return ThetaGrid.uniform(self.box(cost_bound), num)

    def values(self, thetas, z) -> np.ndarray:
        """Evaluate ``f_theta(z)`` for a batch of parameters.

        ``thetas`` has shape (m, d); the result has shape ``(m,) + z.shape``.
        No domain checks are made here.
        """
        thetas = np.atleast_2d(np.asarray(thetas, float))
        z = np.asarray(z, float)
        shape = (thetas.shape[0],) + (1,) * z.ndim
        if self.kind == "cvar":
            th = thetas[:, 0].reshape(shape)
            return th + np.maximum(z - th, 0.0) / self.alpha
        lam = thetas[:, 0].reshape(shape)
        mu = thetas[:, 1].reshape(shape)
        conj, _ = _conjugate(self.phi, lam, self.trunc_L, z - mu)
        return lam * self.tau + mu + conj

    def check_theta(self, theta, box=None) -> np.ndarray:
        theta = np.asarray(theta, float).ravel()
        if theta.size != self.theta_dim:
            raise DomainError(f"theta must have {self.theta_dim} components")
        if self.kind == "phi" and theta[0] < LAMBDA_MIN:
            raise DomainError(f"lambda must be >= {LAMBDA_MIN}")
        box = box if box is not None else self.theta_box
        if box is not None:
            box = np.asarray(box, float)
            if np.any(theta < box[:, 0] - 1e-12) or np.any(theta > box[:, 1] + 1e-12):
                raise DomainError(f"theta {theta.tolist()} outside box {box.tolist()}")
        return theta

    # serialization -------------------------------------------------------
    @classmethod
    def from_json(cls, spec: dict) -> "RiskFamily":
        kind = spec.get("kind")
        box = spec.get("theta_box")
        if kind == "cvar":
            return cls.cvar(float(spec["alpha"]), theta_box=box)
        if kind == "phi":
            L = spec.get("L")
            return cls.phi_dual(
                spec["phi"], float(spec.get("tau", 0.0)),
                math.inf if L is None else float(L), theta_box=box,
            )
        raise ConfigError(f"unknown risk kind {kind!r}")

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "cvar":
            out["alpha"] = self.alpha
        else:
            out.update(phi=self.phi.id, tau=self.tau)
            if math.isfinite(self.trunc_L):
                out["L"] = self.trunc_L
        if self.theta_box is not None:
            out["theta_box"] = [list(b) for b in self.theta_box]
        return out


def eval_f(family: RiskFamily, theta, z, box=None):
    """Evaluate ``f_theta(z)``, enforcing the parameter box and finite input."""
    theta = family.check_theta(theta, box)
    z_arr = np.asarray(z, float)
    if not np.all(np.isfinite(z_arr)):
        raise InputError("z must be finite")
    out = family.values(theta[None, :], z_arr)[0]
    return out if out.ndim else float(out)


def check_scaling(family: RiskFamily, theta, gamma: float, probes) -> float:
    """Max over probes of ``|f_theta(gamma x) - gamma f_{theta/gamma}(x)|``.

    Evaluated from the formula directly; theta/gamma may leave the box.
    """
    if not 0.0 < gamma <= 1.0:
        raise DomainError("gamma must lie in (0, 1]")
    theta = np.asarray(theta, float).reshape(1, -1)
    x = np.asarray(probes, float)
    lhs = family.values(theta, gamma * x)[0]
    rhs = gamma * family.values(theta / gamma, x)[0]
    return float(np.max(np.abs(lhs - rhs)))


# ---------------------------------------------------------------------------
# minimization over theta


_SQRT_EPS = math.sqrt(np.finfo(float).eps)


def _line_min(fn, lo: float, hi: float, tol: float):
    """Bounded Brent search on ``[lo, hi]``, endpoints included; returns ``(x, f(x))``."""
    best = min(((lo, fn(lo)), (hi, fn(hi))), key=lambda p: p[1])
    if hi > lo:
        res = optimize.minimize_scalar(fn, bounds=(lo, hi), method="bounded",
                                       options={"xatol": tol, "maxiter": 500})
        x = float(res.x)
        # Brent's stopping rule is relative (about sqrt(eps) |x|); polish to tol on that bracket
        slack = 3.0 * (_SQRT_EPS * abs(x) + tol)
        x, fx = golden_section_min(np.vectorize(fn, otypes=[float]), max(lo, x - slack),
                                   min(hi, x + slack), tol)
        x, fx = float(x), float(fx)
        for cand in ((float(res.x), float(res.fun)), (x, fx)):
            if cand[1] < best[1]:
                best = cand
    return best


def minimize_over_theta(objective, grid: ThetaGrid, box=None, refine: bool = True,
                        tol: float = 1e-10):
    """Minimize a batched objective over a theta grid, then refine locally.

    ``objective`` maps an (m, d) array of parameters to m values. After the
    grid pass, one-parameter problems get a bounded line search on the
    bracket one grid step either side of the best node. Two-parameter
    problems nest the line search (inner axis over the whole box), which is
    exact for jointly convex objectives. Refined points are only accepted
    when they improve on the grid value.
    """
    pts = grid.points
    vals = np.asarray(objective(pts), float)
    if vals.shape != (pts.shape[0],):
        raise ConfigError("objective must return one value per theta")
    finite = np.where(np.isnan(vals), np.inf, vals)
    k = int(np.argmin(finite))
    best_val, best = float(finite[k]), pts[k].copy()
    if not refine or not math.isfinite(best_val):
        return best_val, best
    box = np.asarray(box if box is not None else grid.box, float)
    steps = grid.steps

    def bracket(axis, centre):
        s = steps[axis] if steps[axis] > 0 else 0.0
        return max(box[axis, 0], centre - s), min(box[axis, 1], centre + s)

    def at(*theta):
        v = float(objective(np.array([theta]))[0])
        return v if not math.isnan(v) else math.inf

    if grid.dim == 1:
        x, fx = _line_min(at, *bracket(0, best[0]), tol)
        if fx < best_val:
            best_val, best = fx, np.array([x])
        return best_val, best

    if grid.dim == 2:
        lo1, hi1 = box[1]

        def inner(t0):
            return _line_min(lambda t1: at(t0, t1), lo1, hi1, tol)

        x0, _ = _line_min(lambda t0: inner(t0)[1], *bracket(0, best[0]), tol)
        x1, f = inner(x0)
        if f < best_val:
            best_val, best = f, np.array([x0, x1])
        return best_val, best

    raise ConfigError("refinement supports at most two parameters")


def risk_of_distribution(family: RiskFamily, dist: DiscreteDist, theta_grid: ThetaGrid | None = None,
                         refine: bool = True):
    """Risk ``min_theta E[f_theta(X)]`` of a finite distribution.

    Returns ``(value, theta_star)``. Without an explicit grid, CVaR searches
    the support hull and the phi family uses its default box.
    """
    v, p = dist.values[dist.probs > 0], dist.probs[dist.probs > 0]
    if theta_grid is None:
        if family.theta_box is None and family.kind == "cvar":
            # the minimizer is a quantile, so the support hull suffices
            box = np.array([[v.min(), v.max()]])
        else:
            box = family.box(float(np.max(np.abs(v))))
        theta_grid = ThetaGrid.uniform(box)
    box = np.asarray(family.theta_box, float) if family.theta_box is not None else theta_grid.box

    def objective(thetas):
        with np.errstate(invalid="ignore"):
            return family.values(thetas, v) @ p

    return minimize_over_theta(objective, theta_grid, box, refine)
