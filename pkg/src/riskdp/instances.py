"""Small reference instances used by the tests, the acceptance suite and the CLI examples."""

from __future__ import annotations

import numpy as np

from .horizon import InfiniteMdp
from .mdp import FiniteHorizonMdp
from .soc import CostSpec, LinearDynamics, SocProblem


def two_action_mdp() -> FiniteHorizonMdp:
    """One decision, then a terminal cost.

    At stage 0 action ``a`` costs 0 and moves to ``g`` or ``b`` with
    probability 1/2 each; action ``a'`` costs 0.6 and moves to ``g``.
    Stage 1 costs 0 in ``g`` and 1 in ``b``.
    """
    costs = [np.array([[0.0, 0.6]]), np.array([[0.0], [1.0]])]
    kernels = [np.array([[[0.5, 0.5], [1.0, 0.0]]])]
    return FiniteHorizonMdp(1, costs, kernels, state_labels=[["s"], ["g", "b"]],
                            action_labels=[["a", "a'"], ["stay"]])


def deterministic_chain(T: int, costs) -> FiniteHorizonMdp:
    """Single-state, single-action chain with the given stage costs."""
    costs = [np.array([[float(c)]]) for c in costs]
    if len(costs) != T + 1:
        raise ValueError("need T+1 costs")
    return FiniteHorizonMdp(T, costs, [np.ones((1, 1, 1))] * T)


def random_lattice_mdp(rng: np.random.Generator, max_states: int = 3, max_actions: int = 2,
                       max_T: int = 3, K: int = 4) -> FiniteHorizonMdp:
    """Random MDP with costs on the 1/K lattice and stage-varying state counts."""
    T = int(rng.integers(1, max_T + 1))
    sizes = [int(rng.integers(1, max_states + 1)) for _ in range(T + 1)]
    sizes[0] = max(sizes[0], 1)
    A = int(rng.integers(1, max_actions + 1))
    costs = [rng.integers(0, K + 1, (sizes[t], A)) / K for t in range(T + 1)]
    kernels = []
    for t in range(T):
        P = rng.dirichlet(np.ones(sizes[t + 1]), (sizes[t], A))
        # sparsify some rows so deterministic moves also appear
        if rng.random() < 0.3:
            P = np.eye(sizes[t + 1])[rng.integers(0, sizes[t + 1], (sizes[t], A))]
        kernels.append(P)
    return FiniteHorizonMdp(T, costs, kernels)


def two_state_chain(gamma: float = 0.5) -> InfiniteMdp:
    """Two states, two actions, costs in {0, 1/2, 1} (dyadic, so lattices are exact)."""
    costs = np.array([[0.0, 0.5], [1.0, 0.5]])
    kernel = np.array([[[0.5, 0.5], [1.0, 0.0]],
                       [[0.0, 1.0], [0.5, 0.5]]])
    return InfiniteMdp(costs, kernel, gamma)


def three_state_discounted(gamma: float = 0.9) -> InfiniteMdp:
    """Three states, two actions: a safe-but-costly action and a risky cheap one."""
    costs = np.array([[0.2, 0.0], [0.5, 0.1], [1.0, 0.8]])
    kernel = np.array([
        [[0.9, 0.1, 0.0], [0.5, 0.3, 0.2]],
        [[0.6, 0.4, 0.0], [0.2, 0.4, 0.4]],
        [[0.3, 0.5, 0.2], [0.1, 0.3, 0.6]],
    ])
    return InfiniteMdp(costs, kernel, gamma)


def scalar_control(T: int = 2) -> SocProblem:
    """``s' = 0.8 s + 0.5 a + xi`` on [-1, 1] with cost ``(s^2 + a^2) / 2``."""
    noise = (np.array([[-0.2], [0.0], [0.2]]), np.array([0.25, 0.5, 0.25]))
    return SocProblem(T, [[-1.0, 1.0]], [[-1.0, 1.0]], LinearDynamics([[0.8]], [[0.5]]),
                      CostSpec("quadratic", scale=0.5), noise, L=float(np.sqrt(2.0)))
