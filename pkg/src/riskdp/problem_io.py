"""Problem files (JSON) for finite MDPs, discounted MDPs and control problems, plus policy I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .horizon import InfiniteMdp
from .mdp import AugPolicy, FiniteHorizonMdp, XGrid
from .risk import RiskFamily, ThetaGrid
from .soc import CostSpec, LinearDynamics, SocGrid, SocProblem


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: top level must be a JSON object")
    return data


def _depth(x) -> int:
    d = 0
    while isinstance(x, (list, tuple)):
        if not x:
            raise ConfigError("empty array in problem file")
        x, d = x[0], d + 1
    return d


def _need(data: dict, *keys):
    missing = [k for k in keys if k not in data]
    if missing:
        raise ConfigError(f"problem file is missing {', '.join(missing)}")


def parse_xgrid(spec) -> XGrid:
    """``{"mode": "lattice", "K": 4}``, ``{"mode": "uniform", "h": 0.01}`` or ``"lattice:4"``."""
    if isinstance(spec, str):
        mode, _, val = spec.partition(":")
        if not val:
            raise ConfigError(f"x-grid {spec!r} must look like lattice:K or uniform:h")
        spec = {"mode": mode, "K" if mode == "lattice" else "h": val}
    if not isinstance(spec, dict):
        raise ConfigError("xgrid must be an object")
    mode = spec.get("mode")
    x0 = tuple(spec.get("x0", (0.0, 0.0)))
    try:
        if mode == "lattice":
            K = float(spec["K"])
            if K != int(K):
                raise ConfigError("lattice K must be an integer")
            return XGrid.lattice(int(K), x0)
        if mode == "uniform":
            return XGrid.uniform(float(spec["h"]), x0)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad xgrid {spec!r}: {exc}") from None
    raise ConfigError(f"unknown x-grid mode {mode!r}")


def xgrid_to_json(grid: XGrid) -> dict:
    out = {"mode": grid.mode}
    out["K" if grid.mode == "lattice" else "h"] = grid.K if grid.mode == "lattice" else grid.h
    if grid.x0 != (0.0, 0.0):
        out["x0"] = list(grid.x0)
    return out


def parse_theta_grid(spec, family: RiskFamily, cost_bound: float) -> ThetaGrid | None:
    """``{"num": 129}``, ``{"step": 0.01}`` or the CLI forms ``"129"`` / ``"step=0.01"``."""
    if spec is None:
        return None
    if isinstance(spec, (int, str)) and not isinstance(spec, bool):
        text = str(spec)
        spec = {"step": text[5:]} if text.startswith("step=") else {"num": text}
    box = np.asarray(spec.get("box", family.box(cost_bound)), float)
    try:
        if "step" in spec:
            return ThetaGrid.with_step(box, float(spec["step"]))
        num = int(spec.get("num", 129))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad theta grid {spec!r}: {exc}") from None
    if num < 2:
        raise ConfigError("theta grid needs at least 2 points per axis")
    return ThetaGrid.uniform(box, num)


def parse_risk(spec) -> RiskFamily:
    if not isinstance(spec, dict):
        raise ConfigError("risk must be an object such as {\"kind\": \"cvar\", \"alpha\": 0.5}")
    try:
        return RiskFamily.from_json(spec)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad risk specification {spec!r}: {exc}") from None


def _labels(value, name):
    if isinstance(value, int):
        return [str(i) for i in range(value)]
    if isinstance(value, list):
        return [str(v) for v in value]
    raise ConfigError(f"{name} must be a count or a list of labels")


@dataclass
class MdpRun:
    mdp: FiniteHorizonMdp
    family: RiskFamily | None
    xgrid: XGrid | None
    s0: int
    theta_spec: object = None


def mdp_from_json(data: dict) -> MdpRun:
    """Finite-horizon problem; ``kernels`` and ``costs`` may be shared or per stage."""
    _need(data, "T", "kernels", "costs")
    T = data["T"]
    if not isinstance(T, int) or T < 0:
        raise ConfigError("T must be a non-negative integer")
    costs, kernels = data["costs"], data["kernels"]
    cd = _depth(costs)
    if cd == 2:
        costs = [costs] * (T + 1)
    elif cd != 3:
        raise ConfigError("costs must be a 2-D (shared) or 3-D (per stage) array")
    if T == 0:
        kernels = []
    else:
        kd = _depth(kernels)
        if kd == 3:
            kernels = [kernels] * T
        elif kd != 4:
            raise ConfigError("kernels must be a 3-D (shared) or 4-D (per stage) array")
    try:
        costs = [np.asarray(c, float) for c in costs]
        kernels = [np.asarray(k, float) for k in kernels]
    except ValueError as exc:
        raise ConfigError(f"ragged array in problem file: {exc}") from None
    states = data.get("states")
    actions = data.get("actions")
    state_labels = action_labels = None
    if states is not None:
        labels = _labels(states, "states")
        if any(len(labels) != c.shape[0] for c in costs):
            raise ConfigError("states do not match the cost arrays")
        state_labels = [labels] * (T + 1)
    if actions is not None:
        labels = _labels(actions, "actions")
        if any(c.ndim != 2 or len(labels) != c.shape[1] for c in costs):
            raise ConfigError("actions do not match the cost arrays")
        action_labels = [labels] * (T + 1)
    mdp = FiniteHorizonMdp(T, costs, kernels, state_labels=state_labels, action_labels=action_labels)
    s0 = data.get("s0", 0)
    if isinstance(s0, str):
        if state_labels is None or s0 not in state_labels[0]:
            raise ConfigError(f"unknown initial state {s0!r}")
        s0 = state_labels[0].index(s0)
    if not isinstance(s0, int) or not 0 <= s0 < mdp.n_states(0):
        raise ConfigError("s0 must index a stage-0 state")
    family = parse_risk(data["risk"]) if "risk" in data else None
    xgrid = parse_xgrid(data["xgrid"]) if "xgrid" in data else None
    return MdpRun(mdp, family, xgrid, s0, data.get("theta_grid"))


def infinite_from_json(data: dict, gamma: float | None = None) -> tuple[InfiniteMdp, MdpRun]:
    """Stationary discounted problem; ``gamma`` overrides the file's value."""
    _need(data, "kernels", "costs")
    gamma = data.get("gamma") if gamma is None else gamma
    if gamma is None:
        raise ConfigError("discounted problem needs gamma")
    if _depth(data["costs"]) != 2 or _depth(data["kernels"]) != 3:
        raise ConfigError("discounted problem needs 2-D costs and a 3-D kernel")
    inf = InfiniteMdp(data["costs"], data["kernels"], float(gamma))
    run = mdp_from_json({**data, "T": 1})
    return inf, run


@dataclass
class SocRun:
    problem: SocProblem
    family: RiskFamily | None
    grid: SocGrid | None
    s0: np.ndarray
    theta_spec: object = None


def _cost_from_json(spec: dict) -> CostSpec:
    kind = spec.get("kind", "quadratic")
    try:
        if kind == "quadratic":
            return CostSpec("quadratic", Q=spec.get("Q"), R=spec.get("R"),
                            scale=float(spec.get("scale", 1.0)))
        if kind == "constant":
            return CostSpec("constant", value=float(spec["value"]))
        if kind == "table":
            return CostSpec("table", table=spec["table"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad cost {spec!r}: {exc}") from None
    raise ConfigError(f"unknown cost kind {kind!r}")


def _noise_from_json(noise):
    if not isinstance(noise, list) or not noise:
        raise ConfigError("noise must be a non-empty list of [xi, p] pairs")
    try:
        xi = [np.atleast_1d(np.asarray(pair[0], float)) for pair in noise]
        p = np.array([float(pair[1]) for pair in noise])
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"bad noise list: {exc}") from None
    return np.stack(xi), p


def soc_from_json(data: dict) -> SocRun:
    _need(data, "T", "state_box", "action_box", "dynamics", "cost", "noise")
    dyn = data["dynamics"]
    if dyn.get("kind", "linear") != "linear":
        raise ConfigError("problem files support linear dynamics only")
    try:
        dynamics = LinearDynamics(dyn["A"], dyn["B"], bool(dyn.get("clamp", True)))
    except KeyError as exc:
        raise ConfigError(f"linear dynamics need {exc}") from None
    problem = SocProblem(int(data["T"]), data["state_box"], data["action_box"], dynamics,
                         _cost_from_json(data["cost"]), _noise_from_json(data["noise"]),
                         None if data.get("L") is None else float(data["L"]))
    if dynamics.A.shape != (problem.d_S, problem.d_S) or dynamics.B.shape != (problem.d_S, problem.d_A):
        raise ConfigError("dynamics matrices do not match the boxes")
    if problem.T and problem.noise[0][0].shape[1] != problem.d_S:
        raise ConfigError("noise vectors must have the state dimension")
    grid = None
    if "grids" in data:
        g = data["grids"]
        _need(g, "hS", "hA", "xgrid")
        grid = SocGrid(float(g["hS"]), float(g["hA"]), parse_xgrid(g["xgrid"]))
    s0 = np.asarray(data.get("s0", problem.state_box.mean(axis=1)), float).ravel()
    if s0.size != problem.d_S:
        raise ConfigError("s0 must have the state dimension")
    family = parse_risk(data["risk"]) if "risk" in data else None
    return SocRun(problem, family, grid, s0, data.get("theta_grid"))


def is_soc(data: dict) -> bool:
    return "state_box" in data


# ---------------------------------------------------------------------------
# policies


def policy_to_json(policy: AugPolicy) -> dict:
    out = {"x_nodes": [n.tolist() for n in policy.nodes]}
    if policy.deterministic:
        out["actions"] = [a.tolist() for a in policy.actions]
    else:
        out["probs"] = [p.tolist() for p in policy.probs]
    return out


def policy_from_json(data: dict) -> AugPolicy:
    """Accepts either a policy object or a solver output holding one under ``policy``."""
    if "policy" in data and isinstance(data["policy"], dict):
        data = data["policy"]
    if "x_nodes" not in data:
        raise ConfigError("policy needs x_nodes")
    nodes = [np.asarray(n, float) for n in data["x_nodes"]]
    if "actions" in data:
        return AugPolicy(nodes, actions=[np.asarray(a, np.intp).reshape(-1, n.size)
                                         for a, n in zip(data["actions"], nodes)])
    if "probs" in data:
        return AugPolicy(nodes, probs=[np.asarray(p, float) for p in data["probs"]])
    raise ConfigError("policy needs actions or probs")


def finite(x) -> float | None:
    """JSON-safe float: non-finite values become null."""
    x = float(x)
    return x if math.isfinite(x) else None
