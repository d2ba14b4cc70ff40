"""Scenario description and its JSON schema.

Scenario files are single JSON documents whose numeric fields carry their
unit in the name (``dt_s``, ``radius_m``, ``u_max_mps``). Parsing is strict:
unknown keys and out-of-range values raise :class:`ConfigurationError` naming
the offending field as a dotted path.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .cbf import DEFAULT_OFFSET, ObstacleSpec, PairSet, make_pairs
from .dynamics import SINGLE_INTEGRATOR, UNICYCLE, DynamicsModel, NoiseSpec
from .errors import ConfigurationError
from .mpc import MpcParams

METHODS = ("acp_sbc", "cbf_baseline")
TIGHTENING_MODES = ("barrier", "state_lipschitz")
GRANULARITIES = ("kind", "pair", "all")
PREDICTION_MODES = ("executed", "planned")
BUNDLED = ("param_analysis", "distribution_compare", "swap30", "unicycle6obs3")


@dataclass(frozen=True)
class AcpSettings:
    alpha: float = 0.05
    delta: float = 0.05
    e_init: float = 1.0
    alpha_min: float = 0.001
    alpha_max: float = 0.999
    shared_set: bool = False
    min_scores: Optional[int] = None
    granularity: str = "kind"
    predictions: str = "executed"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)", field="acp.alpha")
        if not self.delta >= 0:
            raise ConfigurationError("delta must be >= 0", field="acp.delta")
        if not self.e_init >= 0:
            raise ConfigurationError("e_init must be >= 0", field="acp.e_init")
        if not 0 < self.alpha_min <= self.alpha <= self.alpha_max < 1:
            raise ConfigurationError("need 0 < alpha_min <= alpha <= alpha_max < 1", field="acp.alpha_min")
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"granularity must be one of {GRANULARITIES}", field="acp.granularity")
        if self.predictions not in PREDICTION_MODES:
            raise ConfigurationError(f"predictions must be one of {PREDICTION_MODES}", field="acp.predictions")


@dataclass
class Scenario:
    name: str
    model: DynamicsModel
    starts: np.ndarray  # (N, n_x)
    goals: np.ndarray  # (N, 2)
    radii: tuple
    obstacles: tuple = ()
    noise: tuple = ()  # one NoiseSpec per robot
    mpc: MpcParams = field(default_factory=MpcParams)
    gamma: float = 1.0
    acp: AcpSettings = field(default_factory=AcpSettings)
    tn: int = 400
    seed: int = 1
    method: str = "acp_sbc"
    tightening: str = "barrier"
    workspace: tuple = (-2.5, 2.5, -2.5, 2.5)
    goal_tol: float = 0.05
    offset: float = DEFAULT_OFFSET
    max_failures: int = 20

    @property
    def n_robots(self) -> int:
        return len(self.radii)

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def pairs(self) -> PairSet:
        return PairSet(make_pairs(list(self.radii), list(self.obstacles)), list(self.obstacles))

    def validate(self) -> "Scenario":
        n = self.n_robots
        if n < 1:
            raise ConfigurationError("at least one robot is required", field="robots")
        if self.starts.shape != (n, self.model.state_dim):
            raise ConfigurationError(f"starts must have shape ({n}, {self.model.state_dim})", field="robots.start_m")
        if self.goals.shape != (n, 2):
            raise ConfigurationError(f"goals must have shape ({n}, 2)", field="robots.goal_m")
        if len(self.noise) != n:
            raise ConfigurationError("need one noise spec per robot", field="noise")
        if self.tn < 1:
            raise ConfigurationError("steps must be >= 1", field="steps")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}", field="method")
        if self.tightening not in TIGHTENING_MODES:
            raise ConfigurationError(f"tightening must be one of {TIGHTENING_MODES}", field="cbf.tightening")
        if self.tightening == "state_lipschitz" and self.model.kind != SINGLE_INTEGRATOR:
            raise ConfigurationError("state_lipschitz tightening needs the single-integrator model",
                                     field="cbf.tightening")
        if self.tightening == "state_lipschitz" and self.acp.predictions != "executed":
            raise ConfigurationError("state_lipschitz tightening scores executed predictions only",
                                     field="acp.predictions")
        if not self.gamma > 0:
            raise ConfigurationError("gamma must be positive", field="cbf.gamma")
        if not self.goal_tol > 0:
            raise ConfigurationError("goal tolerance must be positive", field="goal_tolerance_m")
        if self.max_failures < 1:
            raise ConfigurationError("must be >= 1", field="max_consecutive_failures")
        for nz in self.noise:
            if nz.dim != 2:
                raise ConfigurationError("noise must be two-dimensional", field="noise")
        ps = self.pairs()
        if len(ps):
            h = ps.h(self.starts[:, :2])
            bad = np.flatnonzero(h <= 0)
            if bad.size:
                a, b = ps.pairs[bad[0]].label
                raise ConfigurationError(f"start positions overlap for pair {a}-{b}", field="robots.start_m")
        return self


# -- JSON schema ---------------------------------------------------------------

_TOP = {"name", "model", "dt_s", "steps", "seed", "method", "goal_tolerance_m", "workspace_m", "robots",
        "obstacles", "noise", "mpc", "cbf", "acp", "max_consecutive_failures"}
_ROBOT = {"start_m", "goal_m", "radius_m", "heading_rad"}
_OBST = {"center_m", "radius_m"}
_MPC = {"horizon", "q_diag", "r_diag", "p_diag", "u_min_mps", "u_max_mps", "omega_max_radps", "slack_penalty",
        "eps_tol", "max_iter", "mode", "sqp_iters", "sqp_step", "activation_radius_m",
        "qp_method"}
_CBF = {"gamma", "tightening", "lookahead_m"}
_ACP = {"alpha", "delta", "e_init", "alpha_min", "alpha_max", "shared_set", "min_scores", "granularity",
        "predictions"}
_NOISE = {"kind", "sigma", "lo", "hi", "scale", "components"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigurationError("expected an object", field=where or "<root>")
    for key in d:
        if key not in allowed:
            raise ConfigurationError("unknown field", field=f"{where}.{key}" if where else key)


def _num(d, key, where, default=None, *, integer=False, required=False):
    path = f"{where}.{key}" if where else key
    if key not in d or d[key] is None:
        if required:
            raise ConfigurationError("missing required field", field=path)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"expected a number, got {v!r}", field=path)
    if integer:
        if float(v) != int(v):
            raise ConfigurationError(f"expected an integer, got {v!r}", field=path)
        return int(v)
    if not math.isfinite(v):
        raise ConfigurationError("must be finite", field=path)
    return float(v)


def _vec(d, key, where, n, default=None, required=False):
    path = f"{where}.{key}" if where else key
    if key not in d:
        if required:
            raise ConfigurationError("missing required field", field=path)
        return default
    v = d[key]
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v] * n
    if not isinstance(v, list) or len(v) != n or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v):
        raise ConfigurationError(f"expected {n} numbers", field=path)
    return tuple(float(x) for x in v)


def _str(d, key, where, default, choices=None):
    path = f"{where}.{key}" if where else key
    v = d.get(key, default)
    if not isinstance(v, str):
        raise ConfigurationError(f"expected a string, got {v!r}", field=path)
    if choices is not None and v not in choices:
        raise ConfigurationError(f"must be one of {list(choices)}, got {v!r}", field=path)
    return v


def _parse_noise(d, where) -> NoiseSpec:
    _check_keys(d, _NOISE, where)
    kind = _str(d, "kind", where, "gaussian", ("gaussian", "uniform", "mixture", "none"))
    scale = _vec(d, "scale", where, 2, (1.0, 1.0))
    if kind == "gaussian":
        sigma = _vec(d, "sigma", where, 2, (1.0, 1.0))
        if any(s < 0 for s in sigma):
            raise ConfigurationError("must be >= 0", field=f"{where}.sigma")
        return NoiseSpec("gaussian", sigma=sigma, scale=scale)
    if kind == "uniform":
        lo = _vec(d, "lo", where, 2, (-1.0, -1.0))
        hi = _vec(d, "hi", where, 2, (1.0, 1.0))
        if any(a > b for a, b in zip(lo, hi)):
            raise ConfigurationError("lo must not exceed hi", field=f"{where}.lo")
        return NoiseSpec("uniform", lo=lo, hi=hi, scale=scale)
    if kind == "mixture":
        comps = d.get("components")
        if not isinstance(comps, list) or not comps:
            raise ConfigurationError("mixture needs a non-empty list", field=f"{where}.components")
        parsed = tuple(_parse_noise(c, f"{where}.components[{i}]") for i, c in enumerate(comps))
        return NoiseSpec("mixture", components=parsed, scale=scale)
    return NoiseSpec.zero()


def scenario_from_dict(doc: dict) -> Scenario:
    _check_keys(doc, _TOP, "")
    name = _str(doc, "name", "", "scenario")
    kind = _str(doc, "model", "", SINGLE_INTEGRATOR, (SINGLE_INTEGRATOR, UNICYCLE))
    dt = _num(doc, "dt_s", "", 0.05)
    if not dt > 0:
        raise ConfigurationError("must be positive", field="dt_s")
    model = DynamicsModel(kind, dt)

    robots = doc.get("robots")
    if not isinstance(robots, list) or not robots:
        raise ConfigurationError("need a non-empty list of robots", field="robots")
    starts, goals, radii = [], [], []
    for i, r in enumerate(robots):
        w = f"robots[{i}]"
        _check_keys(r, _ROBOT, w)
        s = _vec(r, "start_m", w, 2, required=True)
        g = _vec(r, "goal_m", w, 2, required=True)
        rad = _num(r, "radius_m", w, 0.0)
        if rad < 0:
            raise ConfigurationError("must be >= 0", field=f"{w}.radius_m")
        if kind == UNICYCLE:
            head = _num(r, "heading_rad", w, 0.0)
            starts.append([s[0], s[1], head])
        else:
            if "heading_rad" in r:
                raise ConfigurationError("only unicycles have a heading", field=f"{w}.heading_rad")
            starts.append(list(s))
        goals.append(list(g))
        radii.append(rad)

    obstacles = []
    obs_doc = doc.get("obstacles", [])
    if not isinstance(obs_doc, list):
        raise ConfigurationError("expected a list", field="obstacles")
    for i, o in enumerate(obs_doc):
        w = f"obstacles[{i}]"
        _check_keys(o, _OBST, w)
        c = _vec(o, "center_m", w, 2, required=True)
        rad = _num(o, "radius_m", w, required=True)
        if rad < 0:
            raise ConfigurationError("must be >= 0", field=f"{w}.radius_m")
        obstacles.append(ObstacleSpec(c, rad))
    for i, rad in enumerate(radii):
        if rad == 0 and any(o.radius == 0 for o in obstacles):
            raise ConfigurationError("a zero-radius robot needs obstacles with positive radius",
                                     field=f"robots[{i}].radius_m")
    if sum(1 for r in radii if r == 0) > 1:
        raise ConfigurationError("at most one robot may have zero radius", field="robots.radius_m")

    nz = doc.get("noise", {"kind": "gaussian"})
    if isinstance(nz, list):
        if len(nz) != len(robots):
            raise ConfigurationError(f"expected {len(robots)} noise specs", field="noise")
        noise = tuple(_parse_noise(x, f"noise[{i}]") for i, x in enumerate(nz))
    else:
        noise = (_parse_noise(nz, "noise"),) * len(robots)

    m = doc.get("mpc", {})
    _check_keys(m, _MPC, "mpc")
    horizon = _num(m, "horizon", "mpc", 8, integer=True)
    if horizon < 1:
        raise ConfigurationError("must be >= 1", field="mpc.horizon")
    nx = model.state_dim
    q_default = (1.0, 1.0, 0.0)[:nx]
    p_default = (10.0, 10.0, 0.0)[:nx]
    q_diag = _vec(m, "q_diag", "mpc", nx, q_default)
    r_diag = _vec(m, "r_diag", "mpc", 2, (0.1, 0.1))
    p_diag = _vec(m, "p_diag", "mpc", nx, p_default)
    for key, val in (("q_diag", q_diag), ("r_diag", r_diag), ("p_diag", p_diag)):
        if any(v < 0 for v in val):
            raise ConfigurationError("weights must be >= 0", field=f"mpc.{key}")
    u_max = _num(m, "u_max_mps", "mpc", 1.0)
    u_min = _num(m, "u_min_mps", "mpc", -u_max)
    if u_min > u_max:
        raise ConfigurationError("u_min_mps must not exceed u_max_mps", field="mpc.u_min_mps")
    if kind == UNICYCLE:
        om = _num(m, "omega_max_radps", "mpc", 1.0)
        if om < 0:
            raise ConfigurationError("must be >= 0", field="mpc.omega_max_radps")
        lo_b, hi_b = (u_min, -om), (u_max, om)
    else:
        if "omega_max_radps" in m:
            raise ConfigurationError("only unicycles take an angular bound", field="mpc.omega_max_radps")
        lo_b, hi_b = (u_min, u_min), (u_max, u_max)
    rho = _num(m, "slack_penalty", "mpc", 1e4)
    if not rho > 0:
        raise ConfigurationError("must be positive", field="mpc.slack_penalty")
    eps = _num(m, "eps_tol", "mpc", 1e-6)
    if not eps > 0:
        raise ConfigurationError("must be positive", field="mpc.eps_tol")
    max_iter = _num(m, "max_iter", "mpc", 4000, integer=True)
    if max_iter < 1:
        raise ConfigurationError("must be >= 1", field="mpc.max_iter")
    sqp_iters = _num(m, "sqp_iters", "mpc", 10, integer=True)
    if sqp_iters < 1:
        raise ConfigurationError("must be >= 1", field="mpc.sqp_iters")
    sqp_step = _num(m, "sqp_step", "mpc", 0.5)
    if not 0 < sqp_step <= 1:
        raise ConfigurationError("must lie in (0, 1]", field="mpc.sqp_step")
    act = _num(m, "activation_radius_m", "mpc", None)
    if act is not None and act < 0:
        raise ConfigurationError("must be >= 0", field="mpc.activation_radius_m")
    params = MpcParams(
        horizon=horizon, q_diag=q_diag, r_diag=r_diag, p_diag=p_diag, u_min=lo_b, u_max=hi_b,
        slack_penalty=rho, eps_tol=eps, max_iter=max_iter,
        mode=_str(m, "mode", "mpc", "centralized", ("centralized", "decoupled")),
        sqp_iters=sqp_iters, sqp_step=sqp_step, activation_radius=act,
        qp_method=_str(m, "qp_method", "mpc", "auto", ("auto", "active_set", "admm")),
    )

    c = doc.get("cbf", {})
    _check_keys(c, _CBF, "cbf")
    gamma = _num(c, "gamma", "cbf", 1.0)
    if not gamma > 0:
        raise ConfigurationError("must be positive", field="cbf.gamma")
    offset = _num(c, "lookahead_m", "cbf", DEFAULT_OFFSET)
    if not offset > 0:
        raise ConfigurationError("must be positive", field="cbf.lookahead_m")

    a = doc.get("acp", {})
    _check_keys(a, _ACP, "acp")
    min_scores = _num(a, "min_scores", "acp", None, integer=True)
    if min_scores is not None and min_scores < 0:
        raise ConfigurationError("must be >= 0", field="acp.min_scores")
    for key in ("shared_set",):
        if key in a and not isinstance(a[key], bool):
            raise ConfigurationError("expected true or false", field=f"acp.{key}")
    acp = AcpSettings(
        alpha=_num(a, "alpha", "acp", 0.05), delta=_num(a, "delta", "acp", 0.05),
        e_init=_num(a, "e_init", "acp", 1.0), alpha_min=_num(a, "alpha_min", "acp", 0.001),
        alpha_max=_num(a, "alpha_max", "acp", 0.999), shared_set=a.get("shared_set", False),
        min_scores=min_scores, granularity=_str(a, "granularity", "acp", "kind", GRANULARITIES),
        predictions=_str(a, "predictions", "acp", "executed", PREDICTION_MODES),
    )

    ws = _vec(doc, "workspace_m", "", 4, (-2.5, 2.5, -2.5, 2.5))
    if ws[0] >= ws[1] or ws[2] >= ws[3]:
        raise ConfigurationError("expected [xmin, xmax, ymin, ymax]", field="workspace_m")
    steps = _num(doc, "steps", "", 400, integer=True)
    if steps < 1:
        raise ConfigurationError("must be >= 1", field="steps")
    seed = _num(doc, "seed", "", 1, integer=True)
    if seed < 0:
        raise ConfigurationError("must be >= 0", field="seed")
    sc = Scenario(
        name=name, model=model, starts=np.array(starts, dtype=float), goals=np.array(goals, dtype=float),
        radii=tuple(radii), obstacles=tuple(obstacles), noise=noise, mpc=params, gamma=gamma, acp=acp,
        tn=steps, seed=seed, method=_str(doc, "method", "", "acp_sbc", METHODS),
        tightening=_str(c, "tightening", "cbf", "barrier", TIGHTENING_MODES), workspace=ws,
        goal_tol=_num(doc, "goal_tolerance_m", "", 0.05),
        offset=offset, max_failures=_num(doc, "max_consecutive_failures", "", 20, integer=True),
    )
    return sc.validate()


def _noise_to_dict(nz: NoiseSpec) -> dict:
    if nz.kind == "gaussian":
        return {"kind": "gaussian", "sigma": list(nz.sigma), "scale": list(nz.scale)}
    if nz.kind == "uniform":
        return {"kind": "uniform", "lo": list(nz.lo), "hi": list(nz.hi), "scale": list(nz.scale)}
    if nz.kind == "mixture":
        return {"kind": "mixture", "components": [_noise_to_dict(c) for c in nz.components],
                "scale": list(nz.scale)}
    return {"kind": "none"}


def scenario_to_dict(sc: Scenario) -> dict:
    uni = sc.model.kind == UNICYCLE
    robots = []
    for i in range(sc.n_robots):
        r = {"start_m": [float(sc.starts[i, 0]), float(sc.starts[i, 1])],
             "goal_m": [float(v) for v in sc.goals[i]], "radius_m": float(sc.radii[i])}
        if uni:
            r["heading_rad"] = float(sc.starts[i, 2])
        robots.append(r)
    p = sc.mpc
    mpc = {"horizon": p.horizon, "q_diag": list(p.q_diag), "r_diag": list(p.r_diag), "p_diag": list(p.p_diag),
           "u_min_mps": float(p.u_min[0]), "u_max_mps": float(p.u_max[0]), "slack_penalty": p.slack_penalty,
           "eps_tol": p.eps_tol, "max_iter": p.max_iter, "mode": p.mode, "sqp_iters": p.sqp_iters,
           "sqp_step": p.sqp_step, "activation_radius_m": p.activation_radius,
           "qp_method": p.qp_method}
    if uni:
        mpc["omega_max_radps"] = float(p.u_max[1])
    a = sc.acp
    return {
        "name": sc.name, "model": sc.model.kind, "dt_s": sc.model.dt, "steps": sc.tn, "seed": sc.seed,
        "method": sc.method, "goal_tolerance_m": sc.goal_tol, "workspace_m": list(sc.workspace),
        "robots": robots,
        "obstacles": [{"center_m": list(o.center), "radius_m": o.radius} for o in sc.obstacles],
        "noise": [_noise_to_dict(nz) for nz in sc.noise],
        "mpc": mpc,
        "cbf": {"gamma": sc.gamma, "tightening": sc.tightening, "lookahead_m": sc.offset},
        "acp": {"alpha": a.alpha, "delta": a.delta, "e_init": a.e_init, "alpha_min": a.alpha_min,
                "alpha_max": a.alpha_max, "shared_set": a.shared_set, "min_scores": a.min_scores,
                "granularity": a.granularity, "predictions": a.predictions},
        "max_consecutive_failures": sc.max_failures,
    }


def config_hash(sc: Scenario) -> str:
    canon = json.dumps(scenario_to_dict(sc), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_scenario(path) -> Scenario:
    """Parse a scenario file; a bare bundled name (``swap30``) loads the shipped file."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        text = resources.files("acpsbc.scenarios").joinpath(f"{path}.json").read_text()
    else:
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read scenario file: {exc}", field="scenario") from exc
    try:
        doc: Any = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON: {exc}", field="scenario") from exc
    return scenario_from_dict(doc)


def bundled(name: str) -> Scenario:
    if name not in BUNDLED:
        raise ConfigurationError(f"no bundled scenario {name!r}", field="scenario")
    return load_scenario(name)
