"""Experiment configuration: JSON schema, descriptor builders, hashing.

Numeric fields are accepted as JSON numbers or as decimal strings
("1e-10"), so configs survive locale-sensitive tooling unchanged.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .errors import InvalidConfigError
from .graph import CommGraph, build_graph
from .iteration import IterationParams, StopRule
from .operators import AgentMap, AgentSystem, affine_map, gradient_of_quadratic, scalar_logistic

MAP_FAMILIES = ("affine", "gradient_of_quadratic", "scalar_logistic")
SWEEP_PARAMS = ("alpha", "eta", "beta_sq", "n")
DEFAULT_OUTPUTS = {
    "trajectory_csv": "trajectory.csv",
    "report_json": "report.json",
    "eigencurves_csv": "eigencurves.csv",
    "sweep_csv": "sweep.csv",
    "states_json": None,
    "thin": 1,
}


def as_float(value, where: str) -> float:
    """Accept a JSON number or a decimal string."""
    if isinstance(value, bool):
        raise InvalidConfigError(f"{where}: expected a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError as exc:
            raise InvalidConfigError(f"{where}: cannot parse {value!r} as a number") from exc
    raise InvalidConfigError(f"{where}: expected a number, got {type(value).__name__}")


def as_int(value, where: str) -> int:
    f = as_float(value, where)
    if f != int(f):
        raise InvalidConfigError(f"{where}: expected an integer, got {value!r}")
    return int(f)


def _as_matrix(value, where: str) -> np.ndarray:
    try:
        m = np.array([[as_float(v, where) for v in row] for row in value])
    except (TypeError, InvalidConfigError) as exc:
        raise InvalidConfigError(f"{where}: expected a matrix (list of lists)") from exc
    if m.ndim != 2:
        raise InvalidConfigError(f"{where}: expected a matrix (list of lists)")
    return m


def _as_vector(value, where: str) -> np.ndarray:
    try:
        return np.array([as_float(v, where) for v in value])
    except (TypeError, InvalidConfigError) as exc:
        raise InvalidConfigError(f"{where}: expected a vector (list of numbers)") from exc


def build_agent_map(desc: dict, where: str = "system") -> AgentMap:
    """Build one agent map from its descriptor."""
    if not isinstance(desc, dict) or "family" not in desc:
        raise InvalidConfigError(f"{where}: map descriptor needs a 'family' key")
    family = desc["family"]
    if family == "affine":
        return affine_map(_as_matrix(desc["A"], f"{where}.A"), _as_vector(desc["b"], f"{where}.b"))
    if family == "gradient_of_quadratic":
        return gradient_of_quadratic(
            _as_matrix(desc["Q"], f"{where}.Q"), _as_vector(desc["c"], f"{where}.c")
        )
    if family == "scalar_logistic":
        return scalar_logistic(as_float(desc["r"], f"{where}.r"), as_int(desc.get("d", 1), f"{where}.d"))
    raise InvalidConfigError(f"{where}: unknown map family {family!r} (known: {MAP_FAMILIES})")


def _perturbed_descriptor(desc: dict, rng, scale: float, deltas: dict) -> dict:
    out = dict(desc)
    family = desc["family"]
    if family == "affine":
        out["A"] = np.asarray(_as_matrix(desc["A"], "A")) + scale * deltas["A"]
        out["b"] = np.asarray(_as_vector(desc["b"], "b")) + scale * deltas["b"]
    elif family == "gradient_of_quadratic":
        dq = deltas["Q"]
        out["Q"] = np.asarray(_as_matrix(desc["Q"], "Q")) + scale * (dq + dq.T) / 2.0
        out["c"] = np.asarray(_as_vector(desc["c"], "c")) + scale * deltas["c"]
    elif family == "scalar_logistic":
        out["r"] = as_float(desc["r"], "r") + scale * deltas["r"]
    return out


def build_system(desc, where: str = "system") -> AgentSystem:
    """Build the agent system: a list of map descriptors, or a single
    descriptor with "replicate": N plus a seeded mean-zero perturbation
    per agent (so the average map stays at the base descriptor).
    """
    if isinstance(desc, list):
        if not desc:
            raise InvalidConfigError(f"{where}: empty system")
        return AgentSystem(maps=tuple(build_agent_map(d, f"{where}[{i}]") for i, d in enumerate(desc)))
    if not isinstance(desc, dict):
        raise InvalidConfigError(f"{where}: expected a list or a dict")
    n = as_int(desc.get("replicate", 1), f"{where}.replicate")
    if n < 1:
        raise InvalidConfigError(f"{where}.replicate must be >= 1")
    if n == 1:
        return AgentSystem(maps=(build_agent_map(desc, where),))
    scale = as_float(desc.get("perturb_scale", 0.05), f"{where}.perturb_scale")
    seed = as_int(desc.get("perturb_seed", 0), f"{where}.perturb_seed")
    rng = np.random.default_rng(seed)
    family = desc.get("family")
    draws = []
    for _ in range(n):
        if family == "affine":
            a = _as_matrix(desc["A"], f"{where}.A")
            draws.append({"A": rng.standard_normal(a.shape), "b": rng.standard_normal(a.shape[0])})
        elif family == "gradient_of_quadratic":
            q = _as_matrix(desc["Q"], f"{where}.Q")
            draws.append({"Q": rng.standard_normal(q.shape), "c": rng.standard_normal(q.shape[0])})
        elif family == "scalar_logistic":
            draws.append({"r": rng.standard_normal()})
        else:
            raise InvalidConfigError(f"{where}: unknown map family {family!r}")
    # mean-zero across agents, so the averaged system matches the base map
    keys = draws[0].keys()
    means = {k: sum(d[k] for d in draws) / n for k in keys}
    maps = []
    for d in draws:
        deltas = {k: d[k] - means[k] for k in keys}
        maps.append(build_agent_map(_perturbed_descriptor(desc, rng, scale, deltas), where))
    return AgentSystem(maps=tuple(maps))


@dataclass(frozen=True)
class InitSpec:
    kind: str  # zeros | given | random
    value: Optional[np.ndarray] = None
    seed: int = 0
    scale: float = 1.0

    def realize(self, size: int, seed_override: Optional[int] = None) -> np.ndarray:
        if self.kind == "zeros":
            return np.zeros(size)
        if self.kind == "given":
            if self.value is None or self.value.shape != (size,):
                raise InvalidConfigError(
                    f"given init has shape {None if self.value is None else self.value.shape}, "
                    f"expected ({size},)"
                )
            return self.value.copy()
        seed = self.seed if seed_override is None else seed_override
        rng = np.random.default_rng(seed)
        return self.scale * rng.standard_normal(size)


def _parse_init(spec, where: str) -> InitSpec:
    if spec is None:
        return InitSpec(kind="zeros")
    if not isinstance(spec, dict) or "kind" not in spec:
        raise InvalidConfigError(f"{where}: init spec needs a 'kind' key")
    kind = spec["kind"]
    if kind == "zeros":
        return InitSpec(kind="zeros")
    if kind == "given":
        return InitSpec(kind="given", value=_as_vector(spec["value"], f"{where}.value"))
    if kind == "random":
        return InitSpec(
            kind="random",
            seed=as_int(spec.get("seed", 0), f"{where}.seed"),
            scale=as_float(spec.get("scale", 1.0), f"{where}.scale"),
        )
    raise InvalidConfigError(f"{where}: unknown init kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    raw: dict
    graph_spec: dict
    system: AgentSystem
    alpha: Any  # float or "auto"
    alpha_max: float
    beta: float
    eta: float
    variant: str
    z0_spec: InitSpec
    w0_spec: InitSpec
    stop: StopRule
    outputs: dict
    sweep: Optional[dict]

    def build_graph(self) -> CommGraph:
        return build_graph(self.graph_spec)

    def iteration_params(self, alpha: float) -> IterationParams:
        return IterationParams(alpha=alpha, beta=self.beta, eta=self.eta, variant=self.variant)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise InvalidConfigError("top-level config must be a JSON object")
    for key in ("graph", "system", "params"):
        if key not in raw:
            raise InvalidConfigError(f"config is missing the {key!r} section")
    graph_spec = raw["graph"]
    if not isinstance(graph_spec, dict):
        raise InvalidConfigError("graph: expected an object")
    system = build_system(raw["system"])

    params = raw["params"]
    if not isinstance(params, dict):
        raise InvalidConfigError("params: expected an object")
    variant = params.get("variant", "parametric")
    if variant not in ("algorithm1", "parametric", "lifted", "reduced"):
        raise InvalidConfigError(f"params.variant: unknown variant {variant!r}")
    alpha = params.get("alpha", "auto")
    if alpha != "auto":
        alpha = as_float(alpha, "params.alpha")
        if alpha <= 0:
            raise InvalidConfigError("params.alpha must be positive")
    if variant == "algorithm1":
        eta = as_float(params.get("eta", 1.0), "params.eta")
        beta_sq = as_float(params.get("beta_sq", 0.5), "params.beta_sq")
        if abs(eta - 1.0) > 1e-15 or abs(beta_sq - 0.5) > 1e-15:
            raise InvalidConfigError("variant algorithm1 pins eta=1 and beta_sq=0.5")
    else:
        eta = as_float(params.get("eta", 1.0), "params.eta")
        beta_sq = as_float(params.get("beta_sq", 0.5), "params.beta_sq")
        if eta <= 0 or beta_sq <= 0:
            raise InvalidConfigError("params.eta and params.beta_sq must be positive")
    alpha_max = as_float(params.get("alpha_max", 10.0), "params.alpha_max")

    init = raw.get("init", {})
    if not isinstance(init, dict):
        raise InvalidConfigError("init: expected an object")
    z0_spec = _parse_init(init.get("z0"), "init.z0")
    w0_spec = _parse_init(init.get("w0"), "init.w0")

    stopping = raw.get("stopping", {})
    if not isinstance(stopping, dict):
        raise InvalidConfigError("stopping: expected an object")
    stop = StopRule(
        tol_step=as_float(stopping.get("tol_step", 1e-10), "stopping.tol_step"),
        tol_cons=as_float(stopping.get("tol_cons", 1e-8), "stopping.tol_cons"),
        max_iters=as_int(stopping.get("max_iters", 50000), "stopping.max_iters"),
    )

    outputs = dict(DEFAULT_OUTPUTS)
    user_outputs = raw.get("outputs", {})
    if not isinstance(user_outputs, dict):
        raise InvalidConfigError("outputs: expected an object")
    for k, v in user_outputs.items():
        if k not in DEFAULT_OUTPUTS and k != "dir":
            raise InvalidConfigError(f"outputs: unknown key {k!r}")
        outputs[k] = v
    outputs["thin"] = as_int(outputs.get("thin", 1), "outputs.thin")

    sweep = raw.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict) or "param" not in sweep or "grid" not in sweep:
            raise InvalidConfigError("sweep: needs 'param' and 'grid'")
        if sweep["param"] not in SWEEP_PARAMS:
            raise InvalidConfigError(f"sweep.param must be one of {SWEEP_PARAMS}")
        if not isinstance(sweep["grid"], list) or not sweep["grid"]:
            raise InvalidConfigError("sweep.grid must be a non-empty list")

    return ExperimentConfig(
        raw=raw,
        graph_spec=graph_spec,
        system=system,
        alpha=alpha,
        alpha_max=alpha_max,
        beta=math.sqrt(beta_sq),
        eta=eta,
        variant=variant,
        z0_spec=z0_spec,
        w0_spec=w0_spec,
        stop=stop,
        outputs=outputs,
        sweep=sweep,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"malformed JSON in {path}: {exc}") from exc
    return parse_config(raw)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
