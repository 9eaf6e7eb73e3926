"""Scenario files: schema validation and construction of the runtime objects."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .clustering import ClusteringConfig, ParticleClusterer
from .environment import Box, Region, RobotModel, VoxelEnvironment, box_surface_points, check_collision
from .planner import PlannerParams
from .policy import AdaptationConfig
from .simulator import ControllerGains, KinematicSimulator, StuckDetector
from .spaces import (Configuration, NoiseModel, SamplingBounds, Space, SpaceMetric, UsageError,
                     space_from_name)

_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 2}
_BOX = {
    "type": "object",
    "required": ["lower", "upper"],
    "properties": {"name": {"type": "string"}, "lower": _VEC, "upper": _VEC},
    "additionalProperties": False,
}
_REGION = {
    "type": "object",
    "required": ["id", "lower", "upper"],
    "properties": {"id": {"type": "string"}, "lower": _VEC, "upper": _VEC},
    "additionalProperties": False,
}
_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "required": ["name", "space", "environment", "robot", "start", "goal", "eps_goal", "gamma"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "notes": {"type": "object"},
        "space": {"enum": ["SE2", "SE3"]},
        "environment": {
            "type": "object",
            "required": ["lower", "upper", "resolution"],
            "additionalProperties": False,
            "properties": {
                "lower": _VEC, "upper": _VEC, "resolution": _POS,
                "obstacles": {"type": "array", "items": _BOX},
                "regions": {"type": "array", "items": _REGION},
            },
        },
        "robot": {
            "type": "object",
            "required": ["links"],
            "additionalProperties": False,
            "properties": {
                "links": {"type": "array", "items": _BOX, "minItems": 1},
                "spacing": _POS,
                "actuation_centers": {"type": "array", "items": _VEC},
                "length": _POS,
            },
        },
        "start": _VEC,
        "goal": _VEC,
        "start_spread": _VEC,
        "eps_goal": _POS,
        "gamma": {"type": "number", "minimum": 0},
        "angular_ratio": {"type": "number", "minimum": 0},
        "rotation_weight": {"type": "number", "minimum": 0},
        "sampling": {
            "type": "object",
            "required": ["lower", "upper"],
            "additionalProperties": False,
            "properties": {"lower": _VEC, "upper": _VEC, "rotation": {}},
        },
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kp": _POS, "kd": {"type": "number", "minimum": 0}, "timestep": _POS,
                           "t_simulate": _POS, "t_exec": _POS},
        },
        "stuck": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"window": {"type": "integer", "minimum": 2}, "eps_stuck": _POS, "eps_adjust": _POS},
        },
        "planner": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_particles": {"type": "integer", "minimum": 1},
                "alpha_p": _NUM, "alpha_v": _NUM, "p_goal": _NUM,
                "n_attempt": {"type": "integer", "minimum": 1},
                "goal_bias": _NUM,
                "t_planning": {"type": ["number", "null"]},
                "max_iterations": {"type": ["integer", "null"], "minimum": 1},
                "connect_limit": {"type": "integer", "minimum": 1},
                "max_solutions": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "clustering": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"method": {"enum": ["PC", "WCR", "AC"]}, "wcr_threshold": _NUM,
                           "refine_threshold": _NUM},
        },
        "adaptation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"a_importance": {"type": "integer", "minimum": 1}, "p_goal": _NUM,
                           "n_attempt_cap": {"type": "integer", "minimum": 1}},
        },
        "execution": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "extra_obstacles": {"type": "array", "items": _BOX},
                "block": {"type": "array", "items": {"type": "string"}},
                "budget_steps": {"type": "integer", "minimum": 1},
                "max_actions": {"type": "integer", "minimum": 1},
                "n_runs": {"type": "integer", "minimum": 1},
            },
        },
        "passages": {"type": "array", "items": _BOX},
        "target": _VEC,
    },
}


def _path_of(error) -> str:
    parts = [str(p) for p in error.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate_document(doc: dict) -> None:
    """Raise UsageError naming the offending field for schema violations."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise UsageError(f"scenario field {_path_of(err)}: {err.message}")


def _box(d: dict) -> Box:
    return Box(tuple(d["lower"]), tuple(d["upper"]), d.get("name", ""))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Copy ``doc`` with dotted-path keys (``planner.n_particles``) replaced."""
    out = copy.deepcopy(doc)
    for key, value in overrides.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


@dataclass
class Scenario:
    """A validated scenario document plus the objects it describes."""

    doc: dict
    source: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    # -- scalar fields ----------------------------------------------------------

    @property
    def name(self) -> str:
        return self.doc["name"]

    @cached_property
    def space(self) -> Space:
        return space_from_name(self.doc["space"])

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.doc).encode()).hexdigest()[:16]

    @property
    def eps_goal(self) -> float:
        return float(self.doc["eps_goal"])

    @property
    def gamma(self) -> float:
        return float(self.doc["gamma"])

    @cached_property
    def noise(self) -> NoiseModel:
        return NoiseModel.from_gamma(self.gamma, float(self.doc.get("angular_ratio", 0.25)))

    @cached_property
    def metric(self) -> SpaceMetric:
        return SpaceMetric(float(self.doc.get("rotation_weight", 0.5)))

    @cached_property
    def start(self) -> Configuration:
        return Configuration(self.space, self.doc["start"])

    @cached_property
    def goal(self) -> Configuration:
        return Configuration(self.space, self.doc["goal"])

    @cached_property
    def gains(self) -> ControllerGains:
        return ControllerGains(**self.doc.get("controller", {}))

    @cached_property
    def detector(self) -> StuckDetector:
        return StuckDetector(**self.doc.get("stuck", {}))

    @cached_property
    def planner_params(self) -> PlannerParams:
        kw = dict(self.doc.get("planner", {}))
        kw.setdefault("eps_goal", self.eps_goal)
        return PlannerParams(**kw)

    @cached_property
    def clustering(self) -> ClusteringConfig:
        kw = dict(self.doc.get("clustering", {}))
        kw.setdefault("refine_threshold", 2.0 * self.eps_goal)
        return ClusteringConfig(**kw)

    @cached_property
    def adaptation(self) -> AdaptationConfig:
        kw = dict(self.doc.get("adaptation", {}))
        kw.setdefault("p_goal", self.planner_params.p_goal)
        kw.setdefault("n_attempt_cap", self.planner_params.n_attempt)
        return AdaptationConfig(**kw)

    @property
    def execution(self) -> dict:
        return self.doc.get("execution", {})

    @property
    def budget_steps(self) -> int:
        return int(self.execution.get("budget_steps", 10 * self.gains.exec_steps))

    @property
    def max_actions(self) -> int:
        return int(self.execution.get("max_actions", 500))

    @cached_property
    def passages(self) -> list[Box]:
        return [_box(p) for p in self.doc.get("passages", [])]

    @cached_property
    def bounds(self) -> SamplingBounds:
        env = self.doc["environment"]
        s = self.doc.get("sampling", {"lower": env["lower"], "upper": env["upper"]})
        rot = s.get("rotation")
        if self.space.name == "SE2" and rot is None:
            rot = (-np.pi, np.pi)
        if isinstance(rot, list):
            rot = tuple(rot)
        return SamplingBounds(tuple(s["lower"]), tuple(s["upper"]), rot)

    # -- objects ----------------------------------------------------------------

    @cached_property
    def robot(self) -> RobotModel:
        r = self.doc["robot"]
        spacing = float(r.get("spacing", 0.9 * self.doc["environment"]["resolution"]))
        links = []
        for link in r["links"]:
            pts = box_surface_points(link["lower"], link["upper"], spacing)
            links.append(pts)
        points = np.unique(np.concatenate(links).round(12), axis=0)
        centers = r.get("actuation_centers") or [list(np.mean(points, axis=0))]
        return RobotModel(points, centers, link_sizes=tuple(len(l) for l in links))

    @property
    def robot_length(self) -> float:
        r = self.doc["robot"]
        if "length" in r:
            return float(r["length"])
        pts = self.robot.points
        return float(np.max(pts.max(axis=0) - pts.min(axis=0)))

    def _environment(self, extra: list[Box], check_regions: bool) -> VoxelEnvironment:
        env = self.doc["environment"]
        obstacles = [_box(o) for o in env.get("obstacles", [])] + list(extra)
        regions = [Region(r["id"], Box(tuple(r["lower"]), tuple(r["upper"]), r["id"]))
                   for r in env.get("regions", [])]
        return VoxelEnvironment(env["lower"], env["upper"], env["resolution"], obstacles, regions, check_regions)

    @cached_property
    def planning_env(self) -> VoxelEnvironment:
        return self._environment([], True)

    def execution_obstacles(self, block: list[str] | None = None) -> list[Box]:
        extra = [_box(o) for o in self.execution.get("extra_obstacles", [])]
        names = self.execution.get("block", []) if block is None else block
        by_name = {p.name: p for p in self.passages}
        for name in names:
            if name not in by_name:
                raise UsageError(f"unknown passage {name!r}; known: {sorted(by_name)}")
            extra.append(by_name[name])
        return extra

    def execution_env(self, block: list[str] | None = None) -> VoxelEnvironment:
        extra = self.execution_obstacles(block)
        if not extra:
            return self.planning_env
        key = ("exec", tuple((b.lower, b.upper) for b in extra))
        if key not in self._cache:
            self._cache[key] = self._environment(extra, False)
        return self._cache[key]

    def simulator(self, env: VoxelEnvironment | None = None) -> KinematicSimulator:
        return KinematicSimulator(env or self.planning_env, self.robot, self.space, self.metric,
                                  self.gains, eps_goal=self.eps_goal)

    @cached_property
    def planning_sim(self) -> KinematicSimulator:
        return self.simulator()

    @cached_property
    def clusterer(self) -> ParticleClusterer:
        return ParticleClusterer(self.planning_sim, self.clustering)

    def with_overrides(self, overrides: dict) -> "Scenario":
        return scenario_from_dict(apply_overrides(self.doc, overrides), self.source)

    def validate_semantics(self) -> None:
        sp = self.space
        for key in ("start", "goal"):
            if len(self.doc[key]) != sp.dim:
                raise UsageError(f"scenario field {key}: {sp.name} needs {sp.dim} values")
        env = self.planning_env
        if env.dim != sp.wdim:
            raise UsageError(f"scenario field environment: {sp.name} needs {sp.wdim}-D bounds")
        if self.robot.wdim != sp.wdim:
            raise UsageError(f"scenario field robot.links: {sp.name} needs {sp.wdim}-D boxes")
        if check_collision(env, self.robot, self.start):
            raise UsageError("scenario field start: start configuration is in collision")
        g = self.goal.translation
        if np.any(g < env.origin) or np.any(g > env.extent_upper):
            raise UsageError("scenario field goal: goal lies outside the environment")
        self.bounds.validate(sp)
        # touch lazily-built configs so their errors surface at load time
        _ = (self.planner_params, self.clustering, self.adaptation, self.gains, self.detector)


def scenario_from_dict(doc: dict, source: str = "") -> Scenario:
    validate_document(doc)
    sc = Scenario(copy.deepcopy(doc), source)
    sc.validate_semantics()
    return sc


def bundled_scenarios() -> list[str]:
    files = resources.files("contactpolicy") / "scenarios"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_scenario(path) -> Scenario:
    """Load a scenario file, or a bundled scenario by name."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("contactpolicy") / "scenarios" / f"{path}.json"
        if not bundled.is_file():
            raise UsageError(f"scenario not found: {path} (bundled: {', '.join(bundled_scenarios())})")
        text, source = bundled.read_text(), f"bundled:{path}"
    else:
        text, source = p.read_text(), str(p)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"scenario {source} is not valid JSON: {exc}") from exc
    return scenario_from_dict(doc, source)
