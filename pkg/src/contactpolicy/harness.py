"""Experiment orchestration: plan, execute and sweep runs, with reports.

Run ``i`` of an experiment with master seed ``s`` uses the seed
``derive_seed(s, i)``: the first 8 bytes (big-endian, top bit cleared) of
``sha256(f"{s}:{i}")``.  Reports keep raw per-run records; aggregates are
always recomputed from them.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .planner import Planner, SolutionSet
from .policy import PolicyGraph, build_policy, execute_policy
from .scenario import Scenario, load_scenario, scenario_from_dict
from .spaces import NoiseModel, UsageError
from .trace import (policy_records, read_trace, solution_set_from_records, solution_set_records, write_trace)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_SOLUTION = 2

# dotted scenario paths for short sweep/CLI parameter names
PARAM_ALIASES = {
    "gamma": "gamma",
    "particles": "planner.n_particles",
    "n_particles": "planner.n_particles",
    "method": "clustering.method",
    "dwcr": "clustering.wcr_threshold",
    "wcr_threshold": "clustering.wcr_threshold",
    "a_importance": "adaptation.a_importance",
    "iterations": "planner.max_iterations",
    "plan_time": "planner.t_planning",
    "budget_steps": "execution.budget_steps",
}


def derive_seed(master: int, index: int) -> int:
    digest = hashlib.sha256(f"{int(master)}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def resolve_param(name: str) -> str:
    return PARAM_ALIASES.get(name, name)


def overrides_from(params: dict) -> dict:
    return {resolve_param(k): v for k, v in params.items() if v is not None}


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation (0, 0 for no values)."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return 0.0, 0.0
    return float(arr.mean()), float(arr.std())


def fmt_mean_std(values, digits: int = 2) -> str:
    m, s = mean_std(values)
    return f"{m:.{digits}f} [{s:.{digits}f}]"


@dataclass
class ExperimentReport:
    """Raw run records plus aggregates derived from them.

    Plan records carry ``kind == "plan"``; execution records ``kind == "exec"``
    and a ``policy`` key naming the plan they executed.
    """

    records: list = field(default_factory=list)
    group_keys: tuple = ()

    def plans(self, group=None) -> list[dict]:
        return [r for r in self.records if r["kind"] == "plan" and (group is None or self._group(r) == group)]

    def executions(self, group=None) -> list[dict]:
        return [r for r in self.records if r["kind"] == "exec" and (group is None or self._group(r) == group)]

    def _group(self, rec) -> tuple:
        return tuple(rec.get("params", {}).get(k) for k in self.group_keys)

    def groups(self) -> list[tuple]:
        seen = []
        for r in self.records:
            g = self._group(r)
            if g not in seen:
                seen.append(g)
        return seen

    def aggregate(self, group=None) -> dict:
        plans = self.plans(group)
        execs = self.executions(group)
        per_policy = {}
        for r in execs:
            per_policy.setdefault(r["policy"], []).append(1.0 if r["outcome"] == "success" else 0.0)
        p_exec = [float(np.mean(v)) for _, v in sorted(per_policy.items())]
        return {
            "plans": len(plans),
            "p_plan": mean_std([1.0 if p["solutions"] > 0 else 0.0 for p in plans]) if plans else None,
            "executions": len(execs),
            "p_exec": mean_std(p_exec) if p_exec else None,
            "success_rate": mean_std([1.0 if r["outcome"] == "success" else 0.0 for r in execs]) if execs else None,
            "actions": mean_std([r["actions"] for r in execs]) if execs else None,
            "solutions": mean_std([p["solutions"] for p in plans]) if plans else None,
        }

    def rows(self) -> list[dict]:
        out = []
        for g in self.groups():
            agg = self.aggregate(g)
            row = dict(zip(self.group_keys, g))

            def cell(key):
                v = agg[key]
                return "" if v is None else f"{v[0]:.3f} [{v[1]:.3f}]"

            row.update({"plans": agg["plans"], "P_plan": "" if agg["p_plan"] is None else f"{agg['p_plan'][0]:.3f}",
                        "executions": agg["executions"], "P_exec": cell("p_exec"),
                        "actions": cell("actions"), "solutions": cell("solutions")})
            out.append(row)
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        return buf.getvalue()

    def deterministic_records(self) -> list[dict]:
        """Records without wall-clock fields, for reproducibility comparisons."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def to_records(self) -> list[dict]:
        head = {"type": "report", "group_keys": list(self.group_keys)}
        return [head] + [dict(r, type="record") for r in self.records] + [
            {"type": "aggregate", "group": list(g), **_agg_plain(self.aggregate(g))} for g in self.groups()]

    @classmethod
    def from_records(cls, records: list[dict]) -> "ExperimentReport":
        head = next(r for r in records if r["type"] == "report")
        recs = [{k: v for k, v in r.items() if k != "type"} for r in records if r["type"] == "record"]
        return cls(recs, tuple(head["group_keys"]))


def _agg_plain(agg: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in agg.items()}


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

@dataclass
class PlanOutcome:
    scenario: Scenario
    seed: int
    solution_set: SolutionSet
    wall_time: float
    records: list

    @property
    def solved(self) -> bool:
        return bool(self.solution_set.solutions)


def plan_header(scenario: Scenario, seed: int) -> dict:
    return {"scenario": scenario.name, "scenario_digest": scenario.digest, "seed": int(seed)}


def run_plan(scenario: Scenario, seed: int) -> PlanOutcome:
    rng = np.random.default_rng(seed)
    planner = Planner(scenario.planning_sim, scenario.clusterer, scenario.planner_params, scenario.noise,
                      scenario.bounds, scenario.start, scenario.goal)
    started = time.perf_counter()
    tree = planner.plan(rng)
    wall = time.perf_counter() - started
    records = solution_set_records(tree, plan_header(scenario, seed))
    return PlanOutcome(scenario, seed, tree, wall, records)


def cmd_plan(scenario: Scenario, seed: int, out_path) -> tuple[int, PlanOutcome]:
    """Plan once and write the trace; exit status 2 when nothing was solved."""
    result = run_plan(scenario, seed)
    write_trace(out_path, result.records)
    log.info("plan %s seed %d: %s", scenario.name, seed, result.solution_set.stats)
    return (EXIT_OK if result.solved else EXIT_NO_SOLUTION), result


def load_plan(path, scenario: Scenario | None = None) -> tuple[SolutionSet, dict]:
    records = read_trace(path)
    header = records[0] if records else {}
    if header.get("kind") != "plan":
        raise UsageError(f"{path} is not a plan trace")
    tree = solution_set_from_records(records)
    if scenario is not None:
        check_compatible(header, tree, scenario)
    return tree, header


def check_compatible(header: dict, tree: SolutionSet, scenario: Scenario) -> None:
    if header.get("scenario") != scenario.name:
        raise UsageError(f"trace was planned for scenario {header.get('scenario')!r}, not {scenario.name!r}")
    if tree.space is not scenario.space:
        raise UsageError("trace and scenario use different configuration spaces")
    if not (np.allclose(tree.start, scenario.start.vector) and np.allclose(tree.goal, scenario.goal.vector)):
        raise UsageError("trace start/goal differ from the scenario")


# ---------------------------------------------------------------------------
# passages
# ---------------------------------------------------------------------------

def passages_crossed(scenario: Scenario, points) -> list[str]:
    """Named passages whose boxes contain any of the translations, in visiting order."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    order = []
    for p in pts:
        for box in scenario.passages:
            if box.name not in order and box.contains(p[None])[0]:
                order.append(box.name)
    return order


def _densify(points, step: float) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        out.extend(a + (b - a) * t for t in np.linspace(0, 1, n + 1)[1:])
    return np.asarray(out)


def initial_route(graph: PolicyGraph) -> list[int]:
    """Vertices visited if every action has its most likely planned outcome."""
    route = [graph.root]
    for e in graph.route(graph.root):
        route.append(e.dst)
    return route


def planned_passages(scenario: Scenario, graph: PolicyGraph) -> list[str]:
    """Passages swept by the straight segments between the initial route's means."""
    w = scenario.space.wdim
    route = initial_route(graph)
    pts = np.asarray([graph.vertices[v].expect[:w] for v in route])
    if len(pts) < 2:
        return []
    return passages_crossed(scenario, _densify(pts, 0.5 * scenario.planning_env.resolution))


def route_passages(scenario: Scenario, graph: PolicyGraph) -> list[str]:
    """Passages crossed when the policy is executed without noise in the unblocked world.

    Straight segments between node means can cut through obstacles that the
    robot actually slides around, so the nominal execution decides.  Falls
    back to the segments when the nominal run crosses no passage.
    """
    executor = scenario.simulator(scenario.execution_env([]))
    res = execute_policy(copy.deepcopy(graph), executor, scenario.clusterer, scenario.start, scenario.goal,
                         scenario.eps_goal, scenario.detector, NoiseModel(), np.random.default_rng(0),
                         scenario.budget_steps, scenario.max_actions)
    crossed = passages_crossed(scenario, np.asarray(res.trajectory)[:, :scenario.space.wdim])
    return crossed or planned_passages(scenario, graph)


def trajectory_passage(scenario: Scenario, trajectory) -> str | None:
    w = scenario.space.wdim
    found = passages_crossed(scenario, np.asarray(trajectory)[:, :w])
    return found[0] if found else None


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def resolve_block(scenario: Scenario, graph: PolicyGraph, block, crossed: list[str] | None = None) -> list[str]:
    """Passage names to block; ``["auto"]`` means the initial route's first passage."""
    if not block:
        return []
    names = list(block)
    if "auto" in names:
        names.remove("auto")
        crossed = route_passages(scenario, graph) if crossed is None else crossed
        if crossed:
            names.append(crossed[0])
    return names


def run_executions(scenario: Scenario, tree: SolutionSet, n_runs: int, seed: int, *, block=None,
                   budget_steps: int | None = None, persist: bool = False, policy_id: str = "p0",
                   params: dict | None = None, trace: list | None = None) -> list[dict]:
    """Execute the policy ``n_runs`` times; returns one record per run.

    Each run starts from a fresh policy built from ``tree`` unless ``persist``
    is set, in which case the adapted graph carries over between runs.
    """
    if n_runs < 1:
        raise UsageError("n_runs must be at least 1")
    base = build_policy(tree, scenario.adaptation, scenario.planner_params)
    initial = route_passages(scenario, base) if scenario.passages else []
    blocked = resolve_block(scenario, base, block if block is not None else scenario.execution.get("block", []),
                            initial)
    env = scenario.execution_env(blocked)
    executor = scenario.simulator(env)
    budget = scenario.budget_steps if budget_steps is None else int(budget_steps)
    graph = base
    out = []
    for i in range(n_runs):
        run_seed = derive_seed(seed, i)
        if not persist or i == 0:
            graph = build_policy(tree, scenario.adaptation, scenario.planner_params)
        started = time.perf_counter()
        res = execute_policy(graph, executor, scenario.clusterer, scenario.start, scenario.goal,
                             scenario.eps_goal, scenario.detector, scenario.noise,
                             np.random.default_rng(run_seed), budget, scenario.max_actions)
        wall = time.perf_counter() - started
        rec = {
            "kind": "exec", "policy": policy_id, "run": i, "seed": run_seed, "outcome": res.outcome,
            "actions": res.actions, "steps": res.steps, "insertions": res.insertions,
            "wall_time": wall, "blocked": blocked, "params": dict(params or {}),
        }
        if scenario.passages:
            rec["initial_passage"] = initial[0] if initial else None
            rec["passage"] = trajectory_passage(scenario, res.trajectory)
        out.append(rec)
        if trace is not None:
            trace.append({"type": "run", **{k: v for k, v in rec.items() if k != "wall_time"}})
            trace.extend({"type": "event", "policy": policy_id, "run": i, **e} for e in res.log)
            trace.append({"type": "trajectory", "policy": policy_id, "run": i, "q": res.trajectory})
    if trace is not None and persist:
        trace.extend(policy_records(graph))
    return out


def cmd_execute(plan_path, scenario: Scenario, n_runs: int, seed: int, *, budget_steps: int | None = None,
                block=None, out_path=None, persist: bool = False) -> ExperimentReport:
    tree, header = load_plan(plan_path, scenario)
    trace: list = [{"type": "header", "kind": "execute", "version": 1, "scenario": scenario.name,
                    "plan_seed": header.get("seed"), "seed": int(seed), "n_runs": int(n_runs)}]
    recs = run_executions(scenario, tree, n_runs, seed, block=block, budget_steps=budget_steps,
                          persist=persist, trace=trace)
    report = ExperimentReport(recs)
    if out_path is not None:
        write_trace(out_path, trace + report.to_records())
    return report


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def grid_points(grid: dict) -> list[dict]:
    if not grid:
        raise UsageError("parameter grid is empty")
    keys = list(grid)
    for k in keys:
        if not grid[k]:
            raise UsageError(f"parameter grid entry {k!r} has no values")
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _sweep_task(args) -> list[dict]:
    doc, source, point, plan_seed, n_exec, exec_seed, block, policy_id = args
    scenario = scenario_from_dict(doc, source).with_overrides(overrides_from(point))
    plan = run_plan(scenario, plan_seed)
    recs = [{"kind": "plan", "policy": policy_id, "seed": plan_seed, "solutions": len(plan.solution_set.solutions),
             "first_solution_iteration": plan.solution_set.stats.get("first_solution_iteration"),
             "nodes": plan.solution_set.stats.get("nodes"), "wall_time": plan.wall_time, "params": point}]
    if plan.solved and n_exec > 0:
        recs.extend(run_executions(scenario, plan.solution_set, n_exec, exec_seed, block=block,
                                   policy_id=policy_id, params=point))
    return recs


def cmd_sweep(scenario: Scenario, grid: dict, seeds: list[int], *, n_exec: int = 8, block=None,
              jobs: int = 1, out_path=None) -> ExperimentReport:
    """Plan (and execute) every grid point for every seed.

    Plans use seed ``derive_seed(seed, 0)``; executions of that plan use
    ``derive_seed(seed, 1)`` as their master seed.
    """
    if not seeds:
        raise UsageError("sweep needs at least one seed")
    points = grid_points(grid)
    tasks = []
    for gi, point in enumerate(points):
        for seed in seeds:
            tasks.append((scenario.doc, scenario.source, point, derive_seed(seed, 0), n_exec,
                          derive_seed(seed, 1), block, f"g{gi}-s{seed}"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_task, tasks))
    else:
        results = [_sweep_task(t) for t in tasks]
    report = ExperimentReport([r for rs in results for r in rs], tuple(grid))
    if out_path is not None:
        write_trace(out_path, report.to_records())
    return report


def policy_set(scenario: Scenario, seeds: list[int]) -> list[PlanOutcome]:
    """Plan once per seed (seed derived as in sweeps)."""
    return [run_plan(scenario, derive_seed(s, 0)) for s in seeds]


def replay(path) -> dict:
    """Re-read a trace; check byte-stable round trip and rebuild what it describes."""
    from .trace import parse, policy_from_records, serialize

    text = Path(path).read_text()
    records = parse(text)
    stable = serialize(records) == text
    summary: dict = {"records": len(records), "byte_stable": stable}
    if not records:
        return summary
    kind = records[0].get("kind") if records[0]["type"] == "header" else records[0]["type"]
    summary["kind"] = kind
    if kind == "plan":
        tree = solution_set_from_records(records)
        summary["nodes"] = len(tree.nodes)
        summary["solutions"] = len(tree.solutions)
        if tree.solutions:
            from .policy import AdaptationConfig
            graph = build_policy(tree, AdaptationConfig())
            summary["policy_vertices"] = len(graph.vertices)
            summary["policy_edges"] = len(graph.edges)
            summary["initial_route"] = initial_route(graph)
    elif kind == "execute":
        runs = [r for r in records if r["type"] == "run"]
        summary["runs"] = len(runs)
        summary["outcomes"] = [r["outcome"] for r in runs]
        summary["observed_insertions"] = sum(1 for r in records if r.get("event") == "observed_node")
        if any(r["type"] == "policy" for r in records):
            graph = policy_from_records(records)
            summary["policy_vertices"] = len(graph.vertices)
    elif kind == "report":
        rep = ExperimentReport.from_records(records)
        summary["rows"] = rep.rows()
    return summary


def scenario_with(path_or_name, **params) -> Scenario:
    sc = load_scenario(path_or_name)
    ov = overrides_from(params)
    return sc.with_overrides(ov) if ov else sc


__all__ = [
    "EXIT_OK", "EXIT_ERROR", "EXIT_NO_SOLUTION", "ExperimentReport", "PlanOutcome", "cmd_execute", "cmd_plan",
    "cmd_sweep", "derive_seed", "fmt_mean_std", "grid_points", "initial_route", "load_plan", "mean_std",
    "passages_crossed", "plan_header", "planned_passages", "policy_set", "replay", "route_passages", "run_executions", "run_plan",
    "scenario_with", "trajectory_passage",
]
