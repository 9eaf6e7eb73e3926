"""Line-delimited JSON traces of planning and execution runs.

Every line is one JSON object with a ``type`` key.  Encoding is canonical
(sorted keys, compact separators, shortest round-trip float repr) so
serialize -> parse -> serialize is byte-stable.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .planner import Action, PlannerNode, SolutionSet
from .policy import AdaptationConfig, PolicyEdge, PolicyGraph, PolicyVertex
from .spaces import UsageError, space_from_name

TRACE_VERSION = 1


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dumps(record: dict) -> str:
    return json.dumps(_plain(record), sort_keys=True, separators=(",", ":"), allow_nan=False)


def serialize(records: Iterable[dict]) -> str:
    return "".join(dumps(r) + "\n" for r in records)


def parse(text: str) -> list[dict]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise UsageError(f"trace line {lineno}: {exc}") from exc
        if not isinstance(rec, dict) or "type" not in rec:
            raise UsageError(f"trace line {lineno}: record without a type")
        out.append(rec)
    return out


def write_trace(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize(records))
    return path


def read_trace(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"trace not found: {path}")
    return parse(p.read_text())


# ---------------------------------------------------------------------------
# solution sets
# ---------------------------------------------------------------------------

def _action_record(action: Action | None):
    return None if action is None else {"id": action.id, "target": list(action.target)}


def _action_from(rec) -> Action | None:
    return None if rec is None else Action.make(rec["id"], rec["target"])


def solution_set_records(tree: SolutionSet, header: dict | None = None) -> list[dict]:
    """Header, one ``node`` record per tree node (creation order), solutions, stats."""
    out = [dict(header or {}, type="header", kind="plan", version=TRACE_VERSION,
                space=tree.space.name, n_particles=tree.n_particles,
                start=tree.start, goal=tree.goal)]
    for n in tree.nodes:
        out.append({
            "type": "node", "id": n.id, "parent": n.parent, "action": _action_record(n.action),
            "belief": n.belief, "p_transition": n.p_transition, "p_effective": n.p_effective,
            "p_path": n.p_path, "reverse": [n.reverse_successes, n.reverse_attempts],
            "split": n.is_split_result, "retry_reversibility": n.retry_reversibility,
            "expect": n.expect, "var_l1": n.var_l1, "depth": n.depth,
        })
    for k, path in enumerate(tree.solutions):
        out.append({"type": "solution", "index": k, "path": list(path)})
    out.append({"type": "excluded", "ids": sorted(tree.nn_excluded)})
    out.append({"type": "stats", **tree.stats})
    return out


def solution_set_from_records(records: list[dict]) -> SolutionSet:
    header = next((r for r in records if r["type"] == "header"), None)
    if header is None or header.get("kind") != "plan":
        raise UsageError("not a plan trace")
    space = space_from_name(header["space"])
    nodes = []
    solutions, excluded, stats = [], set(), {}
    for r in records:
        t = r["type"]
        if t == "node":
            if r["id"] != len(nodes):
                raise UsageError("plan trace nodes out of order")
            node = PlannerNode(
                r["id"], np.asarray(r["belief"], dtype=float).reshape(-1, space.dim), _action_from(r["action"]),
                r["parent"], p_transition=r["p_transition"], p_effective=r["p_effective"], p_path=r["p_path"],
                reverse_successes=r["reverse"][0], reverse_attempts=r["reverse"][1], is_split_result=r["split"],
                expect=np.asarray(r["expect"], dtype=float), var_l1=r["var_l1"], depth=r["depth"],
                retry_reversibility=r["retry_reversibility"])
            if node.parent is not None:
                nodes[node.parent].children.append(node.id)
            nodes.append(node)
        elif t == "solution":
            solutions.append(list(r["path"]))
        elif t == "excluded":
            excluded = set(r["ids"])
        elif t == "stats":
            stats = {k: v for k, v in r.items() if k != "type"}
    return SolutionSet(space, nodes, solutions, excluded, np.asarray(header["start"], dtype=float),
                       np.asarray(header["goal"], dtype=float), header["n_particles"], stats)


# ---------------------------------------------------------------------------
# policy graphs
# ---------------------------------------------------------------------------

def policy_records(graph: PolicyGraph) -> list[dict]:
    """Structure and counts of a (possibly adapted) policy graph."""
    cfg = graph.cfg
    out = [{"type": "policy", "space": graph.space.name, "goal": graph.goal, "root": graph.root,
            "a_importance": cfg.a_importance, "p_goal": cfg.p_goal, "n_attempt_cap": cfg.n_attempt_cap,
            "penalty": cfg.penalty}]
    for vid in sorted(graph.vertices):
        v = graph.vertices[vid]
        out.append({"type": "vertex", "id": v.id, "belief": v.belief, "action": v.action_id,
                    "expect": v.expect, "observed": v.observed, "goal": v.goal})
    for key in sorted(graph.edges):
        e = graph.edges[key]
        out.append({"type": "edge", "src": e.src, "dst": e.dst, "action": _action_record(e.action),
                    "n_successful": e.n_successful, "n_attempts": e.n_attempts,
                    "retry_reversibility": e.retry_reversibility, "kind": e.kind})
    return out


def policy_from_records(records: list[dict]) -> PolicyGraph:
    head = next((r for r in records if r["type"] == "policy"), None)
    if head is None:
        raise UsageError("no policy record in trace")
    cfg = AdaptationConfig(head["a_importance"], head["p_goal"], head["n_attempt_cap"], head["penalty"])
    space = space_from_name(head["space"])
    graph = PolicyGraph(space, head["goal"], cfg)
    graph.root = head["root"]
    for r in records:
        if r["type"] == "vertex":
            graph.add_vertex(PolicyVertex(r["id"], np.asarray(r["belief"], dtype=float).reshape(-1, space.dim),
                                          r["action"], np.asarray(r["expect"], dtype=float),
                                          r["observed"], r["goal"]))
    for r in records:
        if r["type"] == "edge":
            graph.add_edge(PolicyEdge(r["src"], r["dst"], _action_from(r["action"]), r["n_successful"],
                                      r["n_attempts"], r["retry_reversibility"], r["kind"]))
    graph.rebuild()
    return graph
