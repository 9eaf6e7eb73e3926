"""Partial policies over planned solution paths, and their resilient execution.

The policy is an explicit graph whose vertices are planner nodes (plus nodes
observed during execution).  Edge costs are ``attempts / probability`` and a
Dijkstra search from the goal vertices gives every vertex its cost-to-goal and
next action.  During execution each observed outcome updates the edge counts
and the policy is rebuilt.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import ParticleClusterer
from .planner import START_ACTION_ID, Action, PlannerParams, SolutionSet, effective_probability
from .simulator import KinematicSimulator, StuckDetector
from .spaces import Configuration, NoiseModel, UsageError, mean_array

log = logging.getLogger(__name__)

GOAL_ACTION_ID = "goal"


class PolicyError(UsageError):
    pass


@dataclass(frozen=True)
class AdaptationConfig:
    a_importance: int = 500
    p_goal: float = 0.51
    n_attempt_cap: int = 50
    penalty: float = 1e6

    def __post_init__(self):
        if int(self.a_importance) != self.a_importance or self.a_importance < 1:
            raise UsageError("a_importance must be a positive integer")
        if not 0 < self.p_goal <= 1:
            raise UsageError("p_goal must lie in (0, 1]")


@dataclass
class PolicyVertex:
    id: int
    belief: np.ndarray
    action_id: str | None
    expect: np.ndarray
    observed: bool = False
    goal: bool = False


@dataclass
class PolicyEdge:
    src: int
    dst: int
    action: Action
    n_successful: float
    n_attempts: float
    retry_reversibility: float = 1.0
    kind: str = "forward"
    cost: float = float("inf")
    attempts: int = 0
    capped: bool = False

    @property
    def probability(self) -> float:
        if self.n_attempts <= 0:
            return 0.0
        return min(1.0, max(0.0, self.n_successful / self.n_attempts))

    @property
    def key(self) -> tuple:
        return (self.src, self.dst, self.action.id)


def attempts_estimate(p: float, r: float, p_goal: float, n_attempt_cap: int) -> tuple[int, bool]:
    """Fewest attempts whose effective probability reaches ``p_goal``.

    Returns ``(k, capped)``; ``capped`` is True when even ``n_attempt_cap``
    attempts fall short, in which case ``k == n_attempt_cap``.
    """
    if p <= 0:
        raise PolicyError("zero-probability edges cannot be traversed")
    at, reached = 1.0, 0.0
    for k in range(1, int(n_attempt_cap) + 1):
        reached += at * p
        at *= (1.0 - p) * r
        if reached >= p_goal - 1e-12:
            return k, False
    return int(n_attempt_cap), True


def increase_probability(edge: PolicyEdge, cfg: AdaptationConfig) -> float:
    """Count one observed success at weight ``a_importance``."""
    edge.n_attempts += cfg.a_importance
    edge.n_successful += cfg.a_importance
    return edge.probability


def reduce_probability(edge: PolicyEdge, cfg: AdaptationConfig) -> float:
    """Count one observed failure at weight ``a_importance``."""
    edge.n_attempts += cfg.a_importance
    return edge.probability


class PolicyGraph:
    """Vertices, count-carrying edges, costs and Dijkstra routing."""

    def __init__(self, space, goal, cfg: AdaptationConfig):
        self.space = space
        self.goal = np.asarray(goal, dtype=float)
        self.cfg = cfg
        self.vertices: dict[int, PolicyVertex] = {}
        self.edges: dict[tuple, PolicyEdge] = {}
        self.dijkstra_distance: dict[int, float] = {}
        self.next_edge: dict[int, PolicyEdge] = {}
        self.root: int | None = None

    # -- structure -------------------------------------------------------------

    def add_vertex(self, vertex: PolicyVertex) -> PolicyVertex:
        self.vertices[vertex.id] = vertex
        return vertex

    def add_edge(self, edge: PolicyEdge) -> PolicyEdge:
        if edge.src not in self.vertices or edge.dst not in self.vertices:
            raise PolicyError("edge endpoints must be vertices")
        self.edges.setdefault(edge.key, edge)
        return self.edges[edge.key]

    def edge(self, src: int, dst: int, action_id: str) -> PolicyEdge | None:
        return self.edges.get((src, dst, action_id))

    def out_edges(self, v: int) -> list[PolicyEdge]:
        return [e for e in self.edges.values() if e.src == v]

    def new_vertex_id(self) -> int:
        return max(self.vertices) + 1 if self.vertices else 0

    @property
    def goal_vertices(self) -> list[int]:
        return sorted(v.id for v in self.vertices.values() if v.goal)

    def goal_action(self) -> Action:
        return Action.make(GOAL_ACTION_ID, self.goal)

    # -- costs and routing -----------------------------------------------------

    def rebuild(self) -> None:
        """Recompute edge costs and cost-to-goal for every vertex."""
        cfg = self.cfg
        for e in self.edges.values():
            p = e.probability
            if p <= 0:
                e.cost, e.attempts, e.capped = float("inf"), 0, False
                continue
            k, capped = attempts_estimate(p, e.retry_reversibility, cfg.p_goal, cfg.n_attempt_cap)
            e.attempts, e.capped = k, capped
            e.cost = (1.0 / p) * k * (cfg.penalty if capped else 1.0)
        incoming: dict[int, list[PolicyEdge]] = {v: [] for v in self.vertices}
        for key in sorted(self.edges):
            e = self.edges[key]
            if np.isfinite(e.cost):
                incoming[e.dst].append(e)
        dist = {v: float("inf") for v in self.vertices}
        nxt: dict[int, PolicyEdge] = {}
        heap = []
        for g in self.goal_vertices:
            dist[g] = 0.0
            heap.append((0.0, g))
        heapq.heapify(heap)
        done = set()
        while heap:
            d, v = heapq.heappop(heap)
            if v in done:
                continue
            done.add(v)
            for e in incoming[v]:
                if e.src in done:
                    continue
                cand = e.cost + d
                if cand < dist[e.src]:
                    dist[e.src] = cand
                    nxt[e.src] = e
                    heapq.heappush(heap, (cand, e.src))
        self.dijkstra_distance = dist
        self.next_edge = nxt

    def route(self, v: int) -> list[PolicyEdge]:
        out = []
        seen = {v}
        while v in self.next_edge:
            e = self.next_edge[v]
            out.append(e)
            v = e.dst
            if v in seen:  # defensive; Dijkstra trees are acyclic
                break
            seen.add(v)
        return out

    def goal_probability(self, v: int) -> float:
        """Product of retry-aware edge probabilities along the routed path."""
        if self.vertices[v].goal:
            return 1.0
        if not np.isfinite(self.dijkstra_distance.get(v, float("inf"))):
            return 0.0
        prob = 1.0
        for e in self.route(v):
            prob *= effective_probability(e.probability, e.retry_reversibility, self.cfg.n_attempt_cap)
        return prob

    def action_for(self, v: int) -> Action | None:
        if self.vertices[v].goal:
            return self.goal_action()
        e = self.next_edge.get(v)
        return None if e is None else e.action

    def snapshot(self) -> dict:
        """Costs and routing in a comparable form."""
        return {
            "edges": {f"{k[0]}>{k[1]}:{k[2]}": (e.n_successful, e.n_attempts, e.cost)
                      for k, e in sorted(self.edges.items())},
            "distance": dict(sorted(self.dijkstra_distance.items())),
            "next": {v: e.action.id for v, e in sorted(self.next_edge.items())},
        }


def build_policy(solutions: SolutionSet, cfg: AdaptationConfig, params: PlannerParams | None = None) -> PolicyGraph:
    """Policy graph over the solution paths, with reverse edges for retries."""
    if not solutions.solutions:
        raise PolicyError("cannot build a policy from an empty solution set")
    n_particles = params.n_particles if params is not None else solutions.n_particles
    graph = PolicyGraph(solutions.space, solutions.goal, cfg)
    nodes = solutions.nodes
    for nid in solutions.solution_nodes():
        node = nodes[nid]
        graph.add_vertex(PolicyVertex(nid, node.belief, None if node.action is None else node.action.id,
                                      node.expect))
    graph.root = solutions.solutions[0][0]
    for path in solutions.solutions:
        graph.vertices[path[-1]].goal = True
        for u, v in zip(path[:-1], path[1:]):
            child = nodes[v]
            fwd = graph.add_edge(PolicyEdge(u, v, child.action, float(child.size), float(n_particles),
                                            child.retry_reversibility, "forward"))
            rev_action = Action.make(f"r{v}-{u}", nodes[u].expect)
            succ, att = (child.reverse_successes, child.reverse_attempts) if child.reverse_attempts else (1, 1)
            graph.add_edge(PolicyEdge(v, u, rev_action, float(succ), float(att), fwd.probability, "reverse"))
    if not graph.goal_vertices:
        raise PolicyError("no goal-reaching vertex")
    graph.rebuild()
    return graph


@dataclass
class QueryResult:
    action: Action | None
    vertex: int | None
    inserted: list = field(default_factory=list)
    events: list = field(default_factory=list)


def insert_observed_node(graph: PolicyGraph, q_current, a_performed: Action, previous: int | None) -> PolicyVertex:
    """Add a singleton-belief vertex with a fresh reverse edge to ``previous``."""
    vec = q_current.vector if isinstance(q_current, Configuration) else np.asarray(q_current, dtype=float)
    vid = graph.new_vertex_id()
    vertex = graph.add_vertex(PolicyVertex(vid, vec[None].copy(), a_performed.id, vec.copy(), observed=True))
    if previous is not None:
        prev = graph.vertices[previous]
        graph.add_edge(PolicyEdge(vid, previous, Action.make(f"r{vid}-{previous}", prev.expect),
                                  1.0, 1.0, 1.0, "reverse"))
    graph.rebuild()
    return vertex


def potential_vertices(graph: PolicyGraph, action_id: str) -> list[int]:
    out = {v.id for v in graph.vertices.values() if v.action_id == action_id}
    out.update(e.dst for e in graph.edges.values() if e.action.id == action_id)
    return sorted(out)


def policy_query(graph: PolicyGraph, q_current, a_performed: Action, previous: int | None,
                 clusterer: ParticleClusterer, _depth: int = 0) -> QueryResult:
    """Match the observed outcome, adapt edge probabilities, return the next action.

    Returns a result whose ``action`` is None when the probability of reaching
    the goal from the matched vertex has dropped below ``p_goal``.
    """
    cfg = graph.cfg
    vec = q_current.vector if isinstance(q_current, Configuration) else np.asarray(q_current, dtype=float)
    if a_performed.id == START_ACTION_ID:
        potential = [graph.root] if graph.root is not None else []
    else:
        potential = potential_vertices(graph, a_performed.id)
    matching = [v for v in potential if clusterer.matches(graph.vertices[v].belief, vec)]
    if not matching:
        if _depth > 0:
            raise PolicyError("observed node failed to match its own configuration")
        vertex = insert_observed_node(graph, vec, a_performed, previous)
        res = policy_query(graph, vec, a_performed, previous, clusterer, _depth + 1)
        res.inserted.insert(0, vertex.id)
        res.events.insert(0, {"event": "observed_node", "vertex": vertex.id, "previous": previous,
                              "action": a_performed.id, "q": [float(x) for x in vec]})
        return res
    reached = min(matching, key=lambda v: (graph.dijkstra_distance.get(v, float("inf")), v))
    events = [{"event": "match", "vertex": reached, "action": a_performed.id, "candidates": matching}]
    if previous is not None and a_performed.id != START_ACTION_ID:
        edge = graph.edge(previous, reached, a_performed.id)
        if edge is None:
            edge = graph.add_edge(PolicyEdge(previous, reached, a_performed, 0.0, 0.0, 1.0, "learned"))
        before = edge.probability
        after = increase_probability(edge, cfg)
        events.append({"event": "increase", "edge": list(edge.key), "before": before, "after": after})
        for other in potential:
            if other == reached:
                continue
            e = graph.edge(previous, other, a_performed.id)
            if e is None:
                continue
            before = e.probability
            after = reduce_probability(e, cfg)
            events.append({"event": "reduce", "edge": list(e.key), "before": before, "after": after})
    graph.rebuild()
    events.append({"event": "rebuild"})
    p_goal = graph.goal_probability(reached)
    if p_goal >= cfg.p_goal:
        action = graph.action_for(reached)
        if action is not None:
            events.append({"event": "action", "vertex": reached, "action": action.id, "p_goal": p_goal})
            return QueryResult(action, reached, [], events)
    events.append({"event": "failure", "vertex": reached, "p_goal": p_goal})
    return QueryResult(None, reached, [], events)


@dataclass
class ExecutionState:
    vertex: int | None
    q_current: np.ndarray
    a_performed: Action
    log: list = field(default_factory=list)


@dataclass
class ExecutionResult:
    outcome: str  # success | failure | timeout
    actions: int
    steps: int
    insertions: int
    log: list
    trajectory: np.ndarray


def execute_policy(graph: PolicyGraph, executor: KinematicSimulator, clusterer: ParticleClusterer,
                   start: Configuration, goal: Configuration, eps_goal: float, detector: StuckDetector,
                   noise: NoiseModel, rng: np.random.Generator, budget_steps: int,
                   max_actions: int = 500) -> ExecutionResult:
    """Query, act through the contact motion controller, feed the result back; repeat."""
    space = executor.space
    metric = executor.metric
    state = ExecutionState(None, start.vector.copy(), Action(START_ACTION_ID, tuple(start.to_list())))
    used = 0
    insertions = 0
    trajectory = [state.q_current.copy()]
    outcome = "timeout"
    actions = 0
    while True:
        if float(metric.distances(space, state.q_current, goal.vector)) <= eps_goal:
            outcome = "success"
            break
        if used >= budget_steps or actions >= max_actions:
            outcome = "timeout"
            break
        res = policy_query(graph, state.q_current, state.a_performed, state.vertex, clusterer)
        insertions += len(res.inserted)
        state.log.extend(dict(e, step=actions) for e in res.events)
        if res.action is None:
            outcome = "failure"
            break
        steps = min(executor.gains.exec_steps, budget_steps - used)
        sim = executor.contact_motion_execute(Configuration(space, state.q_current),
                                              Configuration(space, res.action.vector),
                                              detector, noise, rng, steps=steps)
        used += max(1, sim.steps)
        actions += 1
        trajectory.extend(c.vector for c in sim.trajectory[1:])
        state.log.append({"event": "execute", "step": actions, "action": res.action.id,
                          "from_vertex": res.vertex, "outcome": sim.outcome.value,
                          "sim_steps": sim.steps, "q": [float(x) for x in sim.final.vector]})
        state.q_current = sim.final.vector.copy()
        state.a_performed = res.action
        state.vertex = res.vertex
    return ExecutionResult(outcome, actions, used, insertions, state.log, np.asarray(trajectory))


def belief_mean(space, belief) -> np.ndarray:
    return mean_array(space, belief)
