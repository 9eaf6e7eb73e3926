"""Anytime belief-space RRT over particle nodes.

Nodes hold a particle belief and the action (target configuration) that
produced it.  The local planner forward-simulates particles toward a target,
clusters the results into one node per outcome, estimates how reliably each
outcome can be reversed and from that the effective (retry-aware) transition
probability.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .clustering import ParticleClusterer
from .simulator import KinematicSimulator
from .spaces import (Configuration, NoiseModel, SamplingBounds, UsageError, mean_array,
                     sample_uniform_array, variance_array)

log = logging.getLogger(__name__)

START_ACTION_ID = "start"


@dataclass(frozen=True)
class Action:
    """A commanded target configuration with a stable identifier."""

    id: str
    target: tuple

    @classmethod
    def make(cls, id: str, target) -> "Action":
        return cls(id, tuple(float(v) for v in np.asarray(target, dtype=float)))

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.target, dtype=float)


@dataclass(frozen=True)
class PlannerParams:
    n_particles: int = 24
    alpha_p: float = 0.75
    alpha_v: float = 0.75
    p_goal: float = 0.51
    eps_goal: float = 0.1
    n_attempt: int = 50
    goal_bias: float = 0.1
    t_planning: float | None = 120.0
    max_iterations: int | None = None
    connect_limit: int = 32
    max_solutions: int | None = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise UsageError("n_particles must be at least 1")
        if not 0 < self.p_goal <= 1:
            raise UsageError("p_goal must lie in (0, 1]")
        for name in ("alpha_p", "alpha_v", "goal_bias"):
            if not 0 <= getattr(self, name) <= 1:
                raise UsageError(f"{name} must lie in [0, 1]")
        if self.n_attempt < 1:
            raise UsageError("n_attempt must be at least 1")
        if self.t_planning is None and self.max_iterations is None:
            raise UsageError("planning needs a time or iteration budget")


@dataclass
class PlannerNode:
    id: int
    belief: np.ndarray
    action: Action | None
    parent: int | None
    p_transition: float = 1.0
    p_effective: float = 1.0
    p_path: float = 1.0
    reverse_attempts: int = 0
    reverse_successes: int = 0
    is_split_result: bool = False
    expect: np.ndarray | None = None
    var_l1: float = 0.0
    depth: int = 0
    retry_reversibility: float = 1.0
    children: list = field(default_factory=list)

    @property
    def reversibility(self) -> float:
        if self.reverse_attempts == 0:
            return 1.0
        return self.reverse_successes / self.reverse_attempts

    @property
    def size(self) -> int:
        return self.belief.shape[0]


@dataclass
class SolutionSet:
    """The planner tree, the solution paths found and the pruned node ids."""

    space: object
    nodes: list
    solutions: list = field(default_factory=list)
    nn_excluded: set = field(default_factory=set)
    start: np.ndarray | None = None
    goal: np.ndarray | None = None
    n_particles: int = 1
    stats: dict = field(default_factory=dict)

    def path(self, node_id: int) -> list[int]:
        out = []
        cur = node_id
        while cur is not None:
            out.append(cur)
            cur = self.nodes[cur].parent
        return out[::-1]

    def solution_nodes(self) -> list[int]:
        ids = sorted({i for s in self.solutions for i in s})
        return ids

    @property
    def stored_particles(self) -> int:
        return sum(n.size for n in self.nodes[1:])


# ---------------------------------------------------------------------------
# scalar rules
# ---------------------------------------------------------------------------

def proximity(node: PlannerNode, q, params: PlannerParams, metric, space) -> float:
    """Distance from the node's mean, inflated for unlikely or spread-out nodes."""
    vec = q.vector if isinstance(q, Configuration) else np.asarray(q, dtype=float)
    dist = float(metric.distances(space, node.expect, vec))
    return dist * _weights(node.p_path, node.var_l1, params)


def _weights(p_path, var_l1, params: PlannerParams):
    prob = (1.0 - np.asarray(p_path)) * params.alpha_p + (1.0 - params.alpha_p)
    var = erf(np.asarray(var_l1, dtype=float)) * params.alpha_v + (1.0 - params.alpha_v)
    return prob * var


def effective_probability(p: float, r: float, k: int) -> float:
    """Probability of reaching an outcome within ``k`` attempts.

    Each failed attempt must be reversed (probability ``r``) before the action
    can be retried; particles that fail to reverse are lost.
    """
    if not (0 <= p <= 1 and 0 <= r <= 1):
        raise UsageError("p and r must lie in [0, 1]")
    if k < 1:
        raise UsageError("k must be at least 1")
    at, reached = 1.0, 0.0
    for _ in range(int(k)):
        reached += at * p
        at *= (1.0 - p) * r
    return min(reached, 1.0)


def goal_fraction(node: PlannerNode, goal, eps_goal: float, metric, space) -> float:
    d = metric.distances(space, node.belief, np.asarray(goal, dtype=float))
    return float(np.mean(d <= eps_goal))


def check_goal(node: PlannerNode, goal, params: PlannerParams, metric, space) -> bool:
    return node.p_path * goal_fraction(node, goal, params.eps_goal, metric, space) >= params.p_goal


def prune_solution_branch(tree: SolutionSet, terminal: int) -> set:
    """Exclude a solution branch from nearest-neighbour search.

    The terminal is always excluded; the walk toward the root stops at the
    root or at the first node that resulted from a split (both kept).
    """
    nodes = tree.nodes
    tree.nn_excluded.add(terminal)
    cur = nodes[terminal].parent
    while cur is not None and nodes[cur].parent is not None and not nodes[cur].is_split_result:
        tree.nn_excluded.add(cur)
        cur = nodes[cur].parent
    return tree.nn_excluded


# ---------------------------------------------------------------------------
# planner
# ---------------------------------------------------------------------------

class Planner:
    """Global RRT plus the particle local planner."""

    def __init__(self, sim: KinematicSimulator, clusterer: ParticleClusterer, params: PlannerParams,
                 noise: NoiseModel, bounds: SamplingBounds, start: Configuration, goal: Configuration):
        if start.space is not sim.space or goal.space is not sim.space:
            raise UsageError("start/goal space does not match simulator")
        self.sim = sim
        self.space = sim.space
        self.metric = sim.metric
        self.clusterer = clusterer
        self.params = params
        self.noise = noise
        self.bounds = bounds
        self.start = start
        self.goal = goal
        self.simulated_particles = 0
        self.n_actions = 0
        self._action_counter = 0
        belief = np.tile(start.vector, (params.n_particles, 1))
        root = PlannerNode(0, belief, None, None, expect=start.vector.copy())
        self.tree = SolutionSet(self.space, [root], start=start.vector.copy(), goal=goal.vector.copy(),
                                n_particles=params.n_particles)
        self._expects = [root.expect]
        self._p_path = [1.0]
        self._var = [0.0]

    # -- helpers ---------------------------------------------------------------

    def new_action(self, target) -> Action:
        self._action_counter += 1
        return Action.make(f"a{self._action_counter}", target)

    def _add_node(self, node: PlannerNode) -> None:
        node.id = len(self.tree.nodes)
        self.tree.nodes.append(node)
        if node.parent is not None:
            self.tree.nodes[node.parent].children.append(node.id)
        self._expects.append(node.expect)
        self._p_path.append(node.p_path)
        self._var.append(node.var_l1)

    def nearest(self, q) -> int:
        """Node minimising proximity among non-excluded nodes (linear scan)."""
        ids = np.array([i for i in range(len(self.tree.nodes)) if i not in self.tree.nn_excluded])
        if ids.size == 0:
            raise UsageError("every node is excluded from nearest-neighbour search")
        exp = np.asarray(self._expects)[ids]
        dist = self.metric.distances(self.space, exp, np.asarray(q, dtype=float))
        w = _weights(np.asarray(self._p_path)[ids], np.asarray(self._var)[ids], self.params)
        return int(ids[int(np.argmin(dist * w))])

    def _source_particles(self, node: PlannerNode, rng) -> np.ndarray:
        n = self.params.n_particles
        if not node.is_split_result and node.size == n:
            return node.belief.copy()
        return node.belief[rng.integers(0, node.size, size=n)]

    # -- local planner ----------------------------------------------------------

    def extend(self, near_id: int, action: Action, rng: np.random.Generator) -> list[int]:
        """Forward-simulate from ``near_id`` toward ``action`` and add result nodes."""
        near = self.tree.nodes[near_id]
        n = self.params.n_particles
        src = self._source_particles(near, rng)
        res = self.sim.simulate_batch(src, action.vector, self.noise, rng)
        self.simulated_particles += n
        finals = res.final
        if np.max(self.metric.distances(self.space, finals, src)) <= 1e-12:
            return []
        clusters = self.clusterer.cluster(finals)
        split = len(clusters) > 1
        candidates = []
        for idx in clusters:
            belief = finals[idx]
            mean = mean_array(self.space, belief)
            if float(self.metric.distances(self.space, mean, near.expect)) < 1e-6:
                continue
            var = variance_array(self.space, belief, mean)
            candidates.append(PlannerNode(
                -1, belief, action, near_id,
                p_transition=len(idx) / n, is_split_result=split,
                expect=mean, var_l1=float(np.sum(np.abs(var))), depth=near.depth + 1))
        if not candidates:
            return []
        for node in candidates:
            succ, att = self.estimate_reversibility(node, near, rng)
            node.reverse_successes, node.reverse_attempts = succ, att
        total = sum(c.p_transition for c in candidates)
        for node in candidates:
            others = [c for c in candidates if c is not node]
            # mass that never left the parent counts as trivially reversible
            stay = max(0.0, 1.0 - total)
            weight = sum(c.p_transition for c in others) + stay
            if weight > 0:
                r = (sum(c.p_transition * c.reversibility for c in others) + stay) / weight
            else:
                r = node.reversibility
            node.retry_reversibility = r
            node.p_effective = effective_probability(node.p_transition, r, self.params.n_attempt)
            node.p_path = near.p_path * node.p_transition
            self._add_node(node)
        self.n_actions += 1
        return [c.id for c in candidates]

    def estimate_reversibility(self, node: PlannerNode, near: PlannerNode, rng) -> tuple[int, int]:
        """Simulate resampled particles back toward ``near``; count those that rejoin it."""
        n = self.params.n_particles
        src = node.belief[rng.integers(0, node.size, size=n)]
        res = self.sim.simulate_batch(src, near.expect, self.noise, rng)
        self.simulated_particles += n
        matched = self.clusterer.match_mask(near.belief, res.final)
        return int(np.count_nonzero(matched)), n

    def is_goal(self, node_id: int) -> bool:
        return check_goal(self.tree.nodes[node_id], self.goal.vector, self.params, self.metric, self.space)

    # -- global planner ---------------------------------------------------------

    def sample_target(self, rng) -> np.ndarray:
        if rng.random() < self.params.goal_bias:
            return self.goal.vector.copy()
        return sample_uniform_array(self.space, self.bounds, rng, 1)[0]

    def _budget_left(self, started: float, iterations: int) -> bool:
        p = self.params
        if p.max_iterations is not None and iterations >= p.max_iterations:
            return False
        if p.t_planning is not None and time.perf_counter() - started >= p.t_planning:
            return False
        if p.max_solutions is not None and len(self.tree.solutions) >= p.max_solutions:
            return False
        return True

    def step(self, rng: np.random.Generator, target=None) -> list[int]:
        """One global iteration: sample, pick the nearest node, extend (or connect)."""
        tree = self.tree
        target = self.sample_target(rng) if target is None else np.asarray(target, dtype=float)
        action = self.new_action(target)
        near = self.nearest(target)
        connect = not tree.solutions
        limit = self.params.connect_limit if connect else 1
        tol = self.sim.convergence_tol
        added = []
        for _ in range(limit):
            new = self.extend(near, action, rng)
            if not new:
                break
            added.extend(new)
            found = False
            for nid in new:
                if self.is_goal(nid):
                    tree.solutions.append(tree.path(nid))
                    prune_solution_branch(tree, nid)
                    found = True
            if found or len(new) > 1:
                break
            node = tree.nodes[new[0]]
            if (float(self.metric.distances(self.space, node.expect, target)) < tol
                    or float(self.metric.distances(self.space, node.expect, tree.nodes[near].expect)) < tol):
                break
            near = new[0]
        return added

    def plan(self, rng: np.random.Generator) -> SolutionSet:
        started = time.perf_counter()
        iterations = 0
        first = None
        while self._budget_left(started, iterations):
            iterations += 1
            self.step(rng)
            if first is None and self.tree.solutions:
                first = iterations
        self.tree.stats = {
            "iterations": iterations,
            "nodes": len(self.tree.nodes),
            "actions": self.n_actions,
            "solutions": len(self.tree.solutions),
            "first_solution_iteration": first,
            "simulated_particles": self.simulated_particles,
            "stored_particles": self.tree.stored_particles,
        }
        log.info("planning finished: %s", self.tree.stats)
        return self.tree


def plan(sim: KinematicSimulator, clusterer: ParticleClusterer, params: PlannerParams, noise: NoiseModel,
         bounds: SamplingBounds, start: Configuration, goal: Configuration,
         rng: np.random.Generator) -> SolutionSet:
    return Planner(sim, clusterer, params, noise, bounds, start, goal).plan(rng)
