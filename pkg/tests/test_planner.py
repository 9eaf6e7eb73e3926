import math

import numpy as np
import pytest

from contactpolicy.clustering import ClusteringConfig, ParticleClusterer
from contactpolicy.harness import run_plan
from contactpolicy.planner import (Action, Planner, PlannerNode, PlannerParams, SolutionSet, check_goal,
                                   effective_probability, proximity, prune_solution_branch)
from contactpolicy.scenario import load_scenario
from contactpolicy.spaces import SE2, Configuration, NoiseModel, SamplingBounds, SpaceMetric, UsageError

METRIC = SpaceMetric(0.5)
BOUNDS = SamplingBounds((0.2, 0.2), (3.8, 3.8), (-0.3, 0.3))


def node_at(q, p_path=1.0, var_l1=0.0, parent=None, split=False, n=4):
    q = np.asarray(q, dtype=float)
    return PlannerNode(0, np.tile(q, (n, 1)), None, parent, p_path=p_path, expect=q, var_l1=var_l1,
                       is_split_result=split)


def make_planner(sim, start, goal, gamma=0.0, **params):
    params.setdefault("max_iterations", 10)
    params.setdefault("t_planning", None)
    params.setdefault("n_particles", 8)
    clusterer = ParticleClusterer(sim, ClusteringConfig("WCR", 0.75, 0.2))
    return Planner(sim, clusterer, PlannerParams(**params), NoiseModel.from_gamma(gamma), BOUNDS,
                   Configuration.se2(*start), Configuration.se2(*goal))


class TestProximity:
    def test_default_weights(self):
        n = node_at([0, 0, 0])
        q = Configuration.se2(3, 4, 0)
        assert proximity(n, q, PlannerParams(), METRIC, SE2) == pytest.approx(5 * 0.0625)

    def test_weights_off(self):
        n = node_at([0, 0, 0], p_path=0.3, var_l1=2.0)
        params = PlannerParams(alpha_p=0.0, alpha_v=0.0)
        assert proximity(n, Configuration.se2(3, 4, 0), params, METRIC, SE2) == pytest.approx(5.0)

    def test_saturated_variance(self):
        n = node_at([0, 0, 0], p_path=0.5, var_l1=50.0)
        assert proximity(n, Configuration.se2(3, 4, 0), PlannerParams(), METRIC, SE2) == pytest.approx(5 * 0.625)

    def test_erf_oracle(self):
        n = node_at([0, 0, 0], p_path=0.8, var_l1=0.4)
        want = 5 * (0.2 * 0.75 + 0.25) * (math.erf(0.4) * 0.75 + 0.25)
        assert proximity(n, Configuration.se2(3, 4, 0), PlannerParams(), METRIC, SE2) == pytest.approx(want)


class TestEffectiveProbability:
    def test_certain(self):
        for r in (0.0, 0.4, 1.0):
            assert effective_probability(1.0, r, 1) == 1.0

    def test_two_attempts(self):
        assert effective_probability(0.5, 1.0, 2) == pytest.approx(0.75)

    def test_no_retries(self):
        assert effective_probability(0.5, 0.0, 50) == pytest.approx(0.5)

    def test_closed_form(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p, r, k = rng.uniform(), rng.uniform(), int(rng.integers(1, 60))
            x = (1 - p) * r
            want = p * (1 - x ** k) / (1 - x) if x < 1 else p * k
            assert effective_probability(p, r, k) == pytest.approx(min(want, 1.0))

    def test_bounds(self):
        with pytest.raises(UsageError):
            effective_probability(1.2, 0.5, 3)
        with pytest.raises(UsageError):
            effective_probability(0.5, 0.5, 0)


class TestGoalCheck:
    goal = np.array([1.0, 1.0, 0.0])

    def node(self, p_path, frac):
        n_in = int(round(frac * 10))
        belief = np.vstack([np.tile(self.goal, (n_in, 1)), np.tile([3.0, 3.0, 0.0], (10 - n_in, 1))])
        return PlannerNode(1, belief, None, 0, p_path=p_path, expect=belief.mean(0))

    def test_all_at_goal(self):
        assert check_goal(self.node(1.0, 1.0), self.goal, PlannerParams(p_goal=1.0), METRIC, SE2)

    def test_below_threshold(self):
        assert not check_goal(self.node(0.6, 0.8), self.goal, PlannerParams(), METRIC, SE2)

    def test_above_threshold(self):
        assert check_goal(self.node(0.8, 0.8), self.goal, PlannerParams(), METRIC, SE2)


def chain_tree(depth, split_at=None):
    """Linear tree 0..depth; the node at ``split_at`` is marked as a split result."""
    nodes = []
    for d in range(depth + 1):
        n = node_at([d, 0, 0], parent=d - 1 if d else None, split=(d == split_at))
        n.id, n.depth = d, d
        nodes.append(n)
    return SolutionSet(SE2, nodes)


class TestPrune:
    def test_linear_branch(self):
        tree = chain_tree(4)
        assert prune_solution_branch(tree, 4) == {1, 2, 3, 4}

    def test_stops_at_split(self):
        tree = chain_tree(5, split_at=2)
        assert prune_solution_branch(tree, 5) == {3, 4, 5}

    def test_idempotent(self):
        tree = chain_tree(5, split_at=2)
        first = set(prune_solution_branch(tree, 5))
        assert prune_solution_branch(tree, 5) == first

    def test_excluded_never_nearest(self, open_sim):
        planner = make_planner(open_sim, (1, 1, 0), (3, 3, 0))
        planner.extend(0, Action.make("a", [2, 2, 0]), np.random.default_rng(0))
        prune_solution_branch(planner.tree, 1)
        assert planner.nearest(np.array([2.0, 2.0, 0.0])) == 0


class TestExtend:
    def test_free_space_single_node(self, open_sim, rng):
        planner = make_planner(open_sim, (1, 1, 0), (3, 3, 0))
        (nid,) = planner.extend(0, Action.make("a", [2.0, 1.5, 0.2]), rng)
        node = planner.tree.nodes[nid]
        assert node.p_transition == 1.0
        assert node.reversibility == 1.0
        assert node.p_path == pytest.approx(1.0)
        assert np.allclose(node.expect, [2.0, 1.5, 0.2], atol=open_sim.convergence_tol)

    def test_stuck_adds_nothing(self, open_sim, rng):
        planner = make_planner(open_sim, (1, 1, 0), (3, 3, 0))
        assert planner.extend(0, Action.make("a", [1, 1, 0]), rng) == []

    def test_cluster_sizes_give_ratios(self, wall_sim, rng):
        # scripted outcomes: 12 left of the wall, 8 right of it, 4 far above
        planner = make_planner(wall_sim, (1, 1, 0), (3, 3, 0), n_particles=24)
        spots = ([1.5, 1.0, 0], [2.7, 1.0, 0], [1.5, 3.5, 0])
        finals = np.vstack([np.tile(s, (k, 1)) for s, k in zip(spots, (12, 8, 4))])

        class Scripted:
            """Forward call lands on fixed outcomes; later calls simulate normally."""

            def __init__(self, sim):
                self.sim, self.calls = sim, 0

            def __getattr__(self, name):
                return getattr(self.sim, name)

            def simulate_batch(self, q, target, noise, rng, **kw):
                out = self.sim.simulate_batch(q, target, noise, rng, **kw)
                self.calls += 1
                if self.calls == 1:
                    out.final = finals.copy()
                return out

        planner.sim = Scripted(wall_sim)
        new = planner.extend(0, Action.make("a", [2.0, 2.0, 0.0]), rng)
        ps = sorted(planner.tree.nodes[i].p_transition for i in new)
        assert ps == pytest.approx([1 / 6, 1 / 3, 0.5])

    def test_reversibility_blocked_by_wall(self, wall_sim, rng):
        planner = make_planner(wall_sim, (1.5, 2.0, 0), (3, 3, 0))
        near = planner.tree.nodes[0]
        # an outcome that reached the far side of the wall (e.g. around its end)
        beyond = node_at([2.7, 2.0, 0.0], n=8)
        succ, att = planner.estimate_reversibility(beyond, near, rng)
        assert att == 8 and succ < att

    def test_reversibility_of_parent_itself(self, open_sim, rng):
        planner = make_planner(open_sim, (1, 1, 0), (3, 3, 0))
        root = planner.tree.nodes[0]
        succ, att = planner.estimate_reversibility(root, root, rng)
        assert succ == att

    def test_narrow_passage_three_outcomes(self):
        sc = load_scenario("narrow_split")
        params = sc.planner_params
        planner = Planner(sc.planning_sim, sc.clusterer, params, sc.noise, sc.bounds, sc.start, sc.goal)
        rng = np.random.default_rng(0)
        spread = np.array(sc.doc["start_spread"])
        planner.tree.nodes[0].belief = sc.start.vector + rng.uniform(-1, 1, (params.n_particles, 3)) * spread
        new = planner.extend(0, Action.make("a", sc.doc["target"]), rng)
        assert len(new) == 3
        assert sum(planner.tree.nodes[i].p_transition for i in new) == pytest.approx(1.0)


class TestPlan:
    def test_adjacent_goal_one_edge(self, open_sim):
        planner = make_planner(open_sim, (1, 1, 0), (1.3, 1.0, 0), goal_bias=1.0, max_iterations=3)
        tree = planner.plan(np.random.default_rng(0))
        assert tree.solutions
        assert len(tree.solutions[0]) == 2

    def test_budget_required(self):
        with pytest.raises(UsageError):
            PlannerParams(t_planning=None, max_iterations=None)

    def test_start_space_mismatch(self, open_sim):
        clusterer = ParticleClusterer(open_sim, ClusteringConfig())
        with pytest.raises(UsageError):
            Planner(open_sim, clusterer, PlannerParams(), NoiseModel(), BOUNDS,
                    Configuration.se3([0, 0, 0]), Configuration.se2(1, 1))


@pytest.fixture(scope="module")
def noisy_tree():
    sc = load_scenario("narrow_split").with_overrides({"planner.max_iterations": 25})
    return run_plan(sc, 3).solution_set


class TestTreeInvariants:
    def test_probability_conservation(self, noisy_tree):
        n = noisy_tree.n_particles
        groups = {}
        for node in noisy_tree.nodes[1:]:
            groups.setdefault((node.parent, node.action.id), []).append(node.p_transition)
        for ps in groups.values():
            assert sum(ps) <= 1.0 + 1.0 / n
            assert all(0 < p <= 1 for p in ps)

    def test_p_path_monotone(self, noisy_tree):
        nodes = noisy_tree.nodes
        assert nodes[0].p_path == 1.0
        for node in nodes[1:]:
            parent = nodes[node.parent]
            assert node.p_path <= parent.p_path + 1e-12
            assert node.p_path == pytest.approx(parent.p_path * node.p_transition)

    def test_stored_particles_bounded(self, noisy_tree):
        st = noisy_tree.stats
        assert noisy_tree.stored_particles <= st["actions"] * noisy_tree.n_particles

    def test_solutions_pass_goal_check(self, noisy_tree):
        for path in noisy_tree.solutions:
            node = noisy_tree.nodes[path[-1]]
            assert check_goal(node, noisy_tree.goal, PlannerParams(), SpaceMetric(0.3), SE2)


def test_single_particle_zero_noise(open_sim):
    planner = make_planner(open_sim, (1, 1, 0), (3, 3, 0), n_particles=1, goal_bias=0.5, max_iterations=20)
    tree = planner.plan(np.random.default_rng(4))
    assert all(n.p_transition == 1.0 for n in tree.nodes[1:])
    assert all(n.p_path == 1.0 for n in tree.nodes)
    assert tree.solutions
