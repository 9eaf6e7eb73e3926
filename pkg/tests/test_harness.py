import copy
import json

import numpy as np
import pytest
from click.testing import CliRunner

from contactpolicy.cli import main
from contactpolicy.harness import (EXIT_ERROR, EXIT_NO_SOLUTION, EXIT_OK, ExperimentReport, cmd_execute, cmd_plan,
                                   cmd_sweep, derive_seed, grid_points, load_plan, mean_std, replay,
                                   run_executions, run_plan)
from contactpolicy.policy import AdaptationConfig, build_policy
from contactpolicy.scenario import bundled_scenarios, load_scenario, scenario_from_dict
from contactpolicy.spaces import UsageError
from contactpolicy.trace import parse, serialize


@pytest.fixture(scope="module")
def narrow():
    return load_scenario("narrow_split").with_overrides({"planner.max_iterations": 8, "planner.t_planning": None,
                                                       "planner.goal_bias": 0.5})


@pytest.fixture(scope="module")
def narrow_plan(narrow, tmp_path_factory):
    path = tmp_path_factory.mktemp("plan") / "plan.jsonl"
    code, result = cmd_plan(narrow, 2, path)
    assert code == EXIT_OK
    return path, result


class TestScenarios:
    def test_bundled(self):
        assert {"narrow_split", "peg_in_hole", "planar_passages"} <= set(bundled_scenarios())

    def test_peg_hole_ratio(self):
        sc = load_scenario("peg_in_hole")
        obs = {o["name"]: o for o in sc.doc["environment"]["obstacles"]}
        hole = obs["plate_east"]["lower"][0] - obs["plate_west"]["upper"][0]
        hole_y = obs["plate_north"]["lower"][1] - obs["plate_south"]["upper"][1]
        link = sc.doc["robot"]["links"][0]
        peg = link["upper"][0] - link["lower"][0]
        assert hole / peg == pytest.approx(1.3)
        assert hole_y / peg == pytest.approx(1.3)

    def test_planar_three_horizontal_passages(self):
        sc = load_scenario("planar_passages")
        boxes = sc.passages
        assert len(boxes) == 3
        env = sc.planning_env
        for b in boxes:
            lo, hi = np.asarray(b.lower), np.asarray(b.upper)
            # passages are free corridors through the barrier
            mid = (lo + hi) / 2
            assert not env.occupied(mid[None])[0]
            assert env.occupied(np.array([[mid[0], lo[1] - 0.3]]))[0] or env.occupied(
                np.array([[mid[0], hi[1] + 0.3]]))[0]
        ys = sorted(np.mean([b.lower[1], b.upper[1]]) for b in boxes)
        assert ys[0] < ys[1] < ys[2]

    def test_gamma_expands(self):
        sc = load_scenario("planar_passages").with_overrides({"gamma": 0.25})
        assert sc.noise.linear_bound == pytest.approx(0.25)
        assert sc.noise.angular_bound == pytest.approx(0.0625)

    def test_bad_field_named(self):
        doc = copy.deepcopy(load_scenario("narrow_split").doc)
        doc["planner"]["n_particles"] = "many"
        with pytest.raises(UsageError, match="planner.n_particles"):
            scenario_from_dict(doc)

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError):
            load_scenario(tmp_path / "nope.json")

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(UsageError):
            load_scenario(p)

    def test_start_in_collision_rejected(self):
        doc = copy.deepcopy(load_scenario("narrow_split").doc)
        doc["start"] = [1.0, 2.1, 0.0]
        with pytest.raises(UsageError, match="start"):
            scenario_from_dict(doc)


class TestSeeds:
    def test_derive_seed_is_stable_and_distinct(self):
        assert derive_seed(3, 0) == derive_seed(3, 0)
        seeds = {derive_seed(s, i) for s in range(5) for i in range(20)}
        assert len(seeds) == 100
        assert all(0 <= s < 2 ** 63 for s in seeds)


class TestPlanTrace:
    def test_same_seed_byte_identical(self, narrow, narrow_plan, tmp_path):
        path, _ = narrow_plan
        again = tmp_path / "again.jsonl"
        cmd_plan(narrow, 2, again)
        assert again.read_bytes() == path.read_bytes()

    def test_round_trip_rebuilds_policy(self, narrow, narrow_plan):
        path, result = narrow_plan
        tree, header = load_plan(path, narrow)
        assert header["seed"] == 2
        cfg = AdaptationConfig()
        assert build_policy(tree, cfg).snapshot() == build_policy(result.solution_set, cfg).snapshot()

    def test_serialize_parse_stable(self, narrow_plan):
        path, _ = narrow_plan
        text = path.read_text()
        assert serialize(parse(text)) == text
        assert replay(path)["byte_stable"]

    def test_empty_trace(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text(serialize([]))
        assert replay(p) == {"records": 0, "byte_stable": True}

    def test_incompatible_scenario(self, narrow_plan):
        path, _ = narrow_plan
        with pytest.raises(UsageError):
            load_plan(path, load_scenario("planar_passages"))

    def test_baseline_degenerate_tree(self, narrow):
        sc = narrow.with_overrides({"gamma": 0.0, "planner.n_particles": 1})
        tree = run_plan(sc, 1).solution_set
        assert all(n.size == 1 and n.p_transition == 1.0 for n in tree.nodes[1:])


class TestExecute:
    def test_runs_and_trace(self, narrow, narrow_plan, tmp_path):
        path, _ = narrow_plan
        out = tmp_path / "exec.jsonl"
        report = cmd_execute(path, narrow, 3, 11, out_path=out)
        recs = report.executions()
        assert len(recs) == 3
        assert len({r["seed"] for r in recs}) == 3
        assert all(r["outcome"] in ("success", "failure", "timeout") for r in recs)
        summary = replay(out)
        assert summary["byte_stable"] and summary["runs"] == 3

    def test_deterministic(self, narrow, narrow_plan):
        _, result = narrow_plan
        a = ExperimentReport(run_executions(narrow, result.solution_set, 2, 5)).deterministic_records()
        b = ExperimentReport(run_executions(narrow, result.solution_set, 2, 5)).deterministic_records()
        assert a == b

    def test_zero_runs_rejected(self, narrow, narrow_plan):
        with pytest.raises(UsageError):
            run_executions(narrow, narrow_plan[1].solution_set, 0, 0)


def exec_rec(policy, outcome, actions):
    return {"kind": "exec", "policy": policy, "outcome": outcome, "actions": actions, "wall_time": 0.1}


class TestReport:
    def test_all_success(self):
        rep = ExperimentReport([exec_rec("a", "success", 3), exec_rec("a", "success", 5),
                                exec_rec("b", "success", 4)])
        agg = rep.aggregate()
        assert agg["p_exec"] == (1.0, 0.0)
        assert agg["actions"] == (4.0, pytest.approx(np.std([3, 5, 4])))

    def test_aggregates_recomputable(self):
        recs = [exec_rec("a", "success", 3), exec_rec("a", "failure", 9), exec_rec("b", "success", 2),
                {"kind": "plan", "policy": "a", "solutions": 2}, {"kind": "plan", "policy": "c", "solutions": 0}]
        rep = ExperimentReport(recs)
        agg = rep.aggregate()
        assert agg["p_exec"] == mean_std([0.5, 1.0])
        assert agg["p_plan"] == mean_std([1.0, 0.0])
        again = ExperimentReport.from_records(json.loads(json.dumps(rep.to_records())))
        assert again.aggregate() == agg

    def test_mean_std_empty(self):
        assert mean_std([]) == (0.0, 0.0)

    def test_grid_points(self):
        assert grid_points({"a": [1, 2], "b": ["x"]}) == [{"a": 1, "b": "x"}, {"a": 2, "b": "x"}]
        with pytest.raises(UsageError):
            grid_points({})

    def test_sweep_needs_seeds(self, narrow):
        with pytest.raises(UsageError):
            cmd_sweep(narrow, {"gamma": [0.0]}, [])

    def test_small_sweep(self, narrow, tmp_path):
        sc = narrow.with_overrides({"planner.max_iterations": 3})
        rep = cmd_sweep(sc, {"gamma": [0.0, 0.125]}, [1], n_exec=1, out_path=tmp_path / "s.jsonl")
        rows = rep.rows()
        assert [r["gamma"] for r in rows] == [0.0, 0.125]
        assert replay(tmp_path / "s.jsonl")["byte_stable"]


class TestCli:
    def test_plan_exit_ok(self, tmp_path):
        out = tmp_path / "p.jsonl"
        res = CliRunner().invoke(main, ["plan", "-s", "narrow_split", "--iterations", "8", "--seed", "3",
                                        "-o", str(out)])
        assert res.exit_code == EXIT_OK, res.output
        assert out.exists()

    def test_plan_no_solution(self, tmp_path):
        res = CliRunner().invoke(main, ["plan", "-s", "planar_passages", "--iterations", "1", "-o",
                                        str(tmp_path / "p.jsonl")])
        assert res.exit_code == EXIT_NO_SOLUTION

    def test_unknown_scenario(self, tmp_path):
        res = CliRunner().invoke(main, ["plan", "-s", str(tmp_path / "missing.json")])
        assert res.exit_code == EXIT_ERROR

    def test_sweep_empty_seeds(self, tmp_path):
        res = CliRunner().invoke(main, ["sweep", "-s", "narrow_split", "--grid", "gamma=0", "--seeds", "",
                                        "-o", str(tmp_path / "s.jsonl")])
        assert res.exit_code == EXIT_ERROR
        assert "seed" in res.output

    def test_execute_and_replay(self, narrow_plan, tmp_path):
        path, _ = narrow_plan
        out = tmp_path / "e.jsonl"
        res = CliRunner().invoke(main, ["execute", "-s", "narrow_split", "--plan", str(path), "--runs", "2",
                                        "-o", str(out)])
        assert res.exit_code == EXIT_OK, res.output
        assert "P_exec" in res.output
        res = CliRunner().invoke(main, ["replay", str(out)])
        assert res.exit_code == EXIT_OK
        assert json.loads(res.output)["runs"] == 2

    def test_default_out_dir_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CONTACTPOLICY_OUT", str(tmp_path))
        res = CliRunner().invoke(main, ["plan", "-s", "narrow_split", "--iterations", "2"])
        assert res.exit_code in (EXIT_OK, EXIT_NO_SOLUTION)
        assert list(tmp_path.glob("narrow_split-plan-0.jsonl"))
