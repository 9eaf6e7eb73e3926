import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.stats import truncnorm

from contactpolicy.spaces import (SE2, SE3, BeliefState, Configuration, NoiseModel, SamplingBounds, SpaceMetric,
                                  UsageError, distance, expect, interpolate, quat_from_axis_angle, quat_multiply, sample_noise,
                                  sample_uniform, sample_uniform_array, variance)

finite = st.floats(-10, 10, allow_nan=False)


def random_se3(rng):
    q = rng.normal(size=4)
    return Configuration.se3(rng.uniform(-2, 2, 3), q / np.linalg.norm(q))


class TestDistance:
    def test_identity_is_zero(self):
        q = Configuration.se2(1.0, 2.0, 0.3)
        assert distance(q, q, SpaceMetric(0.7)) == 0.0

    def test_euclidean_345(self):
        for w in (0.1, 1.0, 3.0):
            assert distance(Configuration.se2(0, 0, 0.2), Configuration.se2(3, 4, 0.2), SpaceMetric(w)) == pytest.approx(5.0)

    def test_se3_half_turn_about_z(self):
        a = Configuration.se3([1, 2, 3])
        b = Configuration.se3([1, 2, 3], quat_from_axis_angle([0, 0, 1], math.pi))
        assert distance(a, b, SpaceMetric(0.5)) == pytest.approx(0.5 * math.pi)

    def test_se3_angle_matches_rotation_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = random_se3(rng), random_se3(rng)
            ra = Rotation.from_quat(np.roll(a.rotation, -1))
            rb = Rotation.from_quat(np.roll(b.rotation, -1))
            angle = (ra.inv() * rb).magnitude()
            want = np.linalg.norm(a.translation - b.translation) + 0.3 * angle
            assert distance(a, b, SpaceMetric(0.3)) == pytest.approx(want, abs=1e-9)

    def test_mixed_spaces_rejected(self):
        with pytest.raises(UsageError):
            distance(Configuration.se2(0, 0), Configuration.se3([0, 0, 0]), SpaceMetric())

    def test_metric_axioms_randomized(self):
        rng = np.random.default_rng(1)
        m = SpaceMetric(0.4)
        for space in (SE2, SE3):
            for _ in range(5000):
                if space is SE2:
                    a, b, c = (Configuration.se2(*rng.uniform(-3, 3, 2), rng.uniform(-4, 4)) for _ in range(3))
                else:
                    a, b, c = (random_se3(rng) for _ in range(3))
                ab, ba = distance(a, b, m), distance(b, a, m)
                assert ab == pytest.approx(ba, abs=1e-12)
                assert ab >= 0
                assert distance(a, c, m) <= ab + distance(b, c, m) + 1e-9

    @given(finite, finite, st.floats(-math.pi, math.pi))
    def test_zero_iff_equal(self, x, y, t):
        a = Configuration.se2(x, y, t)
        assert distance(a, Configuration.se2(x, y, t), SpaceMetric()) == 0
        assert distance(a, Configuration.se2(x + 0.5, y, t), SpaceMetric()) > 0


class TestInterpolate:
    def test_endpoints(self):
        a, b = Configuration.se2(0, 0, 0), Configuration.se2(2, 1, 1)
        assert interpolate(a, b, 0.0) is a
        assert interpolate(a, b, 1.0) is b

    def test_midpoint(self):
        mid = interpolate(Configuration.se2(0, 0, 0), Configuration.se2(2, 0, 0), 0.5)
        assert np.allclose(mid.vector, [1, 0, 0])

    def test_shortest_arc_in_se2(self):
        mid = interpolate(Configuration.se2(0, 0, 3.0), Configuration.se2(0, 0, -3.0), 0.5)
        assert abs(abs(mid.rotation) - math.pi) < 1e-9

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            interpolate(Configuration.se2(0, 0), Configuration.se2(1, 0), 1.5)

    def test_monotone_distance(self):
        rng = np.random.default_rng(2)
        m = SpaceMetric(0.5)
        for _ in range(50):
            a, b = random_se3(rng), random_se3(rng)
            ds = [distance(a, interpolate(a, b, t), m) for t in np.linspace(0, 1, 21)]
            assert all(d2 >= d1 - 1e-9 for d1, d2 in zip(ds, ds[1:]))


class TestSampling:
    def test_degenerate_bounds(self):
        q = sample_uniform(SE2, SamplingBounds((1.0, 2.0), (1.0, 2.0), (0.5, 0.5)), np.random.default_rng(0))
        assert np.allclose(q.vector, [1.0, 2.0, 0.5])

    def test_mean_of_unit_square(self):
        arr = sample_uniform_array(SE2, SamplingBounds((0, 0), (1, 1)), np.random.default_rng(3), 100_000)
        assert np.all(np.abs(arr[:, :2].mean(axis=0) - 0.5) < 0.01)

    def test_determinism(self):
        b = SamplingBounds((0, 0, 0), (1, 1, 1))
        a1 = sample_uniform_array(SE3, b, np.random.default_rng(9), 10)
        a2 = sample_uniform_array(SE3, b, np.random.default_rng(9), 10)
        assert np.array_equal(a1, a2)

    def test_empty_bounds_rejected(self):
        with pytest.raises(UsageError):
            sample_uniform(SE2, SamplingBounds((1, 0), (0, 1)), np.random.default_rng(0))

    def test_se3_unit_quaternions_and_limit(self):
        arr = sample_uniform_array(SE3, SamplingBounds((0, 0, 0), (1, 1, 1), 0.3), np.random.default_rng(4), 2000)
        assert np.allclose(np.linalg.norm(arr[:, 3:], axis=1), 1.0)
        angle = 2 * np.arccos(np.clip(np.abs(arr[:, 3]), 0, 1))
        assert angle.max() <= 0.3 + 1e-9


class TestNoise:
    def test_zero_gamma(self):
        r = sample_noise(np.ones((100, 3)), NoiseModel.from_gamma(0.0), np.random.default_rng(0))
        assert not r.any()

    def test_bounds_hold_exactly(self):
        model = NoiseModel.from_gamma(0.125)
        r = sample_noise(np.zeros((1_000_000, 3)), model, np.random.default_rng(5))
        assert np.all(np.abs(r[:, :2]) <= 0.125)
        assert np.all(np.abs(r[:, 2]) <= 0.125 * 0.25)

    def test_std_matches_truncated_normal(self):
        r = sample_noise(np.zeros((100_000, 3)), NoiseModel.from_gamma(0.125), np.random.default_rng(6))
        want = truncnorm.std(-2, 2, scale=0.0625)  # about 0.0550
        assert abs(r[:, 0].std() - want) < 0.002
        assert abs(r[:, 1].std() - want) < 0.002


class TestBelief:
    def test_single_particle(self):
        b = BeliefState(SE2, [[1.0, 2.0, 0.3]])
        assert np.allclose(expect(b).vector, [1, 2, 0.3])
        assert not variance(b).any()

    def test_midpoint_and_variance(self):
        b = BeliefState(SE2, [[0, 0, 0], [2, 0, 0]])
        assert np.allclose(expect(b).vector, [1, 0, 0])
        assert np.allclose(variance(b), [1.0, 0, 0])

    def test_identical_particles(self):
        b = BeliefState(SE3, np.tile([1, 2, 3, 1, 0, 0, 0], (5, 1)))
        assert np.allclose(variance(b), 0)

    def test_antipodal_quaternions(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            base = random_se3(rng)
            small = quat_from_axis_angle(rng.normal(size=3), 0.2)
            other = quat_multiply(small, base.rotation)
            b = BeliefState(SE3, [base.vector, np.concatenate([base.translation, -other])])
            mean = expect(b).rotation
            assert np.linalg.norm(mean) == pytest.approx(1.0)
            mats = Rotation.from_quat([np.roll(base.rotation, -1), np.roll(other, -1)]).as_matrix()
            u, _, vt = np.linalg.svd(mats.mean(axis=0))
            oracle = Rotation.from_matrix(u @ vt)
            got = Rotation.from_quat(np.roll(mean, -1))
            assert (oracle.inv() * got).magnitude() < 1e-3

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        base = random_se3(rng).rotation
        parts = np.array([np.concatenate([rng.uniform(-1, 1, 3),
                                          quat_multiply(quat_from_axis_angle(rng.normal(size=3), 0.3), base)])
                          for _ in range(6)])
        parts[::2, 3:] *= -1
        b1 = BeliefState(SE3, parts)
        b2 = BeliefState(SE3, parts[::-1])
        m1, m2 = expect(b1).vector, expect(b2).vector
        assert np.allclose(m1[:3], m2[:3])
        assert abs(np.dot(m1[3:], m2[3:])) == pytest.approx(1.0)
        assert np.allclose(variance(b1), variance(b2))

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            BeliefState(SE2, np.zeros((0, 3)))
