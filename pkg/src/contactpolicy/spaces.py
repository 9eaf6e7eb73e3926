"""Configuration spaces SE(2) and SE(3) for rigid bodies.

Configurations are stored as flat vectors so that whole particle sets can be
processed as ``(N, dim)`` arrays:

* SE(2): ``[x, y, theta]`` with theta wrapped to ``(-pi, pi]``
* SE(3): ``[x, y, z, qw, qx, qy, qz]`` with a unit quaternion

Velocities and displacements live in the tangent space (``dof`` entries,
translation first, then rotation as a world-frame rotation vector).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class UsageError(ValueError):
    """Raised when an operation is called with inputs that violate its contract."""


def wrap_angle(theta):
    """Wrap angles to ``(-pi, pi]``."""
    theta = np.asarray(theta, dtype=float)
    return theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))


# ---------------------------------------------------------------------------
# quaternion helpers, (w, x, y, z) convention, batched over leading axes
# ---------------------------------------------------------------------------

def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_exp(rotvec):
    """Unit quaternion for a rotation vector."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-8
    # sin(half)/angle, series expansion near zero
    scale = np.where(small, 0.5 - angle ** 2 / 48.0,
                     np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), rotvec * scale], axis=-1)


def quat_log(q):
    """Rotation vector of a unit quaternion, shortest arc (angle in [0, pi])."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., :1]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = n < 1e-12
    angle = 2.0 * np.arctan2(n, w)
    scale = np.where(small, 2.0 / np.maximum(w, 1e-300), angle / np.where(small, 1.0, n))
    return v * scale


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return quat_exp(axis * angle)


# ---------------------------------------------------------------------------
# spaces
# ---------------------------------------------------------------------------

class Space:
    """Batched arithmetic for one configuration space.

    All array methods accept ``(..., dim)`` configuration arrays and
    ``(..., dof)`` tangent arrays.
    """

    name: str
    dim: int
    dof: int
    wdim: int  # workspace dimension

    def __repr__(self) -> str:
        return f"<Space {self.name}>"

    def __reduce__(self):
        return (space_from_name, (self.name,))

    def translation(self, q):
        return np.asarray(q)[..., : self.wdim]

    def normalize(self, q):
        raise NotImplementedError

    def difference(self, a, b):
        """Tangent displacement taking ``b`` to ``a``."""
        raise NotImplementedError

    def retract(self, q, dq):
        """Apply a tangent displacement ``dq`` to ``q``."""
        raise NotImplementedError

    def rotation_angle(self, a, b):
        """Geodesic rotation angle between ``a`` and ``b``."""
        raise NotImplementedError

    def rotation_matrices(self, q):
        raise NotImplementedError

    def transform_points(self, q, points):
        """World coordinates of body-frame ``points`` (P, wdim) for every q.

        Returns ``(..., P, wdim)``.
        """
        q = np.asarray(q, dtype=float)
        rot = self.rotation_matrices(q)
        world = np.einsum("...ij,pj->...pi", rot, points)
        return world + self.translation(q)[..., None, :]

    def point_jacobians(self, offsets):
        """Jacobians of world points given offsets ``p_world - t`` (..., wdim).

        Returns ``(..., wdim, dof)``.
        """
        raise NotImplementedError

    def identity(self) -> np.ndarray:
        raise NotImplementedError


class SE2Space(Space):
    name = "se2"
    dim = 3
    dof = 3
    wdim = 2

    def identity(self):
        return np.zeros(3)

    def normalize(self, q):
        q = np.array(q, dtype=float)
        q[..., 2] = wrap_angle(q[..., 2])
        return q

    def difference(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        d = a - b
        d[..., 2] = wrap_angle(d[..., 2])
        return d

    def retract(self, q, dq):
        out = np.asarray(q, dtype=float) + np.asarray(dq, dtype=float)
        out[..., 2] = wrap_angle(out[..., 2])
        return out

    def rotation_angle(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return np.abs(wrap_angle(a[..., 2] - b[..., 2]))

    def rotation_matrices(self, q):
        th = np.asarray(q, dtype=float)[..., 2]
        c, s = np.cos(th), np.sin(th)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)

    def point_jacobians(self, offsets):
        offsets = np.asarray(offsets, dtype=float)
        jac = np.zeros(offsets.shape[:-1] + (2, 3))
        jac[..., 0, 0] = 1.0
        jac[..., 1, 1] = 1.0
        jac[..., 0, 2] = -offsets[..., 1]
        jac[..., 1, 2] = offsets[..., 0]
        return jac


class SE3Space(Space):
    name = "se3"
    dim = 7
    dof = 6
    wdim = 3

    def identity(self):
        return np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])

    def normalize(self, q):
        q = np.array(q, dtype=float)
        quat = q[..., 3:]
        q[..., 3:] = quat / np.linalg.norm(quat, axis=-1, keepdims=True)
        return q

    def difference(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        dt = a[..., :3] - b[..., :3]
        rel = quat_multiply(a[..., 3:], quat_conjugate(b[..., 3:]))
        return np.concatenate([dt, quat_log(rel)], axis=-1)

    def retract(self, q, dq):
        q = np.asarray(q, dtype=float)
        dq = np.asarray(dq, dtype=float)
        t = q[..., :3] + dq[..., :3]
        rot = quat_multiply(quat_exp(dq[..., 3:]), q[..., 3:])
        rot = rot / np.linalg.norm(rot, axis=-1, keepdims=True)
        return np.concatenate([t, rot], axis=-1)

    def rotation_angle(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        rel = quat_multiply(a[..., 3:], quat_conjugate(b[..., 3:]))
        return 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), np.abs(rel[..., 0]))

    def rotation_matrices(self, q):
        return quat_to_matrix(np.asarray(q, dtype=float)[..., 3:])

    def point_jacobians(self, offsets):
        r = np.asarray(offsets, dtype=float)
        jac = np.zeros(r.shape[:-1] + (3, 6))
        jac[..., 0, 0] = jac[..., 1, 1] = jac[..., 2, 2] = 1.0
        # -skew(r)
        jac[..., 0, 4] = r[..., 2]
        jac[..., 0, 5] = -r[..., 1]
        jac[..., 1, 3] = -r[..., 2]
        jac[..., 1, 5] = r[..., 0]
        jac[..., 2, 3] = r[..., 1]
        jac[..., 2, 4] = -r[..., 0]
        return jac


SE2 = SE2Space()
SE3 = SE3Space()


def space_from_name(name: str) -> Space:
    try:
        return {"se2": SE2, "se3": SE3}[name.lower()]
    except KeyError:
        raise UsageError(f"unknown space {name!r}; expected 'se2' or 'se3'") from None


# ---------------------------------------------------------------------------
# configuration objects
# ---------------------------------------------------------------------------

class Configuration:
    """A single robot configuration (immutable)."""

    __slots__ = ("space", "vector")

    def __init__(self, space: Space, vector):
        vector = np.array(vector, dtype=float).reshape(-1)
        if vector.shape != (space.dim,):
            raise UsageError(f"{space.name} configuration needs {space.dim} values, got {vector.shape[0]}")
        vector = space.normalize(vector)
        vector.setflags(write=False)
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "vector", vector)

    def __setattr__(self, key, value):
        raise AttributeError("Configuration is immutable")

    @classmethod
    def se2(cls, x: float, y: float, theta: float = 0.0) -> "Configuration":
        return cls(SE2, [x, y, theta])

    @classmethod
    def se3(cls, translation: Sequence[float], quaternion: Sequence[float] = (1.0, 0.0, 0.0, 0.0)) -> "Configuration":
        quaternion = np.asarray(quaternion, dtype=float)
        norm = np.linalg.norm(quaternion)
        if norm == 0:
            raise UsageError("zero quaternion")
        return cls(SE3, np.concatenate([np.asarray(translation, dtype=float), quaternion / norm]))

    @property
    def translation(self) -> np.ndarray:
        return self.vector[: self.space.wdim]

    @property
    def rotation(self):
        if self.space is SE2:
            return float(self.vector[2])
        return self.vector[3:]

    def allclose(self, other: "Configuration", atol: float = 1e-9) -> bool:
        if other.space is not self.space:
            return False
        return bool(np.all(np.abs(self.space.difference(self.vector, other.vector)) <= atol))

    def __eq__(self, other):
        return (isinstance(other, Configuration) and other.space is self.space
                and np.array_equal(self.vector, other.vector))

    def __hash__(self):
        return hash((self.space.name, self.vector.tobytes()))

    def __repr__(self) -> str:
        vals = ", ".join(f"{v:.4g}" for v in self.vector)
        return f"Configuration.{self.space.name}({vals})"

    def to_list(self) -> list[float]:
        return [float(v) for v in self.vector]


@dataclass(frozen=True)
class SpaceMetric:
    """Weight converting radians of rotation to meters in the composite distance."""

    rotation_weight: float = 1.0

    def __post_init__(self):
        if not self.rotation_weight > 0:
            raise UsageError("rotation_weight must be positive")

    def distances(self, space: Space, a, b):
        """Batched composite distance between configuration arrays."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        lin = np.linalg.norm(a[..., : space.wdim] - b[..., : space.wdim], axis=-1)
        return lin + self.rotation_weight * space.rotation_angle(a, b)

    def pairwise(self, space: Space, q):
        """Symmetric distance matrix over an ``(N, dim)`` configuration array."""
        q = np.asarray(q, dtype=float)
        return self.distances(space, q[:, None, :], q[None, :, :])


def _check_same_space(*qs: Configuration) -> Space:
    space = qs[0].space
    for q in qs[1:]:
        if q.space is not space:
            raise UsageError(f"mixed configuration spaces: {space.name} and {q.space.name}")
    return space


def distance(q1: Configuration, q2: Configuration, metric: SpaceMetric) -> float:
    """Translation distance plus weighted geodesic rotation angle."""
    space = _check_same_space(q1, q2)
    return float(metric.distances(space, q1.vector, q2.vector))


def interpolate(q1: Configuration, q2: Configuration, t: float) -> Configuration:
    """Linear in translation, shortest-arc in rotation."""
    space = _check_same_space(q1, q2)
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"interpolation fraction must lie in [0, 1], got {t}")
    if t == 0.0:
        return q1
    if t == 1.0:
        return q2
    delta = space.difference(q2.vector, q1.vector)
    return Configuration(space, space.retract(q1.vector, t * delta))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingBounds:
    """Axis-aligned translation box plus a rotation range.

    For SE(2) ``rotation`` is an angle interval ``(lo, hi)``.  For SE(3) it is
    ``None`` (uniform over SO(3)) or a maximum angle around ``reference``.
    """

    lower: tuple
    upper: tuple
    rotation: object = None
    reference: tuple = (1.0, 0.0, 0.0, 0.0)

    def validate(self, space: Space) -> None:
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (space.wdim,) or hi.shape != (space.wdim,):
            raise UsageError(f"{space.name} bounds need {space.wdim} translation values")
        if np.any(lo > hi):
            raise UsageError("empty bounds: lower exceeds upper")
        if space is SE2 and self.rotation is not None:
            rlo, rhi = self.rotation
            if rlo > rhi:
                raise UsageError("empty rotation range")
        if space is SE3 and self.rotation is not None and float(self.rotation) < 0:
            raise UsageError("negative rotation limit")


def sample_uniform_array(space: Space, bounds: SamplingBounds, rng: np.random.Generator, n: int) -> np.ndarray:
    bounds.validate(space)
    lo = np.asarray(bounds.lower, dtype=float)
    hi = np.asarray(bounds.upper, dtype=float)
    t = lo + (hi - lo) * rng.random((n, space.wdim))
    if space is SE2:
        rlo, rhi = bounds.rotation if bounds.rotation is not None else (-np.pi, np.pi)
        theta = rlo + (rhi - rlo) * rng.random(n)
        return space.normalize(np.column_stack([t, theta]))
    if bounds.rotation is None:
        # Shoemake's uniform quaternion
        u1, u2, u3 = rng.random((3, n))
        a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
        quat = np.column_stack([
            b * np.cos(2 * np.pi * u3), a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2), b * np.sin(2 * np.pi * u3),
        ])
    else:
        limit = float(bounds.rotation)
        # uniform in the rotation-vector ball of radius ``limit``
        direction = rng.normal(size=(n, 3))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
        radius = limit * rng.random(n) ** (1.0 / 3.0)
        quat = quat_multiply(quat_exp(direction * radius[:, None]), np.asarray(bounds.reference, dtype=float))
    return space.normalize(np.column_stack([t, quat]))


def sample_uniform(space: Space, bounds: SamplingBounds, rng: np.random.Generator) -> Configuration:
    return Configuration(space, sample_uniform_array(space, bounds, rng, 1)[0])


@dataclass(frozen=True)
class NoiseModel:
    """Bounded actuation noise on linear and angular velocity.

    Each axis is a zero-mean normal with std ``bound / 2`` truncated to
    ``[-bound, bound]``.
    """

    gamma: float = 0.0
    linear_bound: float = 0.0
    angular_bound: float = 0.0

    def __post_init__(self):
        if self.gamma < 0 or self.linear_bound < 0 or self.angular_bound < 0:
            raise UsageError("noise bounds must be non-negative")

    @classmethod
    def from_gamma(cls, gamma: float, angular_ratio: float = 0.25) -> "NoiseModel":
        return cls(gamma=gamma, linear_bound=gamma, angular_bound=angular_ratio * gamma)

    @property
    def linear_std(self) -> float:
        return 0.5 * self.linear_bound

    @property
    def angular_std(self) -> float:
        return 0.5 * self.angular_bound

    @property
    def is_zero(self) -> bool:
        return self.gamma == 0 or (self.linear_bound == 0 and self.angular_bound == 0)

    def bounds_vector(self, space: Space) -> np.ndarray:
        return np.concatenate([np.full(space.wdim, self.linear_bound),
                               np.full(space.dof - space.wdim, self.angular_bound)])


def truncated_normal(rng: np.random.Generator, std, bound, shape) -> np.ndarray:
    """Rejection sampler for N(0, std) truncated to [-bound, bound] (elementwise)."""
    std = np.broadcast_to(np.asarray(std, dtype=float), shape)
    bound = np.broadcast_to(np.asarray(bound, dtype=float), shape)
    out = rng.normal(size=shape) * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(size=int(bad.sum())) * std[bad]
        bad = np.abs(out) > bound
    return out


def sample_noise_array(space: Space, model: NoiseModel, rng: np.random.Generator, n: int) -> np.ndarray:
    """``(n, dof)`` velocity noise draws."""
    if model.is_zero:
        return np.zeros((n, space.dof))
    bounds = model.bounds_vector(space)
    return truncated_normal(rng, 0.5 * bounds, bounds, (n, space.dof))


def sample_noise(delta_q, model: NoiseModel, rng: np.random.Generator, space: Space | None = None) -> np.ndarray:
    """Velocity error ``r`` for a commanded tangent displacement ``delta_q``.

    The model is additive and independent of the command magnitude, so
    ``delta_q`` only fixes the space (and the shape of the result).
    """
    delta_q = np.asarray(delta_q, dtype=float)
    if space is None:
        space = {3: SE2, 6: SE3}.get(delta_q.shape[-1])
        if space is None:
            raise UsageError("cannot infer space from displacement length")
    lead = delta_q.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    return sample_noise_array(space, model, rng, n).reshape(lead + (space.dof,))


# ---------------------------------------------------------------------------
# belief statistics
# ---------------------------------------------------------------------------

def mean_array(space: Space, particles) -> np.ndarray:
    particles = np.asarray(particles, dtype=float)
    if particles.ndim != 2 or particles.shape[0] == 0:
        raise UsageError("empty belief")
    t = particles[:, : space.wdim].mean(axis=0)
    if space is SE2:
        s = np.sin(particles[:, 2]).mean()
        c = np.cos(particles[:, 2]).mean()
        theta = math.atan2(s, c) if math.hypot(s, c) > 1e-12 else particles[0, 2]
        return space.normalize(np.concatenate([t, [theta]]))
    quats = particles[:, 3:]
    signs = np.where(quats @ quats[0] < 0.0, -1.0, 1.0)
    avg = (quats * signs[:, None]).mean(axis=0)
    norm = np.linalg.norm(avg)
    quat = avg / norm if norm > 1e-12 else quats[0]
    return np.concatenate([t, quat])


def variance_array(space: Space, particles, mean=None) -> np.ndarray:
    particles = np.asarray(particles, dtype=float)
    if particles.ndim != 2 or particles.shape[0] == 0:
        raise UsageError("empty belief")
    if mean is None:
        mean = mean_array(space, particles)
    dev = space.difference(particles, mean[None, :])
    return (dev ** 2).mean(axis=0)


@dataclass(frozen=True)
class BeliefState:
    """Particle approximation of a belief over configurations."""

    space: Space
    particles: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.particles, dtype=float)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != self.space.dim:
            raise UsageError("belief needs at least one particle of the right dimension")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "particles", arr)

    @classmethod
    def from_configurations(cls, configs: Sequence[Configuration]) -> "BeliefState":
        if not configs:
            raise UsageError("empty belief")
        space = _check_same_space(*configs)
        return cls(space, np.stack([c.vector for c in configs]))

    def __len__(self) -> int:
        return self.particles.shape[0]

    def configurations(self) -> list[Configuration]:
        return [Configuration(self.space, p) for p in self.particles]


def expect(belief: BeliefState) -> Configuration:
    """Mean configuration (circular mean for SE(2), sign-aligned quaternion mean for SE(3))."""
    return Configuration(belief.space, mean_array(belief.space, belief.particles))


def variance(belief: BeliefState) -> np.ndarray:
    """Population variance per tangent axis about :func:`expect`."""
    return variance_array(belief.space, belief.particles)
