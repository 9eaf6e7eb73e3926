"""Kinematic forward simulation of a compliant, PD-controlled rigid robot.

Every step commands ``dq = kp * e + kd * de/dt`` toward the target, clamps the
command (translation and rotation separately, each moving no robot point more
than ``step_limit``), adds bounded
actuation noise and then pushes penetrating points back out along the
obstacle normals with a damped Jacobian pseudoinverse.  Whole particle sets
are simulated at once as ``(N, dim)`` arrays.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .environment import RobotModel, VoxelEnvironment
from .spaces import (Configuration, NoiseModel, Space, SpaceMetric, UsageError,
                     sample_noise_array)

log = logging.getLogger(__name__)


class Outcome(str, enum.Enum):
    CONVERGED = "converged"
    BUDGET_EXHAUSTED = "budget_exhausted"
    COMPLETELY_STUCK = "completely_stuck"


_OUTCOMES = (Outcome.CONVERGED, Outcome.BUDGET_EXHAUSTED, Outcome.COMPLETELY_STUCK)


@dataclass(frozen=True)
class ControllerGains:
    kp: float = 0.5
    kd: float = 0.0
    timestep: float = 0.1
    t_simulate: float = 30.0
    t_exec: float = 30.0

    def __post_init__(self):
        if not self.kp > 0:
            raise UsageError("kp must be positive")
        if self.kd < 0:
            raise UsageError("kd must be non-negative")
        if not self.timestep > 0:
            raise UsageError("timestep must be positive")

    @property
    def simulate_steps(self) -> int:
        return max(1, int(round(self.t_simulate / self.timestep)))

    @property
    def exec_steps(self) -> int:
        return max(1, int(round(self.t_exec / self.timestep)))


@dataclass(frozen=True)
class StuckDetector:
    window: int = 10
    eps_stuck: float = 0.005
    eps_adjust: float = 0.01

    def __post_init__(self):
        if self.window < 2:
            raise UsageError("stuck window needs at least two samples")
        if not 0 < self.eps_adjust <= 1:
            raise UsageError("eps_adjust must lie in (0, 1]")

    @property
    def max_stuck_iterations(self) -> int:
        return int(np.ceil(1.0 / self.eps_adjust - 1e-12))


@dataclass
class SimResult:
    final: Configuration
    trajectory: list
    outcome: Outcome
    steps: int = 0
    adjustments: int = 0


class ResolutionFailure(RuntimeError):
    pass


@dataclass
class BatchResult:
    final: np.ndarray
    outcomes: np.ndarray  # indices into _OUTCOMES
    steps: np.ndarray
    trajectories: np.ndarray | None = None

    def outcome(self, i: int) -> Outcome:
        return _OUTCOMES[int(self.outcomes[i])]


@dataclass
class KinematicSimulator:
    """Simulation context: world, robot, controller and tolerances."""

    env: VoxelEnvironment
    robot: RobotModel
    space: Space
    metric: SpaceMetric
    gains: ControllerGains = field(default_factory=ControllerGains)
    eps_goal: float = 0.1
    step_limit: float | None = None
    max_resolve_iters: int = 50
    contact_tolerance: float | None = None
    exit_margin: float | None = None
    damping: float = 1e-6
    stall_steps: int = 100
    stall_eps: float = 1e-6
    rotation_stiffness: float = 4.0

    def __post_init__(self):
        if self.robot.wdim != self.space.wdim or self.env.dim != self.space.wdim:
            raise UsageError("robot, environment and space dimensions differ")
        if self.step_limit is None:
            self.step_limit = 0.4 * self.env.resolution
        if self.exit_margin is None:
            self.exit_margin = 1e-3 * self.env.resolution
        if self.contact_tolerance is None:
            self.contact_tolerance = 0.25 * self.env.resolution
        self._radius = float(np.max(np.linalg.norm(self.robot.points, axis=1)))
        w = self.space.wdim
        self._jac_scale = np.concatenate([np.ones(w), np.full(self.space.dof - w, 1.0 / max(self.rotation_stiffness * self._radius, 1e-9))])

    @property
    def convergence_tol(self) -> float:
        return 0.25 * self.eps_goal

    # -- single-step pieces --------------------------------------------------

    def workspace_motion(self, dq) -> np.ndarray:
        """Upper bound on any robot point's displacement for tangent steps ``dq``."""
        dq = np.asarray(dq, dtype=float)
        w = self.space.wdim
        lin = np.linalg.norm(dq[..., :w], axis=-1)
        ang = np.linalg.norm(dq[..., w:], axis=-1)
        return lin + ang * self._radius

    def clamp(self, dq) -> np.ndarray:
        """Limit translation and rotation independently to ``step_limit`` of point motion.

        Separate limits keep the orientation servo effective while a long
        translation is still saturated; the combined bound is ``2 * step_limit``.
        """
        dq = np.array(dq, dtype=float)
        w = self.space.wdim
        lin = np.linalg.norm(dq[..., :w], axis=-1)
        ang = np.linalg.norm(dq[..., w:], axis=-1) * self._radius
        dq[..., :w] *= np.minimum(1.0, self.step_limit / np.maximum(lin, 1e-300))[..., None]
        dq[..., w:] *= np.minimum(1.0, self.step_limit / np.maximum(ang, 1e-300))[..., None]
        return dq

    def noise_bound(self, noise: NoiseModel) -> float:
        """Largest workspace displacement a single noise draw can cause."""
        w = self.space.wdim
        ang_axes = self.space.dof - w
        return (noise.linear_bound * np.sqrt(w) + noise.angular_bound * np.sqrt(ang_axes) * self._radius) * self.gains.timestep

    def resolve_batch(self, q, return_normals: bool = False, previous=None):
        """Push penetrating robot points out of obstacles.

        ``previous`` (collision-free configurations before the step) lets the
        correction push points back out through the faces they crossed.
        Returns the corrected configurations and a mask of those that ended
        collision-free.  With ``return_normals`` also returns the last contact
        normal seen per configuration (zero if none).
        """
        space, env = self.space, self.env
        q = np.array(q, dtype=float)
        n = q.shape[0]
        ok = np.ones(n, dtype=bool)
        last_normal = np.zeros((n, space.wdim))
        active = np.arange(n)
        pts_body = self.robot.points
        n_pts = pts_body.shape[0]
        eye = np.eye(space.dof) * self.damping
        prev_pts = None if previous is None else space.transform_points(np.asarray(previous, dtype=float), pts_body)
        # contact planes met so far: points stay outside them while others resolve
        plane_n = np.zeros((n, n_pts, space.wdim))
        plane_c = np.zeros((n, n_pts))
        has_plane = np.zeros((n, n_pts), dtype=bool)
        near = self.contact_tolerance
        for _ in range(self.max_resolve_iters + 1):
            if active.size == 0:
                break
            pts = space.transform_points(q[active], pts_body)
            hit = env.occupied(pts)
            has = hit.any(axis=1)
            active = active[has]
            if active.size == 0:
                break
            if _ == self.max_resolve_iters:
                ok[active] = False
                break
            pts = pts[has]
            hit = hit[has]
            owner, pidx = np.nonzero(hit)
            hp = pts[owner, pidx]
            before = None if prev_pts is None else prev_pts[active][owner, pidx]
            depth, normal = self._contact_corrections(owner, hp, before)
            rows = active[owner]
            plane_n[rows, pidx] = normal
            plane_c[rows, pidx] = np.einsum("mw,mw->m", normal, hp) + depth
            has_plane[rows, pidx] = True
            # every remembered plane the point is within ``near`` of is a constraint
            pn = plane_n[active]
            gap = plane_c[active] - np.einsum("apw,apw->ap", pn, pts)
            use = has_plane[active] & (gap > -near)
            use[owner, pidx] = True
            owner, pidx = np.nonzero(use)
            pn = pn[owner, pidx]
            dp = pn * np.maximum(gap[owner, pidx] + self.exit_margin, 0.0)[:, None]
            offsets = pts[owner, pidx] - q[active][owner, : space.wdim]
            # rotation is measured as arc length at a multiple of the robot
            # radius so the least-norm correction prefers sliding to spinning
            jac = space.point_jacobians(offsets) * self._jac_scale  # (M, w, dof)
            # one row per contact along its normal; tangential motion is free
            jac_n = np.einsum("mw,mwi->mi", pn, jac)
            jtj = np.zeros((active.size, space.dof, space.dof))
            jtb = np.zeros((active.size, space.dof))
            np.add.at(jtj, owner, np.einsum("mi,mj->mij", jac_n, jac_n))
            np.add.at(jtb, owner, jac_n * np.einsum("mw,mw->m", pn, dp)[:, None])
            dq = np.linalg.solve(jtj + eye, jtb[..., None])[..., 0] * self._jac_scale
            dq = self._clamp_correction(dq)
            q[active] = space.retract(q[active], dq)
            if return_normals:
                acc = np.zeros((active.size, space.wdim))
                np.add.at(acc, owner, dp)
                norms = np.linalg.norm(acc, axis=1, keepdims=True)
                good = norms[:, 0] > 0
                last_normal[active[good]] = acc[good] / norms[good]
        if return_normals:
            return q, ok, last_normal
        return q, ok

    def _clamp_correction(self, dq):
        """Bound one resolution update to a voxel of translation and of arc length."""
        w = self.space.wdim
        limit = self.env.resolution
        lin = np.linalg.norm(dq[:, :w], axis=1)
        ang = np.linalg.norm(dq[:, w:], axis=1) * self._radius
        dq[:, :w] *= np.minimum(1.0, limit / np.maximum(lin, 1e-300))[:, None]
        dq[:, w:] *= np.minimum(1.0, limit / np.maximum(ang, 1e-300))[:, None]
        return dq

    def _contact_corrections(self, owner, points, previous):
        """Penetration depth and escape normal per colliding point.

        All points of one configuration inside the same obstacle box leave
        through the face chosen by the deepest of them, so a rigid body is
        pushed off a box consistently instead of being twisted at corners.
        """
        env = self.env
        box, face, raw = env.contact_faces(points, previous)
        inner = np.flatnonzero(box >= 0)
        outer = np.flatnonzero(box < 0)
        depth = np.zeros(points.shape[0])
        normal = np.zeros_like(points)
        if outer.size:
            prev = None if previous is None else previous[outer]
            depth[outer], normal[outer] = env.penetration(points[outer], prev)
        if inner.size == 0:
            return depth, normal
        chosen = raw[inner, face[inner]]
        key = owner[inner] * (env.solid_lower.shape[0] + 1) + box[inner]
        # deepest point per (configuration, box) group decides the face
        order = np.lexsort((-chosen, key))
        first = np.ones(order.size, dtype=bool)
        first[1:] = key[order][1:] != key[order][:-1]
        group = np.cumsum(first) - 1
        leader_face = face[inner][order][first][group]
        f = np.empty(inner.size, dtype=int)
        f[order] = leader_face
        d = raw[inner, f]
        ok = np.isfinite(d)
        depth[inner[ok]] = d[ok]
        normal[inner[ok]] = env.face_normals[f[ok]]
        return depth, normal

    def resolve_collisions(self, q: Configuration) -> Configuration:
        """Compliant correction of a single configuration.

        Raises :class:`ResolutionFailure` when contacts cannot be resolved within
        ``max_resolve_iters``.
        """
        out, ok = self.resolve_batch(q.vector[None])
        if not ok[0]:
            raise ResolutionFailure("collision resolution did not converge")
        return Configuration(self.space, out[0])

    def step_batch(self, q, targets, prev_error, noise: NoiseModel, rng: np.random.Generator,
                   return_normals: bool = False, contact_normals=None):
        """Advance every configuration by one control step.

        ``contact_normals`` (from the previous step, zero rows when free) drop
        the part of the commanded translation that pushes into the surface, so
        a robot in contact slides at the speed of the remaining command.
        Returns ``(q_next, error)`` (plus contact normals when requested);
        rows whose collision resolution failed stay where they were.
        """
        space = self.space
        w = space.wdim
        err = space.difference(targets, q)
        dq = self.gains.kp * err
        if prev_error is not None and self.gains.kd > 0:
            dq = dq + self.gains.kd * (err - prev_error) / self.gains.timestep
        if contact_normals is not None:
            into = np.minimum(np.einsum("nw,nw->n", dq[:, :w], contact_normals), 0.0)
            dq[:, :w] -= into[:, None] * contact_normals
        dq = self.clamp(dq)
        if not noise.is_zero:
            dq = dq + sample_noise_array(space, noise, rng, q.shape[0]) * self.gains.timestep
        moved = space.retract(q, dq)
        res = self.resolve_batch(moved, return_normals=return_normals, previous=q)
        nxt, ok = res[0], res[1]
        nxt[~ok] = q[~ok]
        if return_normals:
            return nxt, err, res[2]
        return nxt, err

    def simulate_step(self, q_t: Configuration, q_target: Configuration, noise: NoiseModel,
                      rng: np.random.Generator, prev_error=None) -> Configuration:
        if q_t.space is not self.space or q_target.space is not self.space:
            raise UsageError("configuration space does not match simulator")
        prev = None if prev_error is None else np.asarray(prev_error, dtype=float)[None]
        nxt, _ = self.step_batch(q_t.vector[None], q_target.vector[None], prev, noise, rng)
        return Configuration(self.space, nxt[0])

    # -- motions ---------------------------------------------------------------

    def simulate_batch(self, q0, targets, noise: NoiseModel, rng: np.random.Generator,
                       steps: int | None = None, record: bool = False) -> BatchResult:
        """Simulate many particles toward (per-particle or shared) targets.

        Each particle stops when it converges, exhausts the step budget or
        stalls (best distance to target improves by less than ``stall_eps``
        over ``stall_steps`` consecutive steps).
        """
        space = self.space
        q = np.array(q0, dtype=float).reshape(-1, space.dim)
        n = q.shape[0]
        targets = np.broadcast_to(np.asarray(targets, dtype=float), (n, space.dim)).copy()
        steps = self.gains.simulate_steps if steps is None else int(steps)
        tol = self.convergence_tol
        outcomes = np.full(n, 1, dtype=np.int8)
        used = np.zeros(n, dtype=np.int64)
        best = self.metric.distances(space, q, targets)
        since = np.zeros(n, dtype=np.int64)
        active = best >= tol
        outcomes[~active] = 0
        prev_err = None
        normals = np.zeros((n, space.wdim))
        traj = [q.copy()] if record else None
        for t in range(steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            pe = None if prev_err is None else prev_err[idx]
            nxt, err, normals[idx] = self.step_batch(q[idx], targets[idx], pe, noise, rng, return_normals=True,
                                                     contact_normals=normals[idx])
            if prev_err is None:
                prev_err = np.zeros((n, space.dof))
            prev_err[idx] = err
            q[idx] = nxt
            used[idx] += 1
            d = self.metric.distances(space, nxt, targets[idx])
            improved = d < best[idx] - self.stall_eps
            best[idx] = np.minimum(best[idx], d)
            since[idx] = np.where(improved, 0, since[idx] + 1)
            conv = d < tol
            stalled = ~conv & (since[idx] >= self.stall_steps)
            outcomes[idx[conv]] = 0
            outcomes[idx[stalled]] = 2
            active[idx[conv | stalled]] = False
            if record:
                traj.append(q.copy())
        return BatchResult(q, outcomes, used, np.stack(traj) if record else None)

    def simulate_motion(self, q_start: Configuration, q_target: Configuration, noise: NoiseModel,
                        rng: np.random.Generator, steps: int | None = None) -> SimResult:
        res = self.simulate_batch(q_start.vector[None], q_target.vector, noise, rng, steps=steps, record=True)
        traj = [Configuration(self.space, row[0]) for row in res.trajectories[: int(res.steps[0]) + 1]]
        return SimResult(Configuration(self.space, res.final[0]), traj, res.outcome(0), int(res.steps[0]))

    def contact_motion_execute(self, q_start: Configuration, q_target: Configuration,
                               detector: StuckDetector, noise: NoiseModel,
                               rng: np.random.Generator, steps: int | None = None) -> SimResult:
        """Execute one action with the stuck-detecting contact motion controller.

        While the robot moves it tracks ``q_target``.  When the net motion over
        the sliding window falls below ``eps_stuck`` the target is pulled toward
        a plane fitted to the window, by ``i * eps_adjust`` of the way on the
        i-th consecutive stuck iteration.  Motion resuming restores the original
        target; ``i * eps_adjust >= 1`` ends the action as completely stuck.
        """
        space = self.space
        steps = self.gains.exec_steps if steps is None else int(steps)
        tol = self.convergence_tol
        goal = q_target.vector
        current_target = goal
        q = q_start.vector.copy()
        traj = [q.copy()]
        prev_err = None
        stuck_i = 0
        adjustments = 0
        contact_normal = None
        normals = np.zeros((1, space.wdim))
        outcome = Outcome.BUDGET_EXHAUSTED
        used = 0
        for _ in range(steps):
            if self.metric.distances(space, q, goal) < tol:
                outcome = Outcome.CONVERGED
                break
            nxt, err, normals = self.step_batch(q[None], current_target[None], prev_err, noise, rng,
                                                return_normals=True, contact_normals=normals)
            prev_err = err
            q = nxt[0]
            used += 1
            traj.append(q.copy())
            if np.any(normals[0]):
                contact_normal = normals[0]
            if len(traj) < detector.window:
                continue
            window = np.asarray(traj[-detector.window:])
            moved = float(self.metric.distances(space, window[0], window[-1]))
            if moved < detector.eps_stuck:
                stuck_i += 1
                if stuck_i * detector.eps_adjust >= 1.0 - 1e-12:
                    outcome = Outcome.COMPLETELY_STUCK
                    break
                try:
                    p_plane, n_plane = fit_plane(window[:, : space.wdim], goal[: space.wdim], contact_normal)
                except ResolutionFailure:
                    outcome = Outcome.COMPLETELY_STUCK
                    break
                current_target = adjust_target(space, goal, p_plane, n_plane, stuck_i * detector.eps_adjust)
                prev_err = None
                adjustments += 1
            elif stuck_i:
                stuck_i = 0
                current_target = goal
                prev_err = None
        else:
            if self.metric.distances(space, q, goal) < tol:
                outcome = Outcome.CONVERGED
        configs = [Configuration(space, row) for row in traj]
        return SimResult(configs[-1], configs, outcome, used, adjustments)


def fit_plane(points, toward=None, fallback_normal=None):
    """Least-squares plane (line in 2-D) through workspace points.

    Returns ``(point_on_plane, unit_normal)``.  The normal is oriented toward
    ``toward`` when given.  A degenerate window (coincident points) falls back to
    ``fallback_normal``; without one a :class:`ResolutionFailure` is raised.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise UsageError("plane fit needs at least two points")
    dim = pts.shape[1]
    if dim == 3 and pts.shape[0] < 3:
        raise UsageError("plane fit in 3-D needs at least three points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, sv, vt = np.linalg.svd(centered, full_matrices=True)
    if sv.size == 0 or sv[0] < 1e-9:
        if fallback_normal is None or not np.any(fallback_normal):
            raise ResolutionFailure("degenerate window and no contact normal")
        normal = np.asarray(fallback_normal, dtype=float)
    else:
        normal = vt[-1]
    normal = normal / np.linalg.norm(normal)
    if toward is not None and np.dot(np.asarray(toward) - centroid, normal) < 0:
        normal = -normal
    return centroid, normal


def adjust_target(space: Space, target, p_plane, n_plane, fraction: float) -> np.ndarray:
    """Move the target's translation toward the plane by ``fraction`` of its offset."""
    target = np.array(target, dtype=float)
    w = space.wdim
    n = np.asarray(n_plane, dtype=float)
    offset = np.dot(np.asarray(p_plane) - target[:w], n) / np.dot(n, n)
    target[:w] = target[:w] + offset * n * fraction
    return target
