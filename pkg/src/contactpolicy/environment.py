"""Voxel world model, point-sampled robots and weakly convex region signatures.

Obstacles are unions of axis-aligned boxes.  Each box is snapped to the voxel
grid (a voxel is occupied iff its center lies in the box) so that the grid and
the analytic box geometry agree exactly; the grid answers occupancy queries and
the snapped boxes give exact penetration depths and face normals.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .spaces import Configuration, Space, UsageError

_TIE = 1e-9
EXIT_MARGIN = 1e-6  # meters a corrected point is pushed past the surface


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple
    name: str = ""

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi):
            raise UsageError("box corners have different dimensions")
        if any(a >= b for a, b in zip(lo, hi)):
            raise UsageError(f"degenerate box {self.name or ''} {lo} {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def overlap_volume(self, other: "Box") -> float:
        ext = [max(0.0, min(a1, b1) - max(a0, b0))
               for a0, a1, b0, b1 in zip(self.lower, self.upper, other.lower, other.upper)]
        return float(np.prod(ext))

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.lower) & (points <= self.upper), axis=-1)


@dataclass(frozen=True)
class Region:
    """A hand-authored weakly convex region of free workspace."""

    id: str
    box: Box


@dataclass(frozen=True)
class Contact:
    point_index: int
    penetration_depth: float
    surface_normal: np.ndarray


class RegionSignature:
    """Per-robot-point set of occupied region ids, stored as bitmasks."""

    __slots__ = ("masks", "region_ids")

    def __init__(self, masks, region_ids: Sequence[str] = ()):
        self.masks = np.asarray(masks, dtype=np.int64)
        self.region_ids = tuple(region_ids)

    def __len__(self) -> int:
        return self.masks.shape[0]

    def sets(self) -> list[frozenset]:
        out = []
        for m in self.masks:
            out.append(frozenset(rid for bit, rid in enumerate(self.region_ids) if int(m) >> bit & 1))
        return out

    @classmethod
    def from_sets(cls, sets: Sequence[Sequence[str]], region_ids: Sequence[str]) -> "RegionSignature":
        index = {rid: i for i, rid in enumerate(region_ids)}
        masks = [sum(1 << index[r] for r in s) for s in sets]
        return cls(np.array(masks, dtype=np.int64), region_ids)


def box_surface_points(lower, upper, spacing: float) -> np.ndarray:
    """Points on the boundary of a box with neighbour gaps not above ``spacing``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    axes = [np.linspace(lo, hi, max(2, int(np.ceil((hi - lo) / spacing)) + 1))
            for lo, hi in zip(lower, upper)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    on_surface = np.any(np.isclose(grid, lower) | np.isclose(grid, upper), axis=1)
    return grid[on_surface]


@dataclass
class RobotModel:
    """A rigid robot represented by body-frame sample points."""

    points: np.ndarray
    actuation_centers: np.ndarray
    bounding_radius: float = 0.0
    link_sizes: tuple = ()

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1:
            raise UsageError("robot needs at least one point")
        self.actuation_centers = np.atleast_2d(np.asarray(self.actuation_centers, dtype=float))
        if self.actuation_centers.shape[1] != self.points.shape[1]:
            raise UsageError("actuation centers and points must share a dimension")
        if not self.bounding_radius:
            self.bounding_radius = float(np.max(np.linalg.norm(self.points, axis=1)))
        if not self.link_sizes:
            self.link_sizes = (self.points.shape[0],)

    @classmethod
    def from_links(cls, links: Sequence[np.ndarray], actuation_centers) -> "RobotModel":
        links = [np.atleast_2d(np.asarray(l, dtype=float)) for l in links]
        return cls(np.concatenate(links), actuation_centers, link_sizes=tuple(len(l) for l in links))

    @property
    def wdim(self) -> int:
        return self.points.shape[1]

    def max_point_gap(self) -> float:
        """Largest nearest-neighbour distance among the sample points."""
        pts = self.points
        if len(pts) < 2:
            return 0.0
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        return float(d.min(axis=1).max())


class VoxelEnvironment:
    """Occupancy + surface-normal voxel grid with region labels."""

    def __init__(self, lower, upper, resolution: float, obstacles: Sequence[Box] = (),
                 regions: Sequence[Region] = (), check_regions: bool = True):
        if not resolution > 0:
            raise UsageError("resolution must be positive")
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if lower.shape != upper.shape or np.any(lower >= upper):
            raise UsageError("invalid environment bounds")
        self.dim = lower.shape[0]
        self.resolution = float(resolution)
        self.origin = lower
        self.shape = tuple(int(np.ceil((u - l) / resolution - 1e-9)) for l, u in zip(lower, upper))
        self.extent_upper = self.origin + np.array(self.shape) * self.resolution
        self.obstacles = tuple(obstacles)
        self.regions = tuple(regions)
        if len(self.regions) > 62:
            raise UsageError("at most 62 regions are supported")
        for box in self.obstacles:
            if box.dim != self.dim:
                raise UsageError("obstacle dimension does not match environment")
            if np.any(np.asarray(box.lower) < lower - 1e-9) or np.any(np.asarray(box.upper) > upper + 1e-9):
                raise UsageError(f"obstacle {box.name or box.lower} outside environment bounds")

        self.occupancy = np.zeros(self.shape, dtype=bool)
        solid_lo, solid_hi = [], []
        for box in self.obstacles:
            i0, i1 = self._voxel_span(box)
            if np.any(i1 < i0):
                continue
            self.occupancy[tuple(slice(a, b + 1) for a, b in zip(i0, i1))] = True
            solid_lo.append(self.origin + i0 * self.resolution)
            solid_hi.append(self.origin + (i1 + 1) * self.resolution)
        self.solid_lower = np.array(solid_lo).reshape(-1, self.dim)
        self.solid_upper = np.array(solid_hi).reshape(-1, self.dim)

        self.normals = np.zeros(self.shape + (self.dim,))
        occ_idx = np.argwhere(self.occupancy)
        if len(occ_idx):
            centers = self.origin + (occ_idx + 0.5) * self.resolution
            _, normals = self._box_penetration(centers)
            self.normals[tuple(occ_idx.T)] = normals

        self.region_ids = tuple(r.id for r in self.regions)
        if len(set(self.region_ids)) != len(self.region_ids):
            raise UsageError("duplicate region ids")
        self.region_labels = np.zeros(self.shape, dtype=np.int64)
        for bit, region in enumerate(self.regions):
            if region.box.dim != self.dim:
                raise UsageError(f"region {region.id} dimension does not match environment")
            if check_regions:
                for box in self.obstacles:
                    if region.box.overlap_volume(box) > 1e-12:
                        raise UsageError(f"region {region.id!r} overlaps obstacle {box.name or box.lower}")
            i0, i1 = self._voxel_span(region.box)
            if np.any(i1 < i0):
                continue
            sl = tuple(slice(a, b + 1) for a, b in zip(i0, i1))
            self.region_labels[sl] |= np.where(self.occupancy[sl], 0, 1 << bit)

    # -- grid helpers ------------------------------------------------------

    def _voxel_span(self, box: Box):
        lo = (np.asarray(box.lower) - self.origin) / self.resolution - 0.5
        hi = (np.asarray(box.upper) - self.origin) / self.resolution - 0.5
        i0 = np.maximum(np.ceil(lo - 1e-9).astype(int), 0)
        i1 = np.minimum(np.floor(hi + 1e-9).astype(int), np.array(self.shape) - 1)
        return i0, i1

    def voxel_indices(self, points):
        """Integer voxel indices and an in-bounds mask for ``(..., dim)`` points."""
        points = np.asarray(points, dtype=float)
        idx = np.floor((points - self.origin) / self.resolution).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=-1)
        return idx, inside

    def occupied(self, points) -> np.ndarray:
        """True for points in an obstacle voxel or outside the grid."""
        idx, inside = self.voxel_indices(points)
        out = np.ones(inside.shape, dtype=bool)
        if inside.any():
            sel = idx[inside]
            out[inside] = self.occupancy[tuple(sel.T)]
        return out

    def region_masks(self, points) -> np.ndarray:
        idx, inside = self.voxel_indices(points)
        out = np.zeros(inside.shape, dtype=np.int64)
        if inside.any():
            sel = idx[inside]
            out[inside] = self.region_labels[tuple(sel.T)]
        return out

    def normal_at(self, point) -> np.ndarray:
        idx, inside = self.voxel_indices(np.asarray(point, dtype=float)[None])
        if not inside[0]:
            _, n = self._bounds_penetration(np.asarray(point, dtype=float)[None])
            return n[0]
        return self.normals[tuple(idx[0])]

    # -- penetration -------------------------------------------------------

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Outward normals in face order -x, +x, -y, +y, ..."""
        out = np.zeros((2 * self.dim, self.dim))
        for k in range(self.dim):
            out[2 * k, k] = -1.0
            out[2 * k + 1, k] = 1.0
        return out

    def _box_faces(self, points, check_exit: bool = False, previous=None):
        """Per-box face distances for ``(M, dim)`` points.

        Returns ``(inside, raw, usable)``: ``inside`` is ``(M, B)``; ``raw``
        holds the distance to each face of each containing box (inf when not
        inside) and ``usable`` additionally masks faces that were not crossed
        (given ``previous``) or that exit into another obstacle.
        """
        m = points.shape[0]
        nb = self.solid_lower.shape[0]
        p = points[:, None, :]
        lo = self.solid_lower[None]
        hi = self.solid_upper[None]
        inside = np.all((p >= lo) & (p < hi), axis=-1)  # (M, B)
        raw = np.empty((m, nb, 2 * self.dim))
        raw[..., 0::2] = p - lo
        raw[..., 1::2] = hi - p
        raw = np.where(inside[..., None], raw, np.inf)
        faces = raw
        if previous is not None:
            prev = np.asarray(previous, dtype=float)[:, None, :]
            crossed = np.empty_like(faces, dtype=bool)
            crossed[..., 0::2] = prev <= lo
            crossed[..., 1::2] = prev >= hi
            crossed &= np.isfinite(faces)
            some = crossed.any(axis=-1, keepdims=True)
            faces = np.where(crossed | ~some, faces, np.inf)
        if check_exit:
            finite = np.isfinite(faces)
            reach = np.where(finite, faces, 0.0)[..., None] + EXIT_MARGIN
            exits = points[:, None, None, :] + reach * self.face_normals[None, None]
            blocked = np.zeros(faces.shape, dtype=bool)
            if finite.any():
                blocked[finite] = self.occupied(exits[finite])
            all_blocked = np.all(blocked | ~finite, axis=-1, keepdims=True)
            faces = np.where(blocked & ~all_blocked, np.inf, faces)
        return inside, raw, faces

    def _box_penetration(self, points, check_exit: bool = False, previous=None):
        """Depth and outward normal for points w.r.t. the snapped boxes.

        Points outside every box get depth 0 and a zero normal.  With
        ``check_exit`` faces whose exit point lies in another obstacle are
        skipped when a free exit exists.  With ``previous`` (the same points
        before the motion) only faces the point actually crossed are used,
        when there are any.  Equally shallow faces share the normal.
        """
        m = points.shape[0]
        depth = np.zeros(m)
        normal = np.zeros((m, self.dim))
        if m == 0 or self.solid_lower.shape[0] == 0:
            return depth, normal
        inside, _, usable = self._box_faces(points, check_exit, previous)
        best = usable.min(axis=-1)  # (M, B)
        tied = usable <= best[..., None] + _TIE
        n_box = np.einsum("mbf,fd->mbd", tied.astype(float), self.face_normals)
        # deepest containing box wins
        best_for_pick = np.where(np.isfinite(best), best, -np.inf)
        pick = np.argmax(best_for_pick, axis=1)
        any_inside = inside.any(axis=1)
        rows = np.arange(m)
        depth = np.where(any_inside, best_for_pick[rows, pick], 0.0)
        n = n_box[rows, pick]
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        normal = np.where(any_inside[:, None], n / np.maximum(norms, 1e-300), 0.0)
        return depth, normal

    def contact_faces(self, points, previous=None):
        """Containing box, escape face and all face distances for each point.

        Returns ``(box, face, raw)`` where ``box`` is -1 for points outside
        every snapped box and ``raw`` is ``(M, 2*dim)`` distances to the faces
        of that box.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        m = points.shape[0]
        box = np.full(m, -1)
        face = np.zeros(m, dtype=int)
        raw_out = np.full((m, 2 * self.dim), np.inf)
        if m == 0 or self.solid_lower.shape[0] == 0:
            return box, face, raw_out
        inside, raw, usable = self._box_faces(points, True, previous)
        best = usable.min(axis=-1)
        best_for_pick = np.where(np.isfinite(best), best, -np.inf)
        pick = np.argmax(best_for_pick, axis=1)
        rows = np.arange(m)
        any_inside = inside.any(axis=1)
        box[any_inside] = pick[any_inside]
        face = np.argmin(usable[rows, pick], axis=1)
        raw_out[any_inside] = raw[rows, pick][any_inside]
        return box, face, raw_out

    def _bounds_penetration(self, points):
        below = self.origin - points
        above = points - self.extent_upper
        viol = np.maximum(below, above)
        depth = np.maximum(viol.max(axis=1), 0.0)
        normal = np.where(below > 0, 1.0, 0.0) - np.where(above >= 0, 1.0, 0.0)
        norms = np.linalg.norm(normal, axis=1, keepdims=True)
        normal = np.where(norms > 0, normal / np.maximum(norms, 1e-300), 0.0)
        return depth, normal

    def penetration(self, points, previous=None):
        """Penetration depth and unit escape normal for ``(M, dim)`` points.

        Free points get depth 0 and a zero normal.  ``previous`` optionally
        gives each point's position before the motion that caused the hit.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        depth = np.zeros(points.shape[0])
        normal = np.zeros_like(points)
        hit = self.occupied(points)
        if not hit.any():
            return depth, normal
        _, inb = self.voxel_indices(points)
        oob = hit & ~inb
        inner = hit & inb
        if oob.any():
            depth[oob], normal[oob] = self._bounds_penetration(points[oob])
        if inner.any():
            prev = None if previous is None else np.atleast_2d(np.asarray(previous, dtype=float))[inner]
            d, n = self._box_penetration(points[inner], check_exit=True, previous=prev)
            depth[inner] = np.maximum(d, 0.0)
            normal[inner] = n
        return depth, normal


def build_environment(lower, upper, resolution: float, obstacles: Sequence[Box] = (),
                      regions: Sequence[Region] = (), check_regions: bool = True) -> VoxelEnvironment:
    return VoxelEnvironment(lower, upper, resolution, obstacles, regions, check_regions)


def world_points(robot: RobotModel, space: Space, q) -> np.ndarray:
    """Robot sample points in world coordinates for a configuration or array."""
    vec = q.vector if isinstance(q, Configuration) else np.asarray(q, dtype=float)
    return space.transform_points(vec, robot.points)


def check_collision(env: VoxelEnvironment, robot: RobotModel, q: Configuration) -> list[Contact]:
    """One contact per robot point lying in an obstacle voxel (or out of bounds)."""
    pts = world_points(robot, q.space, q)
    hit = env.occupied(pts)
    if not hit.any():
        return []
    depth, normal = env.penetration(pts[hit])
    return [Contact(int(i), float(max(d, 1e-12)), n)
            for i, d, n in zip(np.flatnonzero(hit), depth, normal)]


def wcr_signature(env: VoxelEnvironment, robot: RobotModel, q: Configuration) -> RegionSignature:
    pts = world_points(robot, q.space, q)
    return RegionSignature(env.region_masks(pts), env.region_ids)


def signature_masks(env: VoxelEnvironment, robot: RobotModel, space: Space, q) -> np.ndarray:
    """Region bitmasks for an ``(N, dim)`` configuration array, shape ``(N, P)``."""
    return env.region_masks(space.transform_points(np.asarray(q, dtype=float), robot.points))


def _disjoint(m1, m2) -> np.ndarray:
    # two unlabeled points count as sharing the (implicit) uncovered region
    return ((m1 & m2) == 0) & ((m1 != 0) | (m2 != 0))


def wcr_distance(s1, s2) -> float:
    """Fraction of robot points whose region sets are disjoint between signatures."""
    m1 = s1.masks if isinstance(s1, RegionSignature) else np.asarray(s1, dtype=np.int64)
    m2 = s2.masks if isinstance(s2, RegionSignature) else np.asarray(s2, dtype=np.int64)
    if m1.shape != m2.shape:
        raise UsageError("signatures come from robots with different point counts")
    if m1.size == 0:
        return 0.0
    return float(np.count_nonzero(_disjoint(m1, m2)) / m1.size)


def wcr_distance_matrix(masks: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
    """Signature distances between ``(N, P)`` and ``(M, P)`` bitmasks (pairwise if no ``other``)."""
    masks = np.asarray(masks, dtype=np.int64)
    other = masks if other is None else np.asarray(other, dtype=np.int64)
    return _disjoint(masks[:, None, :], other[None, :, :]).mean(axis=-1)


def point_jacobian(robot: RobotModel, q: Configuration, point_index: int) -> np.ndarray:
    """Maps a tangent velocity of ``q`` to the world velocity of one robot point."""
    if not 0 <= point_index < robot.points.shape[0]:
        raise UsageError(f"point index {point_index} out of range")
    space = q.space
    rot = space.rotation_matrices(q.vector)
    offset = rot @ robot.points[point_index]
    return space.point_jacobians(offset)
