"""Complete-link clustering of particle sets for split detection.

Clustering runs two passes: a spatial-feature pass (particle connectivity,
weakly convex region signatures, or actuation-center sweeps) and a C-space
distance pass that refines each first-pass cluster.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .environment import signature_masks, wcr_distance_matrix
from .simulator import KinematicSimulator
from .spaces import Configuration, NoiseModel, UsageError

_NO_NOISE = NoiseModel()


class Method(str, enum.Enum):
    PC = "PC"
    WCR = "WCR"
    AC = "AC"


@dataclass(frozen=True)
class ClusteringConfig:
    method: Method = Method.WCR
    wcr_threshold: float = 0.75
    refine_threshold: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 0.0 <= self.wcr_threshold <= 1.0:
            raise UsageError("wcr_threshold must lie in [0, 1]")
        if self.refine_threshold < 0:
            raise UsageError("refine_threshold must be non-negative")

    @property
    def feature_threshold(self) -> float:
        return self.wcr_threshold if self.method is Method.WCR else 0.0


def validate_distance_matrix(dm) -> np.ndarray:
    dm = np.asarray(dm, dtype=float)
    if dm.ndim != 2 or dm.shape[0] != dm.shape[1]:
        raise UsageError("distance matrix must be square")
    if not np.array_equal(dm, dm.T):
        raise UsageError("distance matrix must be symmetric")
    if np.any(np.diag(dm) != 0) or np.any(dm < 0):
        raise UsageError("distance matrix needs a zero diagonal and non-negative entries")
    return dm


def complete_link_cluster(dm, threshold: float) -> list[list[int]]:
    """Agglomerative complete-link clustering cut at ``threshold``.

    Repeatedly merges the two clusters with the smallest complete-link
    distance until that distance exceeds ``threshold``.  Ties merge the pair
    with the smallest leading item index, then the smallest second index.
    Clusters are returned sorted, ordered by their smallest item.
    """
    dm = validate_distance_matrix(dm)
    n = dm.shape[0]
    if n == 0:
        return []
    clusters = [[i] for i in range(n)]
    link = dm.copy()
    np.fill_diagonal(link, np.inf)
    while len(clusters) > 1:
        best = link.min()
        if best > threshold:
            break
        # clusters stay ordered by smallest member, so the first (row, col)
        # in row-major order is the tie-break winner
        a, b = np.argwhere(link == best)[0]
        a, b = min(a, b), max(a, b)
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
        merged = np.maximum(link[a], link[b])
        link[a] = merged
        link[:, a] = merged
        link[a, a] = np.inf
        link = np.delete(np.delete(link, b, axis=0), b, axis=1)
    return clusters


class ParticleClusterer:
    """Two-pass particle clustering bound to a simulator and a configuration."""

    def __init__(self, sim: KinematicSimulator, config: ClusteringConfig):
        self.sim = sim
        self.config = config
        self.pc_steps = max(1, sim.gains.simulate_steps // 4)

    @property
    def space(self):
        return self.sim.space

    # -- pairwise feature distances --------------------------------------------

    def pc_matrix(self, q) -> np.ndarray:
        """Both-direction local-planner reachability: 0 if both succeed else 1."""
        q = np.asarray(q, dtype=float)
        n = q.shape[0]
        if n < 2:
            return np.zeros((n, n))
        src, dst = np.nonzero(~np.eye(n, dtype=bool))
        res = self.sim.simulate_batch(q[src], q[dst], _NO_NOISE, np.random.default_rng(0), steps=self.pc_steps)
        reached = self.sim.metric.distances(self.space, res.final, q[dst]) <= self.sim.eps_goal
        ok = np.ones((n, n), dtype=bool)
        ok[src, dst] = reached
        both = ok & ok.T
        return np.where(both, 0.0, 1.0)

    def ac_matrix(self, q, other=None) -> np.ndarray:
        """Straight-line actuation-center sweeps: 0 if all collision-free else 1."""
        q = np.asarray(q, dtype=float)
        other = q if other is None else np.asarray(other, dtype=float)
        env = self.sim.env
        ca = self.space.transform_points(q, self.sim.robot.actuation_centers)  # (N, C, w)
        cb = self.space.transform_points(other, self.sim.robot.actuation_centers)
        seg = cb[None, :, :, :] - ca[:, None, :, :]  # (N, M, C, w)
        length = np.linalg.norm(seg, axis=-1).max() if seg.size else 0.0
        samples = int(np.ceil(length / (0.5 * env.resolution))) + 1
        frac = np.linspace(0.0, 1.0, max(samples, 2))
        out = np.zeros((q.shape[0], other.shape[0]))
        # chunk over rows to bound memory
        for i in range(q.shape[0]):
            pts = ca[i][None, :, None, :] + seg[i][:, :, None, :] * frac[None, None, :, None]
            out[i] = np.any(env.occupied(pts), axis=(1, 2))
        if other is q:
            out = np.maximum(out, out.T)
            np.fill_diagonal(out, 0.0)
        return out

    def wcr_matrix(self, q, other=None) -> np.ndarray:
        masks = signature_masks(self.sim.env, self.sim.robot, self.space, q)
        if other is None:
            return wcr_distance_matrix(masks)
        om = signature_masks(self.sim.env, self.sim.robot, self.space, other)
        return wcr_distance_matrix(masks, om)

    def feature_matrix(self, q) -> np.ndarray:
        method = self.config.method
        if method is Method.PC:
            return self.pc_matrix(q)
        if method is Method.AC:
            return self.ac_matrix(q)
        return self.wcr_matrix(q)

    def cspace_matrix(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        dm = self.sim.metric.pairwise(self.space, q)
        dm = 0.5 * (dm + dm.T)
        np.fill_diagonal(dm, 0.0)
        return dm

    # -- clustering ------------------------------------------------------------

    def cluster(self, particles) -> list[np.ndarray]:
        """Partition particle indices into clusters (two passes)."""
        q = np.asarray(particles, dtype=float).reshape(-1, self.space.dim)
        n = q.shape[0]
        if n == 0:
            raise UsageError("cannot cluster an empty particle set")
        first = complete_link_cluster(self.feature_matrix(q), self.config.feature_threshold)
        out = []
        for group in first:
            group = np.asarray(group)
            sub = complete_link_cluster(self.cspace_matrix(q[group]), self.config.refine_threshold)
            out.extend(group[np.asarray(s)] for s in sub)
        out.sort(key=lambda g: int(g.min()))
        return out

    def is_single_cluster(self, particles) -> bool:
        """Shortcut for ``len(self.cluster(particles)) == 1``.

        Complete-link clustering ends in one cluster exactly when every
        pairwise distance is within the threshold, in both passes.
        """
        q = np.asarray(particles, dtype=float).reshape(-1, self.space.dim)
        if q.shape[0] <= 1:
            return True
        if self.feature_matrix(q).max() > self.config.feature_threshold:
            return False
        return bool(self.cspace_matrix(q).max() <= self.config.refine_threshold)

    def match_mask(self, belief, candidates) -> np.ndarray:
        """For each candidate q: does ``belief ∪ {q}`` form a single cluster?"""
        b = np.asarray(belief, dtype=float).reshape(-1, self.space.dim)
        c = np.asarray(candidates, dtype=float).reshape(-1, self.space.dim)
        if not self.is_single_cluster(b):
            return np.zeros(c.shape[0], dtype=bool)
        method = self.config.method
        if method is Method.PC:
            return np.array([self.is_single_cluster(np.vstack([b, row])) for row in c], dtype=bool)
        if method is Method.AC:
            feat = self.ac_matrix(c, b)
        else:
            feat = self.wcr_matrix(c, b)
        ok = np.all(feat <= self.config.feature_threshold, axis=1)
        dist = self.sim.metric.distances(self.space, c[:, None, :], b[None, :, :])
        return ok & np.all(dist <= self.config.refine_threshold, axis=1)

    def matches(self, belief, q: Configuration) -> bool:
        vec = q.vector if isinstance(q, Configuration) else np.asarray(q, dtype=float)
        return bool(self.match_mask(belief, vec[None])[0])


def pc_distance(q1: Configuration, q2: Configuration, sim: KinematicSimulator) -> int:
    """0 iff zero-noise local planning succeeds in both directions."""
    clusterer = ParticleClusterer(sim, ClusteringConfig(Method.PC))
    return int(clusterer.pc_matrix(np.stack([q1.vector, q2.vector]))[0, 1])


def ac_distance(q1: Configuration, q2: Configuration, sim: KinematicSimulator) -> int:
    """0 iff every actuation center sweeps a collision-free straight segment."""
    clusterer = ParticleClusterer(sim, ClusteringConfig(Method.AC))
    return int(clusterer.ac_matrix(np.stack([q1.vector, q2.vector]))[0, 1])


def cluster_particles(particles, config: ClusteringConfig, sim: KinematicSimulator) -> list[np.ndarray]:
    return ParticleClusterer(sim, config).cluster(particles)
