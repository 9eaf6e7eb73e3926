"""Belief-space planning with contact and compliance, and resilient policy execution."""

from .clustering import ClusteringConfig, Method, ParticleClusterer, cluster_particles, complete_link_cluster
from .environment import Box, Region, RobotModel, VoxelEnvironment, build_environment, check_collision
from .planner import Action, Planner, PlannerParams, SolutionSet, effective_probability, plan
from .policy import AdaptationConfig, PolicyGraph, build_policy, execute_policy, policy_query
from .scenario import Scenario, load_scenario
from .simulator import ControllerGains, KinematicSimulator, Outcome, StuckDetector
from .spaces import SE2, SE3, BeliefState, Configuration, NoiseModel, SpaceMetric, UsageError

__all__ = [
    "Action", "AdaptationConfig", "BeliefState", "Box", "ClusteringConfig", "Configuration", "ControllerGains",
    "KinematicSimulator", "Method", "NoiseModel", "Outcome", "ParticleClusterer", "Planner", "PlannerParams",
    "PolicyGraph", "Region", "RobotModel", "SE2", "SE3", "Scenario", "SolutionSet", "SpaceMetric",
    "StuckDetector", "UsageError", "VoxelEnvironment", "build_environment", "build_policy", "check_collision",
    "cluster_particles", "complete_link_cluster", "effective_probability", "execute_policy", "load_scenario",
    "plan", "policy_query",
]
