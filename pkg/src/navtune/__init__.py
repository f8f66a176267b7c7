"""Adaptive planner-parameter learning from teleoperated corrections."""

__version__ = "0.1.0"

from .nav import DEFAULT_PARAMETERS, DEFAULT_SPACE, ParameterSet, ParameterSpace
from .robot import Action, KinematicLimits, Pose2D, RobotState
from .world import LaserScan, OccupancyGrid, generate_ca_world

__all__ = [
    "Action",
    "DEFAULT_PARAMETERS",
    "DEFAULT_SPACE",
    "KinematicLimits",
    "LaserScan",
    "OccupancyGrid",
    "ParameterSet",
    "ParameterSpace",
    "Pose2D",
    "RobotState",
    "generate_ca_world",
]
