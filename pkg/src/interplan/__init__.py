"""Interaction-aware mixed-integer MPC for lane changes.

The package couples a joint ego/neighbor trajectory optimizer (mixed-integer
QP over lane membership and ordering binaries) with an online estimator that
imputes the neighbor's cost trade-off from observed motion, plus a closed-loop
simulator, a command line, and a live session server for human-in-the-loop
driving.
"""

from .vehicles import (AccelLimits, DEFAULT_LIMITS, DEFAULT_PARAMS,
                       DiscreteModel, VehicleParams, ego_discrete, nv_discrete)
from .qp import QpConfig, QpSolution, QuadraticProgram, kkt_residuals, solve_qp
from .miqp import MiqpConfig, MiqpSolution, MixedIntegerQP, fix_and_relax, solve_miqp
from .planner import (AlphaWeights, EgoCostWeights, GeneralPlanner,
                      GeneralVehicle, Plan, Planner, PlannerConfig,
                      build_aimpc, build_baseline_cv, build_general,
                      build_joint_fixed_alpha, extract_plan)

__all__ = [
    "AccelLimits", "DEFAULT_LIMITS", "DEFAULT_PARAMS", "DiscreteModel",
    "VehicleParams", "ego_discrete", "nv_discrete",
    "QpConfig", "QpSolution", "QuadraticProgram", "kkt_residuals", "solve_qp",
    "MiqpConfig", "MiqpSolution", "MixedIntegerQP", "fix_and_relax", "solve_miqp",
    "AlphaWeights", "EgoCostWeights", "GeneralPlanner", "GeneralVehicle",
    "Plan", "Planner", "PlannerConfig", "build_aimpc", "build_baseline_cv",
    "build_general", "build_joint_fixed_alpha", "extract_plan",
]
