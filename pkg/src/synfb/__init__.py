"""Synergistic Lyapunov functions and hybrid feedback.

Simulation of hybrid closed loops, synthesis of mode-switching controllers
from synergistic Lyapunov function and feedback pairs, numerical gap
certification, backstepping through integrators, smoothing of logic
variables, and a 3-D pendulum reference scenario.
"""

from .hybrid_core import (
    BlockSpec,
    HybridArc,
    HybridSystem,
    HybridTime,
    ManifoldDescriptor,
    ModeSet,
    ProductState,
    ZenoError,
    flow_segment,
    jump_once,
    renormalize,
    simulate,
)
from .slff import (
    Attractor,
    GapFunction,
    GapReport,
    SlffPair,
    candidate_check,
    delta_construction_prop1,
    mu_v,
    rescale_prop1,
    sample_critical_set,
    synthesize_controller,
    verify_gap,
)
from .backstepping import (
    AffineControlSystem,
    DampingSpec,
    JacobianProvider,
    LipschitzRho,
    SmoothingDecomposition,
    backstep_type1,
    backstep_type2,
    backstep_unready,
    build_lipschitz_rho,
    choose_gamma_for_logic,
    smooth_logic_controller,
)
from .pendulum3d import (
    CertificationError,
    PendulumParams,
    PotentialFamily,
    build_hybrid_pendulum_controller,
    build_smoothed_pendulum_controller,
    certify_synergy_constant,
    pendulum_flow,
    potential_family_build,
    torque_feedback,
)
from .cli_bench import RunReport, ScenarioConfig, run_scenario, verify_suite

__version__ = "0.1.0"
