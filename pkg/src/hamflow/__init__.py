"""hamflow: Hamiltonian stable-manifold analysis for control-affine optimal control.

Pipeline: define a control-affine system with quadratic-in-control cost,
linearize, solve the Riccati/Lyapunov pair, block-diagonalize the linear
Hamiltonian matrix symplectically, grow stable/unstable manifold charts of
the Hamiltonian flow, estimate where the infinite-horizon problem is
solvable, and test the turnpike property on finite-horizon two-point
boundary value problems.
"""

from . import errors
from .systems import (
    CascadeBlocks,
    ControlAffineSystem,
    CutoffSpec,
    FeedbackLaw,
    GrowthCertificate,
    LinearData,
    backstepping_feedback,
    cascade_lyapunov,
    check_derivatives,
    cutoff_system,
    example_cascade,
    example_system,
    growth_certificate,
    linear_system,
    linearize,
    remainders,
    smoothstep,
    virtual_input,
)
from .linalg import (
    SymplecticData,
    build_symplectic,
    hamiltonian_matrix,
    is_hurwitz,
    pbh_detectable,
    pbh_stabilizable,
    random_stabilizable_triple,
    solve_care,
    solve_lyapunov,
)
from .hamiltonian import (
    HamiltonianSystem,
    PiecewiseConstantInput,
    Trajectory,
    build_hamiltonian,
    flow,
    from_xi_eta,
    optimal_feedback,
    read_trajectory_csv,
    simulate_controlled,
    to_xi_eta,
    trajectory_to_csv,
)
from .manifold import (
    CoverageEstimate,
    ManifoldChart,
    coverage,
    default_seeds,
    globalize,
    load_chart,
    local_stable_manifold,
    make_manifold_feedback,
    manifold_feedback,
    save_chart,
    unstable_manifold,
)
from .ocp import (
    FiniteHorizonProblem,
    InfiniteCostEstimate,
    ResidenceMetric,
    TurnpikeEntry,
    TurnpikeReport,
    infinite_cost,
    solve_finite_bvp,
    turnpike_metric,
    turnpike_report,
)
from .exprsys import expression_system, load_expression_system

__version__ = "0.1.0"
