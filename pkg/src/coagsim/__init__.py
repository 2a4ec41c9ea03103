"""coagsim: exact cluster-coagulation simulation, deterministic limit-equation
solving, and empirical verification of conservation, convergence, and gelation
behaviour at desk scale."""

__version__ = "0.1.0"

from .states import (
    ClusterState,
    DiscreteMeasure,
    TestFunction,
    bl_distance,
    integrate,
    total_mass,
)
from .kernels import (
    ConservedQuantity,
    KernelSpec,
    MajorantSpec,
    build_kernel,
    build_majorant,
    build_quantity,
    classify_quantity,
    eventually_conservative_check,
    kbar,
    majorant_value,
    phi_value,
    sample_offspring,
)
from .simulator import (
    ABSORBED,
    AuditPlan,
    ParticleSystem,
    SnapshotPlan,
    StopRules,
    conservation_audit,
    init_counts,
    init_iid,
    run,
    step,
    total_rate,
)
from .flory import (
    FloryTrajectory,
    GridSpec,
    SolverAbort,
    SolverConfig,
    build_grid,
    gel_mass_at,
    rhs,
    solve,
)

__all__ = [name for name in dir() if not name.startswith("_")]
