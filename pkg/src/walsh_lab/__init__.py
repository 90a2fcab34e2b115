"""Simulation and analysis toolkit for diffusions on finite unions of rays."""

__version__ = "0.1.0"

from .geometry import (
    ORIGIN,
    CouplingPlan,
    Direction,
    SpinningMeasure,
    TreePoint,
    build_coupling_plan,
    tree_distance,
    wasserstein_p,
)
from .model import (
    CoefficientField,
    RadialCoefficient,
    StationaryProfile,
    apply_generator,
    bang_bang_field,
    lyapunov_for_field,
    lyapunov_optimize,
    scale_transform,
    spider_stationary,
    stationary_radial,
)
from .simulate import (
    CoupledPaths,
    LocalTimeEstimate,
    NumericsError,
    RadialPath,
    SimConfig,
    TransformedPath,
    WalshPath,
    coupled_diffusion_snapshots,
    coupled_walsh_bm_paths,
    estimate_local_time,
    excursion_decomposition,
    excursion_poisson_counts,
    simulate_coupled_diffusions,
    simulate_coupled_walsh_bm,
    simulate_reflected_radial,
    simulate_walsh_bm,
    simulate_walsh_diffusion,
    time_change_and_scale,
    walsh_bm_paths,
    walsh_diffusion_paths,
    walsh_snapshots,
    walsh_snapshots_from_states,
)
from .analysis import (
    BoundConstants,
    CouplingCost,
    DecayFit,
    GeneratorCheck,
    HolderReport,
    OccupationReport,
    PartitionReport,
    SpiderHistogram,
    bound_constants,
    coupling_cost,
    coupling_cost_from_sups,
    fit_decay_rate,
    generator_consistency_check,
    holder_bound_check,
    holder_exponent,
    occupation_fractions,
    partition_of_local_time_check,
    spider_histogram,
    stationary_bin_edges,
    stationary_histogram,
    sup_tree_gap,
    tv_distance,
)
from .config import (
    EXPERIMENT_KINDS,
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_config,
    read_seed_override,
    serialize_config,
)
from .experiments import (
    ExperimentResult,
    Table,
    run_experiment,
)
