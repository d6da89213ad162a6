"""Fixed-gain distributed observer synthesis for LTI systems over sensor networks.

Offline, the global error covariance of the distributed BLUE observer is
iterated to a fixed point and per-node observer gains are frozen there.
Online, each node exchanges only state estimates with its graph neighbors
and applies the constant gains. Centralized Kalman and consensus-on-
information baselines are included for comparison.
"""

from .errors import (
    DimensionMismatch,
    Diverged,
    InvalidArgument,
    MaxIterationsExceeded,
    NotPositiveDefinite,
    ObserverError,
    RankDeficient,
    SimulationAborted,
    SingularInformation,
    UnknownEstimator,
)
from .model import (
    NetworkModel,
    SensorSpec,
    ValidationReport,
    build_ring_benchmark,
    load_scenario,
    neighbors,
    save_scenario,
    validate,
)
from .blue import SelectorSet, blue, build_selectors, correct, fuse_neighbors, predict
from .synthesis import (
    FixedPointResult,
    GainSet,
    GlobalCovariance,
    SynthesisConfig,
    closed_loop_spectral_radius,
    compute_gains,
    covariance_step,
    initial_global_covariance,
    iterate_to_fixed_point,
    load_gains,
    save_gains,
    synthesize,
)
from .observer import (
    ESTIMATORS,
    SimulationScenario,
    SimulationTrace,
    avg_error_norm,
    fixed_gain_step,
    monte_carlo_errors,
    run,
    simulate_truth,
    time_varying_step,
)
from .baselines import (
    CentralizedKfState,
    ConsensusNodeState,
    centralized_step,
    centralized_steady_covariance,
    consensus_dkf_step,
    metropolis_weights,
)

__version__ = "0.1.0"
