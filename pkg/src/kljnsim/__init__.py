"""KLJN loop simulator and eavesdropping attack harness."""

from ._validation import ConfigError, IntegrationError, InvalidSpecError
from .attacks import (
    DCMainsAttack,
    GAADerivativeAttack,
    Hypothesis,
    MeanSquareAttack,
    SingleTimeAttack,
    Verdict,
    dc_mains_attack,
    gaa_derivative_attack,
    lossy_integral_reconstruct,
    mean_square_attack,
    separator_reconstruct,
    single_time_compare,
)
from .channel import (
    Arrangement,
    CableModel,
    LoopConfig,
    PhaseVelocities,
    Trace,
    cable_drop_ratio,
    ladder_vs_lumped_check,
    phase_velocities,
    run_protocol,
    simulate_exchange,
)
from .noise import (
    NoiseSpec,
    ParasiticSpec,
    Signal,
    alias_resample,
    clip,
    derivative,
    gaussianity,
    generate,
    inject_parasitic,
    johnson_variance,
)
from .runner import Scenario, emit_plots, load_scenario, run_scenario, validate_config
from .stats import (
    AttackReport,
    ScalingFit,
    analytic_end_moments,
    estimate_p,
    info_leak,
    orthogonality_stat,
    scaling_fit,
    spectrum,
)

__version__ = "0.1.0"
