"""Actor-critic learning with logit best responses in continuous-action games."""

from .dynamics import DynamicsConfig, LogitFlow, Trajectory, br_step, integrate, kl, lyapunov, lyapunov_rate
from .errors import ConfigurationError, ContractError, DomainError
from .game import (
    GameSpec,
    builtin,
    expected_potential,
    expected_utility_slice,
    identical_interest,
    utility_slice,
    validate_potential,
    wlu_game,
)
from .learner import (
    Diagnostics,
    LearnerState,
    RunRecord,
    StepSchedule,
    calibration_residual,
    critic_update,
    run,
    run_many,
    schedule_at,
    step,
)
from .logit import (
    CriticFn,
    ResponseOperator,
    logit_density,
    logit_fixed_point,
    logit_response,
    sample_logit,
    solve_equilibria,
)
from .measure import (
    AtomicMeasure,
    GridDensity,
    Interval,
    bl_distance,
    compact,
    dirac,
    entropy,
    l1_distance,
    mix_update,
    profile_distance,
    sample,
)

__version__ = "0.1.0"
