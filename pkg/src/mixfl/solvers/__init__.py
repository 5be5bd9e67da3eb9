"""Stochastic solvers for the mixture objective."""

from .config import ConfigError, JacobianRule, NumericalError, SolverConfig, SolverWarning, Variant
from .core import (
    RunResult,
    aggregation_replay,
    default_record_every,
    l2gd_run,
    l2gd_step,
    l2sgd2_run,
    l2sgd_plus_efficient_run,
    l2sgd_plus_run,
    l2sgd_run,
    l2sgdpp_run,
    run,
    vr_local_gd_run,
)
from .directions import ControlVariates, direction, expected_direction, l2gd_direction, target_gradient
from .randomness import CoinStream, IndexStream, coin_bits, coin_stream
from .sampling import (
    FullParticipation,
    ImportanceSingle,
    IndependentParticipation,
    IndependentSampling,
    TauNice,
    TauNiceParticipation,
    UniformSingle,
    default_eso,
)
from .trace import CommCounter, RunTrace, comm_rounds_expected, count_rounds

def stochastic_gradient_l2gd(x, P, p, xi):
    """G(x): grad f(x)/(1-p) on local steps, lam grad psi(x)/p on aggregation steps."""
    return l2gd_direction(P, x, p, xi)
