"""Boost scheduling for light-tailed M/G/1 queues: tail constants, simulation and batch oracles."""

__version__ = "0.1.0"

from .dist import (  # noqa: E402
    BoundedLomax,
    Deterministic,
    Discrete,
    Empirical,
    Exponential,
    FiniteLabels,
    FullInformation,
    Hyperexponential,
    Mixture,
    Uniform,
)
from .analytics import (  # noqa: E402
    ConstantBoost,
    ThetaOptimalBoost,
    ZeroBoost,
    boost_tail_constant,
    optimal_tail_constant,
    solve_gamma,
    tail_report,
    work_tail_constant,
    fcfs_tail_constant,
)
from .policy import PolicySpec  # noqa: E402
from .sim import generate_trace, replay_cheat, run  # noqa: E402
