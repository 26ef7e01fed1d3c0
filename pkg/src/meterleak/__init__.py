"""Information leakage of smart-meter readings masked by an energy harvester.

Solvers for the minimum leakage rate with an unbounded battery
(:func:`solve_privacy_power`) and without one (:func:`solve_I0_emu`,
:func:`solve_I0_up`), closed forms for binary loads, and a simulator for
the battery policies that attain these rates.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    INF,
    EnergyAlphabet,
    FiniteDistribution,
    PolicyKernel,
    binary_entropy,
    conditional_mutual_information,
    entropy,
    mutual_information,
)
from .errors import (  # noqa: E402
    ConfigurationError,
    InstanceTooLargeError,
    MeterLeakError,
    NonConvergenceError,
    ValidationError,
)
from .privacy_power import (  # noqa: E402
    PrivacyPowerSolution,
    brute_force_privacy_power,
    solve_fixed_slope,
    solve_peak_only,
    solve_privacy_power,
    support_mask,
)
from .zero_battery import (  # noqa: E402
    ZeroBatterySolution,
    brute_force_I0,
    solve_I0_emu,
    solve_I0_up,
    state_feasibility_mask,
)
from .binary import (  # noqa: E402
    BinaryScenario,
    binary_I0_emu,
    binary_I0_up,
    binary_I_infinity,
    figure4_sweep,
)
from .simulation import (  # noqa: E402
    SimulationReport,
    SystemConfig,
    estimate_leakage,
    run_best_effort,
    run_store_and_hide,
    run_zero_battery,
    sample_policy,
    step_battery,
)
