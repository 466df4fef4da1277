"""dampopt: closed-loop generator re-dispatch for oscillation damping.

Subpackages map onto the pipeline: ``network`` (cases and power flow),
``smallsignal`` (modes and the perturbation oracle), ``faultsim``
(time-domain validation), ``estimator`` (windowed sensitivity
identification), ``redispatch`` (the LP step), ``loop`` (the closed
loop) and ``caseio``/``cli`` (formats and entry points).
"""

from .estimator import (
    EstimatorConfig,
    Feature,
    SampleWindow,
    SensitivityEstimate,
    naer_estimate,
    reduce_features,
    weighted_ridge,
)
from .faultsim import FaultSpec, Trajectory, fault_simulate, trajectory_damping
from .loop import Profile, Scenario, SimulationLog, collect_window, run
from .network import (
    Branch,
    Bus,
    Generator,
    Load,
    NetworkCase,
    OperatingPoint,
    build_admittance,
    solve_power_flow,
    validate_case,
)
from .redispatch import (
    DispatchBounds,
    RedispatchSolution,
    build_lp,
    compute_bounds,
    redistribute_planned,
    solve_lp,
)
from .smallsignal import (
    Mode,
    StateMatrix,
    eigen_modes,
    linearize,
    min_damping_mode,
    perturbation_sensitivity,
)

__version__ = "0.1.0"
