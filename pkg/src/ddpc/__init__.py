"""Data-driven predictive control: DeePC, WKPC and MFAPC-CFDL with a shared
QP solver, plant simulators and a benchmark harness."""

from .deepc import DeePC, DeePCConfig
from .errors import ConfigError, ControllerError, PersistencyError
from .harness import Metrics, Reference, RunResult, compute_metrics, offline_excitation, run_closed_loop
from .koopman import WKPC, Lifter, WKPCConfig, lift, make_lifter
from .mfapc import MFAPC, MFAPCConfig
from .plants import LTIPlant, Pendulum, PendulumParams, Scenario, make_lti, make_random_stable_lti
from .qpsolve import QPProblem, QPSolution, QPSolver, kkt_solve, solve
from .signals import (DataBuffer, HankelView, Trajectory, behavioral_residual, build_hankel,
                      is_persistently_exciting, persistent_excitation_order)

__version__ = "0.1.0"
