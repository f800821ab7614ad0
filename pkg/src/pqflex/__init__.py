"""Feasible PQ flexibility area estimation at a TSO-DSO interface.

Core pieces: a static grid model with sparse admittance assembly, a
Newton-Raphson AC power flow, N-1 contingency analysis, Monte Carlo
probabilistic power flow, a from-scratch feedforward network stack, the
setpoint agent trained against power-flow feedback, security approximators
and the flexibility area estimation pipeline. A FastAPI service wraps the
package; the command line client talks to that service.
"""

from .grid import (
    AdmittanceSet,
    Bus,
    Der,
    ExtGrid,
    Line,
    Load,
    Network,
    Transformer,
    aggregate_injections,
    build_admittances,
    der_q_limits,
)
from .config import RunConfig
from .gridio import load_grid, load_profiles, save_grid
from .pf import PfResult, Scenario, batch_solve, branch_currents, loading_percent, solve

__version__ = "0.1.0"

__all__ = [
    "AdmittanceSet",
    "Bus",
    "Der",
    "ExtGrid",
    "Line",
    "Load",
    "Network",
    "Transformer",
    "aggregate_injections",
    "build_admittances",
    "der_q_limits",
    "PfResult",
    "RunConfig",
    "Scenario",
    "batch_solve",
    "branch_currents",
    "load_grid",
    "load_profiles",
    "loading_percent",
    "save_grid",
    "solve",
    "__version__",
]
