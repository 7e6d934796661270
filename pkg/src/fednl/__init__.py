"""Communication-compressed second-order federated optimization.

A runtime for Newton-type federated learning on L2-regularized logistic
regression, where clients ship compressed Hessian differences instead of
full matrices.  The same client/master state machines drive both a
deterministic in-process simulator and a real TCP master/client deployment,
producing bitwise-identical trajectories.
"""

from .algorithms import (
    ClientCore,
    ClientUpdate,
    DivergenceError,
    LineSearchError,
    MasterCore,
    PPUpdate,
    RunConfig,
    StepInfo,
    default_alpha,
)
from .compressors import CompressedDelta, CompressorKind, CompressorSpec
from .oracle import ClientShard
from .runtime import MetricsRow, run_client, run_master, simulate, traffic_model

__version__ = "0.1.0"

__all__ = [
    "ClientCore",
    "ClientShard",
    "ClientUpdate",
    "CompressedDelta",
    "CompressorKind",
    "CompressorSpec",
    "DivergenceError",
    "LineSearchError",
    "MasterCore",
    "MetricsRow",
    "PPUpdate",
    "RunConfig",
    "StepInfo",
    "default_alpha",
    "run_client",
    "run_master",
    "simulate",
    "traffic_model",
    "__version__",
]
