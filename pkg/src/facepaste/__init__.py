"""Query-budgeted face pasting attacks against black-box face recognition."""

from .exceptions import (
    BudgetExhaustedError,
    ConfigurationError,
    FacePasteError,
    InvalidParameterError,
    TransportError,
    UnsupportedOperationError,
)
from .oracle import FaceSet, QueryResult, RemoteOracle, SimOracleConfig, SimulatedOracle
from .paste_attack import FacePasteAttack, PasteParams, is_success, objective
from .pgd_attack import PGDAttack, PgdConfig, run_pgd
from .runner import RunConfig, run_matrix
from .similarity import ssim

__version__ = "0.1.0"

__all__ = [
    "BudgetExhaustedError",
    "ConfigurationError",
    "FacePasteAttack",
    "FacePasteError",
    "FaceSet",
    "InvalidParameterError",
    "PGDAttack",
    "PasteParams",
    "PgdConfig",
    "QueryResult",
    "RemoteOracle",
    "RunConfig",
    "SimOracleConfig",
    "SimulatedOracle",
    "TransportError",
    "UnsupportedOperationError",
    "is_success",
    "objective",
    "run_matrix",
    "run_pgd",
    "ssim",
]
