"""Self-guided quantum tomography of high-dimensional photonic states, in simulation."""
from .errors import (
    ConfigError,
    DegenerateVectorError,
    DimensionMismatchError,
    InvalidDimensionError,
    OracleError,
    ResolutionError,
    SGQTError,
    TrialFailure,
    UnsupportedDimensionError,
    ZeroCountsError,
)
from .qstate import DensityMatrix, Ket, LGModeLabel, fidelity, fidelity_mixed
from .spsa import GainSchedule, run_sgqt
from .oracle import MeasurementOracle, NoiseProfile
from .mub import build_mubs, mle_reconstruct, project_pure
from .mixed import MixedParam, realize, run_sgqt_mixed

__version__ = "0.1.0"
