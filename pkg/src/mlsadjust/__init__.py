"""Boresight calibration and robust control-point adjustment for mobile laser scanning."""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ConfigurationError,
    DegenerateGeometryError,
    DegenerateSampleError,
    EmptyCampaignError,
    FormatError,
    IllConditionedError,
    InsufficientSampleError,
    InvalidInputError,
    MLSError,
    OutOfRangeError,
    UnderdeterminedError,
    UnidentifiableGeometryError,
)
from .frames import (  # noqa: E402
    BoresightParams,
    EulerAttitude,
    LaserObservation,
    Pose,
    Rotation,
    georeference,
    georeference_batch,
    invert_georeference,
    invert_georeference_batch,
)
from .rwtls import EivProblem, RobustWeightedTLS, RwtlsSolution, SolverOptions, solve  # noqa: E402
from .fimloe import (  # noqa: E402
    BoresightCalibrator,
    CalibrationDataset,
    CalibrationResult,
    CalibratorOptions,
    NoiseModel,
    calibrate,
)
from .simkit import Scenario, default_scenario, noiseless_scenario, scan_campaign  # noqa: E402
from .stats import TestReport, compare_methods  # noqa: E402
from .pipeline import METHODS, adjust, run_methods  # noqa: E402

__all__ = [
    "__version__",
    "MLSError", "InvalidInputError", "DegenerateGeometryError", "OutOfRangeError",
    "IllConditionedError", "UnderdeterminedError", "UnidentifiableGeometryError",
    "InsufficientSampleError", "DegenerateSampleError", "EmptyCampaignError", "FormatError", "ConfigurationError",
    "BoresightParams", "EulerAttitude", "LaserObservation", "Pose", "Rotation",
    "georeference", "georeference_batch", "invert_georeference", "invert_georeference_batch",
    "EivProblem", "RobustWeightedTLS", "RwtlsSolution", "SolverOptions", "solve",
    "BoresightCalibrator", "CalibrationDataset", "CalibrationResult", "CalibratorOptions",
    "NoiseModel", "calibrate",
    "Scenario", "default_scenario", "noiseless_scenario", "scan_campaign",
    "TestReport", "compare_methods",
    "METHODS", "adjust", "run_methods",
]
