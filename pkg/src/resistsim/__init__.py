"""Physical photoresist simulation with differentiable calibration.

The pipeline runs aerial image -> inhibitor concentration (exposure) ->
development rate -> developed depth -> binary pattern, and can fit its
physical parameters to measured aerial/wafer pairs by gradient descent.
"""

from .develop import MackParams, develop_fmm, develop_vertical, mack_rate
from .errors import DataError, InvalidArgument, NumericalError
from .exposure import ExposureParams, solve_exposure_closed_form, solve_exposure_general
from .gradcal import CalibRecord, ResistParams, Schedule, calibrate, default_params, forward_depth
from .grids import BinaryImage, Field2D, Field3D, binarize, resample_bilinear

__all__ = [
    "BinaryImage", "CalibRecord", "DataError", "ExposureParams", "Field2D", "Field3D",
    "InvalidArgument", "MackParams", "NumericalError", "ResistParams", "Schedule",
    "binarize", "calibrate", "default_params", "develop_fmm", "develop_vertical",
    "forward_depth", "mack_rate", "resample_bilinear", "solve_exposure_closed_form",
    "solve_exposure_general",
]
