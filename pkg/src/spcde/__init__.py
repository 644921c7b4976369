"""Semi-parametric conditional density correction of gridded climate model output."""

from .baseline_qm import QmMap, apply_qm, fit_qm
from .calibration import CalibrationModel, Hyper, calibrate, fit_calibration, project, run_pipeline
from .dataio import SynthSpec, generate_synth, read_dataset, write_dataset
from .grid import GridField, prcp_forward, prcp_inverse
from .metrics import MetricsReport, rmse_table, wasserstein_1d
from .spline_basis import SplineBasis, make_basis
from .spqr import SpqrModel

__version__ = "0.1.0"

__all__ = [
    "CalibrationModel", "GridField", "Hyper", "MetricsReport", "QmMap", "SplineBasis", "SpqrModel",
    "SynthSpec", "apply_qm", "calibrate", "fit_calibration", "fit_qm", "generate_synth", "make_basis",
    "prcp_forward", "prcp_inverse", "project", "read_dataset", "rmse_table", "run_pipeline",
    "wasserstein_1d", "write_dataset",
]
