"""Event-time annotation from longitudinal encounter data.

Per-channel FPCA summarizes each patient's encounter times, a B-spline
proportional odds model links the summaries to the event time, adaptive
group lasso selects channels, and annotation accuracy is measured over a
grid of probability cutoffs.
"""

__version__ = "0.1.0"

from .data_model import CohortData, EncounterChannel, Patient, export_cohort, ingest_cohort  # noqa: E402
from .evaluation import AccuracyReport, cross_validate, cutoff_search  # noqa: E402
from .fpca import FeatureMatrix, FpcaModel, KernelConfig, build_feature_matrix, fit_fpca  # noqa: E402
from .po_model import PoData, PoFit, fit_profile, predict  # noqa: E402
from .selection import SelectionResult, tune_lambda  # noqa: E402
from .spline import SplineBasis, place_knots  # noqa: E402

__all__ = [
    "__version__",
    "CohortData", "EncounterChannel", "Patient", "export_cohort", "ingest_cohort",
    "AccuracyReport", "cross_validate", "cutoff_search",
    "FeatureMatrix", "FpcaModel", "KernelConfig", "build_feature_matrix", "fit_fpca",
    "PoData", "PoFit", "fit_profile", "predict",
    "SelectionResult", "tune_lambda",
    "SplineBasis", "place_knots",
]
