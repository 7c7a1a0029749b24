"""Streaming detection of query-based model extraction on a local device."""
from .autoencoder import Autoencoder, TrainConfig, train_autoencoder
from .data import DatasetSplit, SyntheticConfig, ingest_csv, make_synthetic, synthetic_splits
from .detector import (CalibrationTable, DetectorConfig, DetectorState, LeakageBreakdown, calibrate,
                       classify, leakage_rate, normalize, observe, output_entropy, update_distance,
                       update_reconstruction)
from .errors import (DomainError, FormatError, HorizonError, LeakGuardError, ParseError, ShapeError,
                     TamperError, TrainingError)
from .numeric import make_rng
from .pipeline import ExperimentReport, PipelineConfig, emit_report, run_pipeline
from .service_models import ServiceConfig, train_service_model

__version__ = "0.1.0"
