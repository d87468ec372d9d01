"""Anomaly detection from PCA subspaces fitted by federated ADMM solvers."""
from .errors import (CheckFailure, ConfigurationError, DataFormatError, DegenerateFactorizationError,
                     DegenerateStepError, DimensionError, DivergenceError, FedPCAError,
                     ManifestMismatchError)
from .pca import PcaModel, fit_centralized
from .solvers import SolverConfig

__version__ = "0.1.0"
