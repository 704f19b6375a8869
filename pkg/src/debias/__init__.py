"""Harmonization and bias analysis for multi-site tabular neuroimaging features."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ConfigError,
    CovariateSpec,
    DataError,
    DebiasError,
    FeatureTable,
    NumericalError,
    TableSchema,
    load_table,
    write_table,
)

__all__ = [
    "ConfigError",
    "CovariateSpec",
    "DataError",
    "DebiasError",
    "FeatureTable",
    "NumericalError",
    "TableSchema",
    "load_table",
    "write_table",
    "__version__",
]
