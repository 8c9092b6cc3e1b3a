"""Regularized pooling: smoothed displacement-direction pooling for CNNs.

The package provides max, average and regularized pooling with forward and
backward passes, a small numpy CNN stack to train them, dataset loaders, and
an experiment command line (``regpool``).
"""

from regpool.errors import ConfigError, DataError, ShapeError
from regpool.pooling import (
    GatherRecord,
    PoolConfig,
    avg_pool_backward,
    avg_pool_forward,
    max_pool_backward,
    max_pool_forward,
    regularized_pool_backward,
    regularized_pool_forward,
)

__all__ = [
    "ConfigError",
    "DataError",
    "GatherRecord",
    "PoolConfig",
    "ShapeError",
    "avg_pool_backward",
    "avg_pool_forward",
    "max_pool_backward",
    "max_pool_forward",
    "regularized_pool_backward",
    "regularized_pool_forward",
]

__version__ = "0.1.0"
