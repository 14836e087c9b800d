from ._core import (
    Error,
    ConfigError,
    DataError,
    NoHistory,
    UndefinedMetric,
    ExitModel,
    ExitPolicy,
    auc,
    bidimensional_softmax,
    discrepancy,
    generate_synthetic,
    head_lr,
    new_model,
    replay,
    retrieve,
    should_exit,
    split_sizes,
    window_mean,
)

__all__ = [
    "Error",
    "ConfigError",
    "DataError",
    "NoHistory",
    "UndefinedMetric",
    "ExitModel",
    "ExitPolicy",
    "auc",
    "bidimensional_softmax",
    "discrepancy",
    "generate_synthetic",
    "head_lr",
    "new_model",
    "replay",
    "retrieve",
    "should_exit",
    "split_sizes",
    "window_mean",
]
