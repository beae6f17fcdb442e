"""Domain adaptation for black-box LMs by retrieval interpolation with trainable weights."""

__version__ = "0.1.0"

from . import adapter, analysis, core, datastore, errors, evaluation, retrieval, toy, trace_io, trainer

__all__ = [
    "adapter",
    "analysis",
    "core",
    "datastore",
    "errors",
    "evaluation",
    "retrieval",
    "toy",
    "trace_io",
    "trainer",
    "__version__",
]
