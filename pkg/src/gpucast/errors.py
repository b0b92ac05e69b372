"""Exception hierarchy shared across the package.

Every domain error derives from GpucastError so the CLI can map any
failure to a nonzero exit code with a readable message.
"""


class GpucastError(Exception):
    """Base class for all errors raised by this package."""


class CatalogError(GpucastError):
    """Malformed catalog file or invalid hardware spec."""


class UnknownGpuError(CatalogError):
    """A GPU name was requested that is not in the loaded catalog."""


class KernelSpecError(GpucastError):
    """Invalid operator description (bad rank, nonpositive dims, ...)."""


class TileDbError(GpucastError):
    """Malformed tile-database record file."""


class GraphError(GpucastError):
    """Invalid operator-graph file: cycles, dangling edges, bad shapes."""


class FusionError(GraphError):
    """A requested fusion group is not a fusible path."""


class TrainingError(GpucastError):
    """Training cannot proceed (empty dataset, unresolvable sample, ...)."""


class WeightFormatError(GpucastError):
    """Weight file is corrupt or has an unsupported version."""


class UntrainedOperatorError(GpucastError):
    """Prediction was requested for an operator class without weights."""


class DistributedError(GpucastError):
    """Invalid parallel plan or a graph that cannot be partitioned."""
