"""Query-conditioned variational generation of multi-agent collaboration
graphs, plus a surrogate topology-evolution simulator for cost accounting."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigurationError,
    EmbeddingServiceError,
    GraphFormatError,
    NumericalError,
    TopoPriorError,
    ValidationError,
)
from .graphs import (
    CollaborationGraph,
    DatasetRecord,
    RoleDescriptor,
    RolePool,
    default_role_pool,
)

__all__ = [
    "CheckpointError",
    "CollaborationGraph",
    "ConfigurationError",
    "DatasetRecord",
    "EmbeddingServiceError",
    "GraphFormatError",
    "NumericalError",
    "RoleDescriptor",
    "RolePool",
    "TopoPriorError",
    "ValidationError",
    "default_role_pool",
    "__version__",
]
