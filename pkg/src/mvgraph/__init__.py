"""mvgraph: multi-shard in-memory property-graph database with MV-OCC transactions."""

from .api import GraphCluster
from .cluster import ClusterConfig
from .common import AbortError, AbortReason, GraphError
from .txn import Isolation

__all__ = ["GraphCluster", "ClusterConfig", "Isolation",
           "AbortError", "AbortReason", "GraphError"]
__version__ = "0.1.0"
