"""Software disaggregated-memory node with query-operator offloading.

A server exposes a virtualized multi-channel buffer pool over a binary
RDMA-verb-style protocol and executes loadable operator pipelines on read
streams before data crosses the network; a client SDK provides the data API;
a benchmark harness compares the offloaded path against local- and
remote-CPU baselines.
"""

from .client import (
    FTable,
    QPair,
    QueryResult,
    allocTableMem,
    closeConnection,
    dedup_overflow,
    distinct,
    farView,
    freeTableMem,
    group_by,
    openConnection,
    project,
    regex_filter,
    select,
    select_where,
    tableRead,
    tableWrite,
)
from .server import FarviewServer, ServerConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "FTable",
    "FarviewServer",
    "QPair",
    "QueryResult",
    "ServerConfig",
    "allocTableMem",
    "closeConnection",
    "dedup_overflow",
    "distinct",
    "farView",
    "freeTableMem",
    "group_by",
    "load_config",
    "openConnection",
    "project",
    "regex_filter",
    "select",
    "select_where",
    "tableRead",
    "tableWrite",
]
