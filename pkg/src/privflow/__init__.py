"""Differentially-private queries over passive network flow records."""

from .engine import (
    HistogramRelease,
    LocalBackend,
    MeanRelease,
    PercentileRelease,
    QueryRequest,
    QueryResult,
    StdRelease,
    execute,
    run_repeated,
)
from .flow_model import DatasetDescriptor, DatasetFormat, FlowRecord, Protocol, open_dataset
from .ledger import BudgetLedger
from .mechanisms import BYPASS, Bounds, ExplicitBins, LogBins, UniformBins
from .rib import RoutingInformationBase, load_rib, lookup_asn
from .selection import FilterSpec, PerUserKind, PerUserSpec, Reducer

__version__ = "0.1.0"

__all__ = [
    "BYPASS",
    "Bounds",
    "BudgetLedger",
    "DatasetDescriptor",
    "DatasetFormat",
    "ExplicitBins",
    "FilterSpec",
    "FlowRecord",
    "HistogramRelease",
    "LocalBackend",
    "LogBins",
    "MeanRelease",
    "PercentileRelease",
    "PerUserKind",
    "PerUserSpec",
    "Protocol",
    "QueryRequest",
    "QueryResult",
    "Reducer",
    "RoutingInformationBase",
    "StdRelease",
    "UniformBins",
    "execute",
    "load_rib",
    "lookup_asn",
    "open_dataset",
    "run_repeated",
]
