"""Query execution: charge, read partitions, filter, aggregate, merge, release.

Noise is applied exactly once, on the coordinating thread, after all
partition tables are merged. Partition results are merged in partition
order and the release mechanisms sort their inputs, so a fixed seed gives
the same answer whatever the number of workers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import mechanisms as mech
from .errors import ValidationError
from .flow_model import DatasetDescriptor, Partition, inspect_schema, list_partitions, sample_features
from .ledger import BudgetLedger, ChargeToken
from .mechanisms import BYPASS, Bounds, BinSpec, NoisyHistogram, Rng
from .rib import RoutingInformationBase
from .selection import (
    FilterSpec,
    PerUserKind,
    PerUserSpec,
    PerUserTable,
    add_inactive_users,
    aggregate_per_user,
    apply_filter,
    merge_partials,
)

logger = logging.getLogger(__name__)


# -- release kinds ----------------------------------------------------------


@dataclass(frozen=True)
class MeanRelease:
    bounds: Bounds


@dataclass(frozen=True)
class StdRelease:
    bounds: Bounds


@dataclass(frozen=True)
class PercentileRelease:
    qs: Tuple[float, ...]
    bounds: Bounds

    def __post_init__(self):
        qs = tuple(float(q) for q in self.qs)
        if not qs:
            raise ValidationError("at least one percentile required")
        if any(not 0.0 <= q <= 1.0 for q in qs):
            raise ValidationError(f"percentiles must lie in [0, 1], got {qs}")
        if len(set(qs)) != len(qs):
            raise ValidationError(f"percentiles must be distinct, got {qs}")
        object.__setattr__(self, "qs", qs)


@dataclass(frozen=True)
class HistogramRelease:
    bins: BinSpec
    include_remainder: bool = False


ReleaseSpec = Union[MeanRelease, StdRelease, PercentileRelease, HistogramRelease]


def release_to_dict(release: ReleaseSpec) -> Dict[str, Any]:
    if isinstance(release, HistogramRelease):
        return {
            "kind": "histogram",
            "bins": mech.bins_to_dict(release.bins),
            "include_remainder": release.include_remainder,
        }
    out: Dict[str, Any] = {"bounds": [release.bounds.lower, release.bounds.upper]}
    if isinstance(release, PercentileRelease):
        out.update(kind="percentiles", qs=list(release.qs))
    else:
        out["kind"] = "mean" if isinstance(release, MeanRelease) else "std"
    return out


def release_from_dict(d: Mapping[str, Any]) -> ReleaseSpec:
    kind = d.get("kind")
    if kind == "histogram":
        bins = d.get("bins")
        if isinstance(bins, str):
            bounds = Bounds(*d["bounds"]) if "bounds" in d else None
            bins = mech.parse_bins(bins, bounds)
        else:
            bins = mech.bins_from_dict(bins)
        return HistogramRelease(bins, bool(d.get("include_remainder", False)))
    if "bounds" not in d:
        raise ValidationError(f"{kind} release needs bounds")
    bounds = Bounds(*d["bounds"])
    if kind == "mean":
        return MeanRelease(bounds)
    if kind == "std":
        return StdRelease(bounds)
    if kind in ("percentile", "percentiles"):
        qs = d.get("qs", d.get("q"))
        return PercentileRelease(tuple(qs) if isinstance(qs, (list, tuple)) else (qs,), bounds)
    raise ValidationError(f"unknown release kind {kind!r}")


# -- requests and results ---------------------------------------------------


@dataclass(frozen=True)
class QueryRequest:
    dataset: DatasetDescriptor
    filter: FilterSpec
    per_user: PerUserSpec
    release: ReleaseSpec
    epsilon: float
    operator_id: str
    include_inactive: bool = False

    def validate(self) -> None:
        mech.check_epsilon(self.epsilon)
        if not self.operator_id:
            raise ValidationError("operator id is required")
        rel = self.release
        if isinstance(rel, HistogramRelease):
            rel.bins.edges()
            if rel.include_remainder and self.per_user.kind is not PerUserKind.PRESENCE:
                raise ValidationError("a remainder bin requires the presence per-user aggregate")
        if self.include_inactive and not self.per_user.additive:
            raise ValidationError(f"include-inactive is not defined for {self.per_user}")

    def to_dict(self) -> Dict[str, Any]:
        ds = self.dataset
        return {
            "dataset": {
                "format": ds.format.value,
                "paths": list(ds.paths),
                "column_mapping": dict(ds.column_mapping) if ds.column_mapping else None,
                "anonymize": ds.anonymize,
            },
            "filter": self.filter.summary(),
            "per_user": str(self.per_user),
            "release": release_to_dict(self.release),
            "epsilon": float(self.epsilon),
            "operator": self.operator_id,
            "include_inactive": self.include_inactive,
        }

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class QueryResult:
    payload: Any
    metadata: Dict[str, Any]
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        payload = self.payload.to_dict() if isinstance(self.payload, NoisyHistogram) else self.payload
        return {"payload": payload, "metadata": dict(self.metadata, wall_time=self.wall_time)}

    def scalar(self) -> Any:
        """The quantity summarized by repeated runs."""
        if isinstance(self.payload, NoisyHistogram):
            if self.payload.remainder is not None:
                return self.payload.share()
            return list(self.payload.counts)
        return self.payload


# -- execution backend ------------------------------------------------------


class LocalBackend:
    """Worker pool over partitions; results come back in input order."""

    def __init__(self, workers: Optional[int] = None, kind: str = "thread"):
        if kind not in ("thread", "process"):
            raise ValidationError(f"unknown backend kind {kind!r}")
        self.workers = max(1, workers or os.cpu_count() or 1)
        self.kind = kind

    def map(self, fn: Callable, items: Sequence) -> List:
        if self.workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        pool_cls = ThreadPoolExecutor if self.kind == "thread" else ProcessPoolExecutor
        with pool_cls(max_workers=min(self.workers, len(items))) as pool:
            return list(pool.map(fn, items))


@dataclass(frozen=True)
class _Task:
    filter: FilterSpec
    per_user: PerUserSpec
    rib: Optional[RoutingInformationBase]
    collect_users: bool

    def __call__(self, part: Partition) -> Tuple[PerUserTable, Optional[FrozenSet[str]]]:
        users = set() if self.collect_users else None

        def records():
            for r in part.records():
                if users is not None:
                    users.add(r.client_id)
                yield r

        filtered = apply_filter(records(), self.filter, self.rib)
        table = aggregate_per_user(filtered, self.per_user, strict=False)
        return table, (frozenset(users) if users is not None else None)


# distinct users of the unfiltered dataset, keyed by content fingerprint
_POPULATION_CACHE: Dict[str, FrozenSet[str]] = {}


def dataset_fingerprint(desc: DatasetDescriptor, parts: Sequence[Partition]) -> str:
    h = hashlib.sha256()
    meta = [desc.format.value, desc.column_mapping and sorted(desc.column_mapping.items()), desc.should_anonymize, desc.salt]
    h.update(json.dumps(meta, default=str).encode())
    for p in parts:
        st = os.stat(p.path)
        h.update(f"{p.path}\0{st.st_size}\0{st.st_mtime_ns}\n".encode())
    return h.hexdigest()


def clear_population_cache() -> None:
    _POPULATION_CACHE.clear()


@dataclass
class _Prepared:
    request: QueryRequest
    partitions: List[Partition]
    rib: Optional[RoutingInformationBase]


def _prepare(request: QueryRequest, rib: Optional[RoutingInformationBase]) -> _Prepared:
    """Everything that may fail before budget is charged."""
    request.validate()
    parts = list_partitions(request.dataset)
    schema = inspect_schema(request.dataset) if parts else {"has_domain": True, "features": None}
    request.filter.validate(has_domain=schema["has_domain"], rib=rib)
    request.per_user.validate(sample_features(parts))
    return _Prepared(request, parts, rib)


def _compute_table(prep: _Prepared, backend: LocalBackend) -> Tuple[PerUserTable, FrozenSet[str]]:
    request, parts = prep.request, prep.partitions
    key = dataset_fingerprint(request.dataset, parts)
    cached = _POPULATION_CACHE.get(key)
    task = _Task(request.filter, request.per_user, prep.rib, cached is None)
    results = backend.map(task, parts)
    users = cached
    if users is None:
        users = frozenset().union(*(u for _, u in results)) if results else frozenset()
        _POPULATION_CACHE[key] = users
    table = merge_partials([t for t, _ in results], request.per_user, population=len(users))
    if request.include_inactive:
        table = add_inactive_users(table, users)
    return table, users


def _release(request: QueryRequest, table: PerUserTable, rng: Rng) -> mech.Release:
    eps = request.epsilon
    rel = request.release
    values = table.values()
    if isinstance(rel, MeanRelease):
        return mech.dp_mean(values, eps, rel.bounds, rng)
    if isinstance(rel, StdRelease):
        return mech.dp_std(values, eps, rel.bounds, rng)
    if isinstance(rel, PercentileRelease):
        return mech.dp_percentile(values, list(rel.qs), eps, rel.bounds, rng)
    remainder = table.total_population - len(table) if rel.include_remainder else None
    return mech.dp_histogram(values, rel.bins, eps, rng, population_remainder=remainder)


def _metadata(prep: _Prepared, release: mech.Release, seed: Optional[int]) -> Dict[str, Any]:
    request = prep.request
    meta: Dict[str, Any] = {
        "epsilon_spent": release.epsilon,
        "mechanism": release.mechanism,
        "sensitivity": release.sensitivity,
        "n_is_public": not isinstance(request.release, HistogramRelease),
        "filter": request.filter.summary(),
        "per_user": str(request.per_user),
        "partitions": len(prep.partitions),
        "releasable": True,
    }
    if "epsilon_split" in release.details:
        meta["epsilon_split"] = release.details["epsilon_split"]
    if isinstance(release.value, NoisyHistogram) and release.value.remainder is not None:
        meta["share"] = release.value.share()
        meta["share_method"] = "ratio of clamped noisy bins"
    if seed is not None and mech.test_mode():
        meta["seed"] = seed
    return meta


def _finalize(
    ledger: BudgetLedger, token: ChargeToken, prep: _Prepared, release: mech.Release, seed, started: float
) -> QueryResult:
    ledger.redeem(token)
    return QueryResult(release.value, _metadata(prep, release, seed), time.perf_counter() - started)


def _resolve_rng(rng: Optional[Rng], seed: Optional[int]) -> Rng:
    if rng is not None:
        return rng
    # seed=None draws from OS entropy
    return np.random.default_rng(seed)


def execute(
    request: QueryRequest,
    ledger: BudgetLedger,
    rib: Optional[RoutingInformationBase] = None,
    rng: Optional[Rng] = None,
    *,
    backend: Optional[LocalBackend] = None,
    seed: Optional[int] = None,
) -> QueryResult:
    """Run one privacy-metered query.

    Validation and I/O checks happen first; then epsilon is charged, and
    from that point on any failure leaves the budget spent.
    """
    started = time.perf_counter()
    prep = _prepare(request, rib)
    ledger.check_operator(request.operator_id)
    if rng is BYPASS:
        mech._bypass(rng)
    token = ledger.charge(request.operator_id, request.epsilon, request.fingerprint())
    table, _ = _compute_table(prep, backend or LocalBackend())
    release = _release(request, table, _resolve_rng(rng, seed))
    return _finalize(ledger, token, prep, release, seed, started)


@dataclass(frozen=True)
class RepeatedResult:
    outputs: List[Any]
    median: Any
    p5: Any
    p95: Any
    releasable: bool
    epsilon_charged: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "outputs": self.outputs,
            "median": self.median,
            "p5": self.p5,
            "p95": self.p95,
            "releasable": self.releasable,
            "epsilon_charged": self.epsilon_charged,
        }


def summarize(outputs: Sequence[Any]) -> Tuple[Any, Any, Any]:
    arr = np.asarray(outputs, dtype=float)
    p5, med, p95 = np.percentile(arr, [5, 50, 95], axis=0)
    conv = (lambda a: a.tolist()) if arr.ndim > 1 else float
    return conv(med), conv(p5), conv(p95)


def run_repeated(
    request: QueryRequest,
    repetitions: int,
    ledger: Optional[BudgetLedger] = None,
    rib: Optional[RoutingInformationBase] = None,
    rng: Optional[Rng] = None,
    *,
    ledger_mode: str = "charge_each",
    simulate: bool = False,
    backend: Optional[LocalBackend] = None,
    seed: Optional[int] = None,
) -> RepeatedResult:
    """Repeat a query and report the median and 5th/95th percentiles.

    ``charge_each`` runs :func:`execute` every time. ``simulation`` charges
    nothing and draws fresh noise on one aggregated table; it needs
    ``simulate=True`` and its outputs are marked non-releasable.
    """
    if repetitions < 1:
        raise ValidationError("repetitions must be >= 1")
    rng = _resolve_rng(rng, seed)
    if ledger_mode == "charge_each":
        if ledger is None:
            raise ValidationError("charge_each mode needs a ledger")
        outputs = [execute(request, ledger, rib, rng, backend=backend).scalar() for _ in range(repetitions)]
        charged = request.epsilon * repetitions
        releasable = True
    elif ledger_mode == "simulation":
        if not simulate:
            raise ValidationError("simulation mode must be acknowledged explicitly (--simulate)")
        prep = _prepare(request, rib)
        if rng is BYPASS:
            mech._bypass(rng)
        table, _ = _compute_table(prep, backend or LocalBackend())
        outputs = []
        for _ in range(repetitions):
            release = _release(request, table, rng)
            outputs.append(QueryResult(release.value, {}).scalar())
        charged = 0.0
        releasable = False
    else:
        raise ValidationError(f"unknown ledger mode {ledger_mode!r}")
    med, p5, p95 = summarize(outputs)
    return RepeatedResult(outputs, med, p5, p95, releasable, charged)
