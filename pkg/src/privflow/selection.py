"""Flow filtering and per-user aggregation.

Filtering only ever looks at server-side attributes. Per-user values are
kept inside :class:`PerUserTable`; the release layer reads them as an
anonymous, sorted list of numbers.
"""

from __future__ import annotations

import enum
import ipaddress
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Union

from .errors import MissingDomainField, MissingRib, SpecMismatch, UnknownFeature, ValidationError
from .flow_model import FlowRecord, Protocol
from .rib import UNKNOWN_ASN, RoutingInformationBase


class FilterKind(str, enum.Enum):
    ALL = "all"
    SERVER_IP = "server_ip"
    DOMAIN = "domain"
    ASN = "asn"


def normalize_domain(name: str) -> str:
    return name.strip().rstrip(".").lower()


@dataclass(frozen=True)
class FilterSpec:
    kind: FilterKind = FilterKind.ALL
    values: FrozenSet[Any] = frozenset()
    # optional conjunctive restriction on the L4 protocol
    protocols: Optional[FrozenSet[Protocol]] = None

    def __post_init__(self):
        kind = FilterKind(self.kind)
        object.__setattr__(self, "kind", kind)
        values = frozenset(self.values)
        if kind is FilterKind.ALL:
            if values:
                raise ValidationError("the All filter takes no values")
        elif not values:
            raise ValidationError(f"{kind.value} filter needs at least one value")
        if kind is FilterKind.SERVER_IP:
            try:
                values = frozenset(ipaddress.ip_address(v) if isinstance(v, str) else v for v in values)
            except ValueError as exc:
                raise ValidationError(str(exc)) from exc
        elif kind is FilterKind.DOMAIN:
            values = frozenset(normalize_domain(v) for v in values)
        elif kind is FilterKind.ASN:
            values = frozenset(_asn_value(v) for v in values)
        object.__setattr__(self, "values", values)
        if self.protocols is not None:
            protos = frozenset(Protocol(p.upper() if isinstance(p, str) else p) for p in self.protocols)
            if not protos:
                raise ValidationError("protocol restriction must not be empty")
            object.__setattr__(self, "protocols", protos)

    @classmethod
    def all(cls, protocols=None) -> "FilterSpec":
        return cls(FilterKind.ALL, frozenset(), protocols)

    @classmethod
    def server_ip(cls, *ips, protocols=None) -> "FilterSpec":
        return cls(FilterKind.SERVER_IP, frozenset(ips), protocols)

    @classmethod
    def domain(cls, *names, protocols=None) -> "FilterSpec":
        return cls(FilterKind.DOMAIN, frozenset(names), protocols)

    @classmethod
    def asn(cls, *asns, protocols=None) -> "FilterSpec":
        return cls(FilterKind.ASN, frozenset(asns), protocols)

    def validate(self, *, has_domain: bool, rib: Optional[RoutingInformationBase]) -> None:
        if self.kind is FilterKind.DOMAIN and not has_domain:
            raise MissingDomainField("dataset has no server domain field; domain filter rejected")
        if self.kind is FilterKind.ASN and rib is None:
            raise MissingRib("ASN filter requires a routing information base")

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind.value, "values": sorted(str(v) for v in self.values)}
        if self.protocols is not None:
            out["protocols"] = sorted(p.value for p in self.protocols)
        return out

    def matcher(self, rib: Optional[RoutingInformationBase] = None) -> Callable[[FlowRecord], bool]:
        kind, values = self.kind, self.values
        if kind is FilterKind.ALL:
            base = None
        elif kind is FilterKind.SERVER_IP:
            base = lambda r: r.server_ip in values  # noqa: E731
        elif kind is FilterKind.DOMAIN:
            exact = {v for v in values if not v.startswith("*.")}
            suffixes = tuple(v[1:] for v in values if v.startswith("*."))

            def base(r):
                if r.domain is None:
                    return False
                name = normalize_domain(r.domain)
                return name in exact or (bool(suffixes) and name.endswith(suffixes))

        else:
            if rib is None:
                raise MissingRib("ASN filter requires a routing information base")

            def base(r):
                asn = rib.lookup(r.server_ip)
                return (UNKNOWN_ASN if asn is None else asn) in values

        protos = self.protocols
        if protos is None:
            return base if base is not None else (lambda r: True)
        if base is None:
            return lambda r: r.l4_protocol in protos
        return lambda r: r.l4_protocol in protos and base(r)


def _asn_value(v) -> Union[int, str]:
    if isinstance(v, str):
        text = v.strip().upper()
        if text == UNKNOWN_ASN:
            return UNKNOWN_ASN
        v = text.removeprefix("AS")
    try:
        asn = int(v)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad ASN {v!r}") from exc
    if asn <= 0:
        raise ValidationError(f"ASN must be positive, got {asn}")
    return asn


def apply_filter(
    records: Iterable[FlowRecord],
    spec: FilterSpec,
    rib: Optional[RoutingInformationBase] = None,
) -> Iterator[FlowRecord]:
    if spec.kind is FilterKind.ASN and rib is None:
        raise MissingRib("ASN filter requires a routing information base")
    match = spec.matcher(rib)
    return (r for r in records if match(r))


# -- per-user aggregation ---------------------------------------------------


class PerUserKind(str, enum.Enum):
    FLOW_COUNT = "flows"
    VOLUME_DOWN = "volume-down"
    VOLUME_UP = "volume-up"
    VOLUME_TOTAL = "volume-total"
    FEATURE = "feature"
    PRESENCE = "presence"


class Reducer(str, enum.Enum):
    AVG = "avg"
    MIN = "min"
    MAX = "max"


_ADDITIVE = {PerUserKind.FLOW_COUNT, PerUserKind.VOLUME_DOWN, PerUserKind.VOLUME_UP, PerUserKind.VOLUME_TOTAL}


@dataclass(frozen=True)
class PerUserSpec:
    kind: PerUserKind
    feature: Optional[str] = None
    reducer: Optional[Reducer] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PerUserKind(self.kind))
        if self.kind is PerUserKind.FEATURE:
            if not self.feature:
                raise ValidationError("feature aggregation needs a feature name")
            object.__setattr__(self, "reducer", Reducer(self.reducer or Reducer.AVG))
        elif self.feature is not None or self.reducer is not None:
            raise ValidationError(f"{self.kind.value} takes no feature/reducer")

    @classmethod
    def parse(cls, text: str) -> "PerUserSpec":
        """``flows``, ``volume-total``, ``presence``, ``feature:NAME[:avg|min|max]``."""
        if text.startswith("feature:"):
            _, name, *rest = text.split(":")
            return cls(PerUserKind.FEATURE, name, Reducer(rest[0]) if rest else Reducer.AVG)
        try:
            return cls(PerUserKind(text))
        except ValueError as exc:
            raise ValidationError(f"unknown per-user aggregate {text!r}") from exc

    def __str__(self) -> str:
        if self.kind is PerUserKind.FEATURE:
            return f"feature:{self.feature}:{self.reducer.value}"
        return self.kind.value

    @property
    def additive(self) -> bool:
        return self.kind in _ADDITIVE

    def validate(self, features: Optional[Iterable[str]]) -> None:
        """``features`` are the names seen in sampled records (None: no records)."""
        if self.kind is not PerUserKind.FEATURE or features is None:
            return
        features = set(features)
        if self.feature not in features:
            raise UnknownFeature(f"feature {self.feature!r} not in dataset schema ({sorted(features)})")


@dataclass
class PerUserTable:
    """One aggregate per user plus the pre-filter population size."""

    spec: PerUserSpec
    total_population: int
    _acc: Dict[str, Any] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self._acc)

    def _value(self, acc) -> float:
        if self.spec.kind is PerUserKind.FEATURE and self.spec.reducer is Reducer.AVG:
            return math.fsum(acc) / len(acc)
        if self.spec.kind is PerUserKind.PRESENCE:
            return 1.0
        return float(acc)

    def values(self) -> List[float]:
        """Per-user values, sorted; identities are not exposed."""
        return sorted(self._value(acc) for acc in self._acc.values())

    def to_dict(self) -> Dict[str, float]:
        """Per-user mapping. For tests and local inspection only."""
        return {user: self._value(acc) for user, acc in sorted(self._acc.items())}


def _step(spec: PerUserSpec) -> Callable[[Dict[str, Any], FlowRecord], None]:
    kind = spec.kind
    if kind is PerUserKind.FLOW_COUNT:

        def step(acc, r):
            acc[r.client_id] = acc.get(r.client_id, 0) + 1

    elif kind in _ADDITIVE:
        attr = {
            PerUserKind.VOLUME_DOWN: "bytes_down",
            PerUserKind.VOLUME_UP: "bytes_up",
            PerUserKind.VOLUME_TOTAL: "bytes_total",
        }[kind]

        def step(acc, r):
            acc[r.client_id] = acc.get(r.client_id, 0) + getattr(r, attr)

    elif kind is PerUserKind.PRESENCE:

        def step(acc, r):
            acc[r.client_id] = True

    else:
        name, reducer = spec.feature, spec.reducer

        def step(acc, r):
            value = r.features.get(name)
            if value is None:
                return
            cur = acc.get(r.client_id)
            if reducer is Reducer.AVG:
                if cur is None:
                    acc[r.client_id] = [value]
                else:
                    cur.append(value)
            elif cur is None:
                acc[r.client_id] = value
            elif reducer is Reducer.MIN:
                acc[r.client_id] = min(cur, value)
            else:
                acc[r.client_id] = max(cur, value)

    return step


def aggregate_per_user(
    filtered: Iterable[FlowRecord],
    spec: PerUserSpec,
    population: Optional[int] = None,
    *,
    strict: bool = True,
) -> PerUserTable:
    """Collapse the filtered flows to one value per user.

    ``population`` is the number of distinct users in the unfiltered data;
    when omitted it defaults to the number of users in the result. With
    ``strict``, a feature that no record carries raises UnknownFeature.
    """
    acc: Dict[str, Any] = {}
    step = _step(spec)
    seen = 0
    for record in filtered:
        seen += 1
        step(acc, record)
    if strict and spec.kind is PerUserKind.FEATURE and seen and not acc:
        raise UnknownFeature(f"no record carries feature {spec.feature!r}")
    if population is None:
        population = len(acc)
    elif population < len(acc):
        raise ValueError(f"population {population} smaller than {len(acc)} aggregated users")
    return PerUserTable(spec, population, acc)


def _merge_acc(spec: PerUserSpec, a, b):
    if spec.kind is PerUserKind.PRESENCE:
        return a or b
    if spec.kind is PerUserKind.FEATURE:
        if spec.reducer is Reducer.AVG:
            return a + b
        return min(a, b) if spec.reducer is Reducer.MIN else max(a, b)
    return a + b


def merge_partials(
    tables: Sequence[PerUserTable],
    spec: PerUserSpec,
    *,
    population: Optional[int] = None,
    user_disjoint: bool = False,
) -> PerUserTable:
    """Combine per-partition tables computed under the same spec.

    Partitions generally share users, so the population must come from a
    global distinct count (``population``). Only for user-disjoint
    partitions can it be summed from the partials.
    """
    for t in tables:
        if t.spec != spec:
            raise SpecMismatch(f"cannot merge table for {t.spec} under {spec}")
    merged: Dict[str, Any] = {}
    for t in tables:
        for user, acc in t._acc.items():
            cur = merged.get(user)
            if cur is None:
                merged[user] = list(acc) if isinstance(acc, list) else acc
            else:
                merged[user] = _merge_acc(spec, cur, acc)
    if population is None:
        if not user_disjoint:
            raise ValueError("population must be given unless partitions are user-disjoint")
        population = sum(t.total_population for t in tables)
    if population < len(merged):
        raise ValueError(f"population {population} smaller than {len(merged)} aggregated users")
    return PerUserTable(spec, population, merged)


def add_inactive_users(table: PerUserTable, users: Iterable[str]) -> PerUserTable:
    """Give every known user without matching flows a zero entry.

    Only meaningful for flow counts and volumes.
    """
    if not table.spec.additive:
        raise ValidationError(f"include-inactive is not defined for {table.spec}")
    acc = dict(table._acc)
    for user in users:
        acc.setdefault(user, 0)
    return PerUserTable(table.spec, max(table.total_population, len(acc)), acc)
