"""Flow-record data model and the NetFlow (nfdump CSV) / Tstat log parsers."""

from __future__ import annotations

import csv
import datetime as _dt
import enum
import gzip
import hashlib
import io
import ipaddress
import logging
import math
import os
from dataclasses import dataclass, field
from typing import IO, Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import FormatMismatch, IoError, MissingColumn, ValidationError

logger = logging.getLogger(__name__)

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]
ColumnRef = Union[str, int, Sequence[Union[str, int]]]

REQUIRED_FIELDS = ("client_id", "server_ip", "l4_protocol", "bytes_up", "bytes_down")
OPTIONAL_FIELDS = (
    "client_port",
    "server_port",
    "packets_up",
    "packets_down",
    "timestamp",
    "domain",
)
CANONICAL_FIELDS = REQUIRED_FIELDS + OPTIONAL_FIELDS

_EPOCH = _dt.datetime(1970, 1, 1, tzinfo=_dt.timezone.utc)
_MS = _dt.timedelta(milliseconds=1)


class Protocol(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


_PROTO_ALIASES = {"TCP": Protocol.TCP, "6": Protocol.TCP, "UDP": Protocol.UDP, "17": Protocol.UDP}


class DatasetFormat(str, enum.Enum):
    NETFLOW_CSV = "netflow"
    TSTAT_LOG = "tstat"


@dataclass(frozen=True)
class FlowRecord:
    """One TCP/UDP flow.

    Optional fields are ``None`` when the exporter did not provide them.
    ``features`` holds every extra numeric column keyed by its header name.
    """

    client_id: str
    server_ip: IPAddress
    l4_protocol: Protocol
    bytes_up: int
    bytes_down: int
    client_port: Optional[int] = None
    server_port: Optional[int] = None
    packets_up: Optional[int] = None
    packets_down: Optional[int] = None
    timestamp: Optional[int] = None
    domain: Optional[str] = None
    features: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.client_id:
            raise ValueError("client_id must be non-empty")
        for name in ("client_port", "server_port"):
            port = getattr(self, name)
            if port is not None and not 0 <= port <= 65535:
                raise ValueError(f"{name} out of range: {port}")
        for name in ("bytes_up", "bytes_down", "packets_up", "packets_down"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        for key, value in self.features.items():
            if not math.isfinite(value):
                raise ValueError(f"feature {key!r} is not finite")

    @property
    def bytes_total(self) -> int:
        return self.bytes_up + self.bytes_down


# nfdump -o csv header names
NETFLOW_DEFAULT_MAPPING: Dict[str, ColumnRef] = {
    "client_id": "sa",
    "server_ip": "da",
    "client_port": "sp",
    "server_port": "dp",
    "l4_protocol": "pr",
    "bytes_up": "ibyt",
    "bytes_down": "obyt",
    "packets_up": "ipkt",
    "packets_down": "opkt",
    "timestamp": "ts",
}

# Tstat log_tcp_complete / log_udp_complete. Lists are fallbacks, first hit
# wins; "=X" is a literal (tcp_complete logs carry no protocol column).
TSTAT_DEFAULT_MAPPING: Dict[str, ColumnRef] = {
    "client_id": "c_ip",
    "server_ip": "s_ip",
    "client_port": "c_port",
    "server_port": "s_port",
    "l4_protocol": ["proto", "=TCP"],
    "bytes_up": "c_bytes_all",
    "bytes_down": "s_bytes_all",
    "packets_up": "c_pkts_all",
    "packets_down": "s_pkts_all",
    "timestamp": ["first", "c_first_abs"],
    "domain": ["c_tls_SNI", "fqdn", "http_hostname"],
}

# Column names used by to_debug_csv; parse back with parse_netflow_csv.
DEBUG_MAPPING: Dict[str, ColumnRef] = {name: name for name in CANONICAL_FIELDS}

DEFAULT_MAPPINGS = {
    DatasetFormat.NETFLOW_CSV: NETFLOW_DEFAULT_MAPPING,
    DatasetFormat.TSTAT_LOG: TSTAT_DEFAULT_MAPPING,
}


@dataclass(frozen=True)
class DatasetDescriptor:
    format: DatasetFormat
    paths: Tuple[str, ...]
    column_mapping: Optional[Mapping[str, ColumnRef]] = None
    # hash client identifiers on ingest; None picks the format default
    anonymize: Optional[bool] = None
    salt: str = ""
    max_skip_ratio: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "format", DatasetFormat(self.format))
        if isinstance(self.paths, (str, os.PathLike)):
            object.__setattr__(self, "paths", (os.fspath(self.paths),))
        else:
            object.__setattr__(self, "paths", tuple(os.fspath(p) for p in self.paths))
        if not self.paths:
            raise ValidationError("dataset descriptor needs at least one path")
        if self.column_mapping is not None:
            missing = [f for f in REQUIRED_FIELDS if f not in self.column_mapping]
            if missing:
                raise ValidationError(f"column mapping lacks required fields: {missing}")
            unknown = [f for f in self.column_mapping if f not in CANONICAL_FIELDS]
            if unknown:
                raise ValidationError(f"column mapping names unknown fields: {unknown}")

    @property
    def should_anonymize(self) -> bool:
        if self.anonymize is not None:
            return self.anonymize
        # NetFlow exports carry raw client addresses; Tstat deployments are
        # expected to have replaced them already.
        return self.format is DatasetFormat.NETFLOW_CSV

    def effective_mapping(self) -> Dict[str, ColumnRef]:
        mapping = dict(DEFAULT_MAPPINGS[self.format])
        if self.column_mapping:
            mapping.update(self.column_mapping)
        return mapping


@dataclass
class ParseStats:
    rows: int = 0
    records: int = 0
    skipped_protocol: int = 0
    malformed: int = 0
    malformed_lines: List[int] = field(default_factory=list)

    @property
    def skip_ratio(self) -> float:
        return self.malformed / self.rows if self.rows else 0.0


class _Row(Exception):
    """Internal: a data row is malformed."""


def anonymize_client(raw: str, salt: str = "") -> str:
    digest = hashlib.blake2b(raw.encode(), key=salt.encode()[:64], digest_size=8)
    return digest.hexdigest()


def parse_timestamp(text: str) -> int:
    """Milliseconds since the epoch.

    Bare numbers below 1e11 are taken as seconds, larger ones as
    milliseconds. Date-time strings (nfdump style) are read as UTC.
    """
    try:
        value = float(text)
    except ValueError:
        try:
            stamp = _dt.datetime.fromisoformat(text.strip())
        except ValueError as exc:
            raise _Row(f"bad timestamp {text!r}") from exc
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=_dt.timezone.utc)
        return (stamp - _EPOCH) // _MS
    if not math.isfinite(value):
        raise _Row(f"bad timestamp {text!r}")
    return int(round(value * 1000)) if abs(value) < 1e11 else int(round(value))


def _counter(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError as exc:
            raise _Row(f"non-numeric counter {text!r}") from exc
        if not f.is_integer():
            raise _Row(f"non-integral counter {text!r}")
        value = int(f)
    if value < 0:
        raise _Row(f"negative counter {text!r}")
    return value


def _port(text: str) -> int:
    value = _counter(text)
    if value > 65535:
        raise _Row(f"port out of range {text!r}")
    return value


def _resolve(ref: ColumnRef, header: Sequence[str]):
    """Resolve one mapping entry to ('col', index), ('const', text) or None."""
    candidates = [ref] if isinstance(ref, (str, int)) else list(ref)
    for cand in candidates:
        if isinstance(cand, int):
            if 0 <= cand < len(header):
                return ("col", cand)
        elif cand.startswith("="):
            return ("const", cand[1:])
        elif cand in header:
            return ("col", header.index(cand))
    return None


class _RowParser:
    def __init__(self, header, mapping, *, missing_marker, anonymize, salt):
        self.header = list(header)
        self.missing_marker = missing_marker
        self.anonymize = anonymize
        self.salt = salt
        self.slots = {}
        for name in CANONICAL_FIELDS:
            if name not in mapping:
                continue
            slot = _resolve(mapping[name], self.header)
            if slot is None:
                if name in REQUIRED_FIELDS:
                    raise MissingColumn(f"header lacks column for {name!r} (mapped to {mapping[name]!r})")
                continue
            self.slots[name] = slot
        mapped = {idx for kind, idx in self.slots.values() if kind == "col"}
        self.feature_columns = [(i, h) for i, h in enumerate(self.header) if i not in mapped]
        self.width = max([idx + 1 for idx in mapped], default=0)

    def _get(self, row, name) -> Optional[str]:
        slot = self.slots.get(name)
        if slot is None:
            return None
        kind, ref = slot
        text = ref if kind == "const" else row[ref].strip()
        if text == "" or text == self.missing_marker:
            return None
        return text

    def _required(self, row, name) -> str:
        text = self._get(row, name)
        if text is None:
            raise _Row(f"missing value for {name}")
        return text

    def parse(self, row) -> Optional[FlowRecord]:
        """Returns None for out-of-scope protocols; raises _Row if malformed."""
        if len(row) < self.width:
            raise _Row(f"expected at least {self.width} columns, got {len(row)}")
        proto = _PROTO_ALIASES.get(self._required(row, "l4_protocol").upper())
        if proto is None:
            return None
        client = self._required(row, "client_id")
        if self.anonymize:
            client = anonymize_client(client, self.salt)
        try:
            server_ip = ipaddress.ip_address(self._required(row, "server_ip"))
        except ValueError as exc:
            raise _Row(str(exc)) from exc
        kwargs: Dict[str, Any] = {
            "client_id": client,
            "server_ip": server_ip,
            "l4_protocol": proto,
            "bytes_up": _counter(self._required(row, "bytes_up")),
            "bytes_down": _counter(self._required(row, "bytes_down")),
        }
        for name, conv in (
            ("client_port", _port),
            ("server_port", _port),
            ("packets_up", _counter),
            ("packets_down", _counter),
            ("timestamp", parse_timestamp),
        ):
            text = self._get(row, name)
            if text is not None:
                kwargs[name] = conv(text)
        domain = self._get(row, "domain")
        if domain is not None:
            kwargs["domain"] = domain
        features = {}
        for idx, name in self.feature_columns:
            if idx >= len(row):
                continue
            text = row[idx].strip()
            if not text or text == self.missing_marker:
                continue
            try:
                value = float(text)
            except ValueError:
                continue
            if math.isfinite(value):
                features[name] = value
        kwargs["features"] = features
        return FlowRecord(**kwargs)


def _text_stream(stream: IO) -> IO[str]:
    if isinstance(stream, io.TextIOBase):
        return stream
    mode = getattr(stream, "mode", "")
    if isinstance(mode, str) and "b" not in mode and hasattr(stream, "encoding"):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8", errors="replace", newline="")


def _parse_rows(
    rows: Iterable[Tuple[int, List[str]]],
    parser: _RowParser,
    stats: ParseStats,
    max_skip_ratio: float,
    source: str,
) -> Iterator[FlowRecord]:
    for lineno, row in rows:
        stats.rows += 1
        try:
            record = parser.parse(row)
        except (_Row, ValueError) as exc:
            stats.malformed += 1
            stats.malformed_lines.append(lineno)
            logger.debug("%s:%d malformed row: %s", source, lineno, exc)
            continue
        if record is None:
            stats.skipped_protocol += 1
            continue
        stats.records += 1
        yield record
    if stats.skip_ratio > max_skip_ratio:
        raise FormatMismatch(
            f"{source}: {stats.malformed}/{stats.rows} rows malformed "
            f"(threshold {max_skip_ratio:.0%})"
        )


def parse_netflow_csv(
    stream: IO,
    mapping: Optional[Mapping[str, ColumnRef]] = None,
    *,
    stats: Optional[ParseStats] = None,
    anonymize: bool = False,
    salt: str = "",
    max_skip_ratio: float = 0.5,
    missing_marker: str = "",
    source: str = "<netflow>",
) -> Iterator[FlowRecord]:
    """Parse nfdump CSV output (``nfdump -o csv``).

    The nfdump "Summary" trailer, if present, ends the data section.
    """
    text = _text_stream(stream)
    reader = csv.reader(text)
    stats = stats if stats is not None else ParseStats()
    header = next(reader, None)
    if header is None:
        return iter(())
    header = [h.strip() for h in header]
    parser = _RowParser(
        header,
        mapping if mapping is not None else NETFLOW_DEFAULT_MAPPING,
        missing_marker=missing_marker,
        anonymize=anonymize,
        salt=salt,
    )

    def rows():
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if row[0].strip() == "Summary":
                break
            yield lineno, row

    return _parse_rows(rows(), parser, stats, max_skip_ratio, source)


def parse_tstat_header(line: str) -> List[str]:
    """``#c_ip:1 c_port:2 ...`` (optionally ``#15#c_ip:1 ...``) -> names."""
    line = line.strip()
    if not line.startswith("#"):
        raise FormatMismatch(f"not a Tstat header: {line[:40]!r}")
    body = line.lstrip("#")
    head, sep, rest = body.partition("#")
    if sep and head.isdigit():
        body = rest
    names = []
    for token in body.split():
        name, sep, _ = token.rpartition(":")
        names.append(name if sep else token)
    return names


def parse_tstat_log(
    stream: IO,
    mapping: Optional[Mapping[str, ColumnRef]] = None,
    *,
    stats: Optional[ParseStats] = None,
    anonymize: bool = False,
    salt: str = "",
    max_skip_ratio: float = 0.5,
    missing_marker: str = "-",
    source: str = "<tstat>",
) -> Iterator[FlowRecord]:
    text = _text_stream(stream)
    stats = stats if stats is not None else ParseStats()
    first = text.readline()
    if not first:
        return iter(())
    header = parse_tstat_header(first)
    parser = _RowParser(
        header,
        mapping if mapping is not None else TSTAT_DEFAULT_MAPPING,
        missing_marker=missing_marker,
        anonymize=anonymize,
        salt=salt,
    )

    def rows():
        for lineno, line in enumerate(text, start=2):
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split()

    return _parse_rows(rows(), parser, stats, max_skip_ratio, source)


# -- files and datasets -----------------------------------------------------


def open_file(path: str) -> IO[str]:
    """Open a (possibly gzip-compressed) text file."""
    try:
        if path.endswith(".gz"):
            return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", errors="replace", newline="")
        return open(path, "r", encoding="utf-8", errors="replace", newline="")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc


def sniff_format(path: str) -> Optional[DatasetFormat]:
    """Guess the format from the first line; None for an empty file."""
    try:
        with open_file(path) as fh:
            first = fh.readline()
    except (OSError, EOFError, gzip.BadGzipFile) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not first.strip():
        return None
    if first.startswith("#"):
        return DatasetFormat.TSTAT_LOG
    if "," in first:
        return DatasetFormat.NETFLOW_CSV
    raise FormatMismatch(f"{path}: unrecognized header")


@dataclass(frozen=True)
class Partition:
    """One input file of a dataset. Picklable, so it can cross processes."""

    partition_id: int
    path: str
    descriptor: DatasetDescriptor

    def records(self, stats: Optional[ParseStats] = None) -> Iterator[FlowRecord]:
        desc = self.descriptor
        parse = parse_tstat_log if desc.format is DatasetFormat.TSTAT_LOG else parse_netflow_csv
        with open_file(self.path) as fh:
            try:
                yield from parse(
                    fh,
                    desc.effective_mapping(),
                    stats=stats,
                    anonymize=desc.should_anonymize,
                    salt=desc.salt,
                    max_skip_ratio=desc.max_skip_ratio,
                    source=self.path,
                )
            except (OSError, EOFError, gzip.BadGzipFile) as exc:
                raise IoError(f"error reading {self.path}: {exc}") from exc


def _expand(paths: Sequence[str]) -> List[str]:
    files = []
    for path in paths:
        if not os.path.exists(path):
            raise IoError(f"no such file or directory: {path}")
        if os.path.isdir(path):
            for name in os.listdir(path):
                full = os.path.join(path, name)
                # hidden and "_"-prefixed names are metadata (Hadoop convention)
                if not name.startswith((".", "_")) and os.path.isfile(full):
                    files.append(full)
        else:
            files.append(path)
    for path in files:
        if not os.access(path, os.R_OK):
            raise IoError(f"not readable: {path}")
    return sorted(set(files))


def list_partitions(desc: DatasetDescriptor) -> List[Partition]:
    """Resolve a descriptor to its partitions, one per file, sorted by path.

    All paths are checked before anything is parsed; a file whose header
    does not match the declared format raises FormatMismatch.
    """
    files = _expand(desc.paths)
    for path in files:
        found = sniff_format(path)
        if found is not None and found is not desc.format:
            raise FormatMismatch(f"{path}: looks like {found.value}, dataset declared {desc.format.value}")
    return [Partition(i, path, desc) for i, path in enumerate(files)]


def open_dataset(desc: DatasetDescriptor) -> Iterator[Tuple[int, Iterator[FlowRecord]]]:
    for part in list_partitions(desc):
        yield part.partition_id, part.records()


def inspect_schema(desc: DatasetDescriptor) -> Dict[str, Any]:
    """Describe columns and mapped fields using the first file and record."""
    parts = list_partitions(desc)
    info: Dict[str, Any] = {
        "format": desc.format.value,
        "partitions": len(parts),
        "columns": [],
        "mapped_fields": {},
        "has_domain": False,
        "features": [],
    }
    if not parts:
        return info
    with open_file(parts[0].path) as fh:
        first = fh.readline()
    if first.strip():
        if desc.format is DatasetFormat.TSTAT_LOG:
            header = parse_tstat_header(first)
        else:
            header = [h.strip() for h in next(csv.reader([first]))]
        mapping = desc.effective_mapping()
        parser = _RowParser(header, mapping, missing_marker="", anonymize=False, salt="")
        info["columns"] = header
        info["mapped_fields"] = {
            name: (header[ref] if kind == "col" else "=" + ref) for name, (kind, ref) in parser.slots.items()
        }
        info["has_domain"] = "domain" in parser.slots
    info["features"] = sorted(sample_features(parts) or ())
    return info


def sample_features(parts: Sequence[Partition], limit: int = 1000) -> Optional[set]:
    """Feature names seen in the first ``limit`` records; None if there are none.

    Optional features (e.g. RTT, absent for UDP) show up in some rows only,
    hence a sample rather than a single record.
    """
    names: set = set()
    seen = 0
    for part in parts:
        for record in part.records():
            names.update(record.features)
            seen += 1
            if seen >= limit:
                return names
    return names if seen else None


# -- canonical debug CSV ----------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Protocol):
        return value.value
    return str(value)


def to_debug_csv(records: Iterable[FlowRecord]) -> str:
    """Serialize records with canonical column names plus one column per feature."""
    records = list(records)
    feature_names = sorted({name for r in records for name in r.features})
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(list(CANONICAL_FIELDS) + feature_names)
    for r in records:
        row = [_fmt(getattr(r, name)) for name in CANONICAL_FIELDS]
        if r.timestamp is not None:
            # ISO form keeps millisecond values unambiguous on re-parse
            stamp = _EPOCH + _dt.timedelta(milliseconds=r.timestamp)
            row[CANONICAL_FIELDS.index("timestamp")] = stamp.isoformat(timespec="milliseconds")
        row += [_fmt(r.features.get(name)) for name in feature_names]
        writer.writerow(row)
    return out.getvalue()


def from_debug_csv(text: str) -> List[FlowRecord]:
    return list(parse_netflow_csv(io.StringIO(text), DEBUG_MAPPING, max_skip_ratio=1.0))
