"""Prefix -> origin ASN table with longest-prefix-match lookup."""

from __future__ import annotations

import io
import ipaddress
import logging
from dataclasses import dataclass
from typing import IO, Dict, Iterable, Iterator, Optional, Tuple, Union

from .errors import EmptyRib

logger = logging.getLogger(__name__)

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]

# pseudo-ASN for addresses no prefix covers; used by the ASN filter
UNKNOWN_ASN = "UNKNOWN"


@dataclass(frozen=True, order=True)
class Prefix:
    """Canonical prefix: host bits below ``length`` are always zero."""

    version: int
    network: int
    length: int

    @classmethod
    def parse(cls, text: str) -> "Prefix":
        net = ipaddress.ip_network(text.strip(), strict=False)
        return cls(net.version, int(net.network_address), net.prefixlen)

    @classmethod
    def of(cls, address: Union[str, int, IPAddress], length: int, version: Optional[int] = None) -> "Prefix":
        if not isinstance(address, int):
            address = ipaddress.ip_address(address)
            version = address.version
            address = int(address)
        bits = 32 if version == 4 else 128
        if not 0 <= length <= bits:
            raise ValueError(f"prefix length {length} out of range for IPv{version}")
        return cls(version, address & _mask(bits, length), length)

    def __str__(self) -> str:
        cls = ipaddress.IPv4Network if self.version == 4 else ipaddress.IPv6Network
        return str(cls((self.network, self.length)))

    def contains(self, address: IPAddress) -> bool:
        if address.version != self.version:
            return False
        bits = 32 if self.version == 4 else 128
        return int(address) & _mask(bits, self.length) == self.network


def _mask(bits: int, length: int) -> int:
    return ((1 << length) - 1) << (bits - length)


class _Family:
    """One hash table per prefix length; lookup probes lengths longest first.

    Observable behaviour is the same as walking a binary trie to the deepest
    node that carries a value.
    """

    def __init__(self, bits: int):
        self.bits = bits
        self.tables: Dict[int, Dict[int, int]] = {}
        self.lengths: Tuple[int, ...] = ()

    def put(self, network: int, length: int, asn: int) -> Optional[int]:
        table = self.tables.setdefault(length, {})
        previous = table.get(network)
        table[network] = asn
        self.lengths = tuple(sorted(self.tables, reverse=True))
        return previous

    def get(self, address: int) -> Optional[int]:
        bits = self.bits
        for length in self.lengths:
            asn = self.tables[length].get(address & _mask(bits, length))
            if asn is not None:
                return asn
        return None

    def __len__(self) -> int:
        return sum(len(t) for t in self.tables.values())

    def items(self) -> Iterator[Tuple[int, int, int]]:
        for length in sorted(self.tables):
            for network, asn in sorted(self.tables[length].items()):
                yield network, length, asn


class RoutingInformationBase:
    """Immutable after construction; safe to share between threads."""

    def __init__(self, entries: Iterable[Tuple[Prefix, int]] = ()):
        self._v4 = _Family(32)
        self._v6 = _Family(128)
        for prefix, asn in entries:
            self._insert(prefix, asn)

    def _insert(self, prefix: Prefix, asn: int) -> Optional[int]:
        if not isinstance(asn, int) or asn <= 0:
            raise ValueError(f"ASN must be a positive integer, got {asn!r}")
        family = self._v4 if prefix.version == 4 else self._v6
        return family.put(prefix.network, prefix.length, asn)

    def __len__(self) -> int:
        return len(self._v4) + len(self._v6)

    def lookup(self, ip: Union[str, IPAddress]) -> Optional[int]:
        if isinstance(ip, str):
            ip = ipaddress.ip_address(ip)
        family = self._v4 if ip.version == 4 else self._v6
        return family.get(int(ip))

    def entries(self) -> Iterator[Tuple[Prefix, int]]:
        for version, family in ((4, self._v4), (6, self._v6)):
            for network, length, asn in family.items():
                yield Prefix(version, network, length), asn


def lookup_asn(rib: RoutingInformationBase, ip: Union[str, IPAddress]) -> Optional[int]:
    return rib.lookup(ip)


def load_rib(stream: Union[IO, str]) -> RoutingInformationBase:
    """Read ``prefix/len ASN`` lines. Malformed lines are logged and skipped;
    on duplicate prefixes the last line wins."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rib = RoutingInformationBase()
    valid = 0
    for lineno, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", errors="replace")
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError("expected 'prefix ASN'")
            prefix = Prefix.parse(parts[0])
            asn = int(parts[1].upper().removeprefix("AS"))
            if asn <= 0:
                raise ValueError("ASN must be positive")
        except ValueError as exc:
            logger.warning("RIB line %d malformed (%s): %r", lineno, exc, raw.rstrip())
            continue
        previous = rib._insert(prefix, asn)
        if previous is not None:
            logger.info("RIB line %d: %s redefined (AS%d -> AS%d)", lineno, prefix, previous, asn)
        valid += 1
    if not valid:
        raise EmptyRib("RIB contains no valid entries")
    return rib


def load_rib_file(path: str) -> RoutingInformationBase:
    from .flow_model import open_file

    with open_file(path) as fh:
        return load_rib(fh)
