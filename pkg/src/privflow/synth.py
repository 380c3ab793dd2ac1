"""Seeded synthetic flow traces with a ground-truth sidecar.

The sidecar lists true per-user totals and site shares. It exists so tests
can check query answers against exact oracles; it is the private data in
plain text and must never be produced from, or shipped with, real traces.
"""

from __future__ import annotations

import gzip
import io
import ipaddress
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from .errors import IoError, ValidationError
from .flow_model import DatasetFormat

SIDECAR_WARNING = (
    "GROUND TRUTH FOR TESTING ONLY: contains per-user values and defeats "
    "differential privacy if derived from or distributed with real data"
)


@dataclass(frozen=True)
class Site:
    domain: str
    popularity: float  # fraction of users accessing the site

    def __post_init__(self):
        if not 0.0 < self.popularity <= 1.0:
            raise ValidationError(f"site popularity must be in (0, 1], got {self.popularity}")


@dataclass(frozen=True)
class SynthSpec:
    n_users: int
    sites: Tuple[Site, ...] = ()
    # per-flow log-normal (mu, sigma) of bytes, keyed "<direction>_<protocol>"
    volume: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: {
            "down_tcp": (16.0, 2.0),
            "up_tcp": (13.5, 2.0),
            "down_udp": (15.0, 2.2),
            "up_udp": (12.5, 2.2),
        }
    )
    site_flow_p: float = 0.5  # geometric parameter, flows per user per site
    background_flow_p: float = 0.3  # geometric parameter, other flows per user
    udp_fraction: float = 0.3
    n_files: int = 1
    start_ms: int = 1_683_000_000_000
    span_ms: int = 7 * 24 * 3600 * 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1:
            raise ValidationError("n_users must be >= 1")
        if self.n_files < 1:
            raise ValidationError("n_files must be >= 1")
        object.__setattr__(self, "sites", tuple(s if isinstance(s, Site) else Site(**s) for s in self.sites))
        for p in (self.site_flow_p, self.background_flow_p):
            if not 0.0 < p <= 1.0:
                raise ValidationError(f"geometric parameter must be in (0, 1], got {p}")
        if not 0.0 <= self.udp_fraction <= 1.0:
            raise ValidationError("udp_fraction must be in [0, 1]")
        for key in ("down_tcp", "up_tcp", "down_udp", "up_udp"):
            if key not in self.volume:
                raise ValidationError(f"volume model lacks {key!r}")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "SynthSpec":
        d = dict(d)
        d["sites"] = tuple(Site(**s) for s in d.get("sites", ()))
        if "volume" in d:
            d["volume"] = {k: tuple(v) for k, v in d["volume"].items()}
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["sites"] = [asdict(s) for s in self.sites]
        d["volume"] = {k: list(v) for k, v in self.volume.items()}
        return d


def client_address(index: int) -> str:
    return str(ipaddress.IPv4Address(0x0A000000 + index + 1))


def site_address(index: int) -> str:
    return str(ipaddress.IPv4Address(0xCB007100 + index))  # 203.0.113.0/24


def background_address(index: int) -> str:
    return str(ipaddress.IPv4Address(0xC6336400 + index))  # 198.51.100.0/24


_BACKGROUND = 50


@dataclass
class Trace:
    """Columnar flow table (one entry per flow) plus ground truth."""

    user: np.ndarray
    server: List[str]
    domain: List[str]
    udp: np.ndarray
    bytes_up: np.ndarray
    bytes_down: np.ndarray
    pkts_up: np.ndarray
    pkts_down: np.ndarray
    client_port: np.ndarray
    server_port: np.ndarray
    ts: np.ndarray
    rtt: np.ndarray
    file_index: np.ndarray
    site_users: Dict[str, np.ndarray]


def build_trace(spec: SynthSpec) -> Trace:
    rng = np.random.default_rng(spec.seed)
    users: List[np.ndarray] = []
    servers: List[str] = []
    domains: List[str] = []
    site_users = {}
    for i, site in enumerate(spec.sites):
        k = int(round(site.popularity * spec.n_users))
        chosen = np.sort(rng.choice(spec.n_users, size=k, replace=False))
        site_users[site.domain] = chosen
        reps = rng.geometric(spec.site_flow_p, size=k)
        flows = np.repeat(chosen, reps)
        users.append(flows)
        servers += [site_address(i)] * len(flows)
        domains += [site.domain] * len(flows)
    reps = rng.geometric(spec.background_flow_p, size=spec.n_users)
    flows = np.repeat(np.arange(spec.n_users), reps)
    users.append(flows)
    bg = rng.integers(0, _BACKGROUND, size=len(flows))
    servers += [background_address(int(b)) for b in bg]
    domains += [f"svc{int(b)}.example.net" for b in bg]
    user = np.concatenate(users) if users else np.zeros(0, dtype=int)
    n = len(user)
    udp = rng.random(n) < spec.udp_fraction

    def lognormal(key_tcp, key_udp):
        mu = np.where(udp, spec.volume[key_udp][0], spec.volume[key_tcp][0])
        sigma = np.where(udp, spec.volume[key_udp][1], spec.volume[key_tcp][1])
        return np.floor(np.exp(mu + sigma * rng.standard_normal(n))).astype(np.int64)

    bytes_down = lognormal("down_tcp", "down_udp")
    bytes_up = lognormal("up_tcp", "up_udp")
    return Trace(
        user=user,
        server=servers,
        domain=domains,
        udp=udp,
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        pkts_up=np.maximum(1, bytes_up // 1200),
        pkts_down=np.maximum(1, bytes_down // 1200),
        client_port=rng.integers(1024, 65536, size=n),
        server_port=np.where(udp, 443, rng.choice([80, 443], size=n)),
        ts=spec.start_ms + rng.integers(0, spec.span_ms, size=n),
        rtt=np.round(np.exp(rng.normal(3.0, 0.6, size=n)), 3),
        file_index=rng.integers(0, spec.n_files, size=n),
        site_users=site_users,
    )


def _netflow_rows(trace: Trace, idx: np.ndarray) -> str:
    out = io.StringIO()
    out.write("ts,te,td,sa,da,sp,dp,pr,ipkt,ibyt,opkt,obyt\n")
    for j in idx:
        ts = int(trace.ts[j])
        td = float(trace.rtt[j]) / 10.0
        out.write(
            f"{ts},{ts + int(td * 1000)},{td:.3f},{client_address(int(trace.user[j]))},{trace.server[j]},"
            f"{trace.client_port[j]},{trace.server_port[j]},{'UDP' if trace.udp[j] else 'TCP'},"
            f"{trace.pkts_up[j]},{trace.bytes_up[j]},{trace.pkts_down[j]},{trace.bytes_down[j]}\n"
        )
    return out.getvalue()


_TSTAT_COLUMNS = (
    "c_ip c_port c_pkts_all c_bytes_all s_ip s_port s_pkts_all s_bytes_all first proto rtt_avg c_tls_SNI"
).split()


def _tstat_rows(trace: Trace, idx: np.ndarray) -> str:
    out = io.StringIO()
    out.write("#" + " ".join(f"{c}:{i + 1}" for i, c in enumerate(_TSTAT_COLUMNS)) + "\n")
    for j in idx:
        udp = bool(trace.udp[j])
        out.write(
            f"{client_address(int(trace.user[j]))} {trace.client_port[j]} {trace.pkts_up[j]} {trace.bytes_up[j]} "
            f"{trace.server[j]} {trace.server_port[j]} {trace.pkts_down[j]} {trace.bytes_down[j]} "
            f"{trace.ts[j]} {'UDP' if udp else 'TCP'} {'-' if udp else f'{trace.rtt[j]:.3f}'} {trace.domain[j]}\n"
        )
    return out.getvalue()


def ground_truth(spec: SynthSpec, trace: Trace) -> Dict[str, Any]:
    per_user: Dict[str, Dict[str, int]] = {}
    keys = ("flows", "bytes_up", "bytes_down", "bytes_up_tcp", "bytes_down_tcp", "bytes_up_udp", "bytes_down_udp")
    for u in range(spec.n_users):
        per_user[client_address(u)] = dict.fromkeys(keys, 0)
    for j in range(len(trace.user)):
        rec = per_user[client_address(int(trace.user[j]))]
        proto = "udp" if trace.udp[j] else "tcp"
        up, down = int(trace.bytes_up[j]), int(trace.bytes_down[j])
        rec["flows"] += 1
        rec["bytes_up"] += up
        rec["bytes_down"] += down
        rec[f"bytes_up_{proto}"] += up
        rec[f"bytes_down_{proto}"] += down
    return {
        "warning": SIDECAR_WARNING,
        "spec": spec.to_dict(),
        "n_users": spec.n_users,
        "n_flows": int(len(trace.user)),
        "sites": {
            domain: {"users": int(len(users)), "true_share": len(users) / spec.n_users}
            for domain, users in trace.site_users.items()
        },
        "per_user": per_user,
    }


def sidecar_path(out_dir: str, prefix: str = "trace") -> str:
    # "_" prefix keeps it out of directory-based datasets
    return os.path.join(out_dir, f"_{prefix}.truth.json")


def generate(
    spec: SynthSpec,
    out_dir: str,
    fmt: DatasetFormat = DatasetFormat.NETFLOW_CSV,
    *,
    compress: bool = False,
    sidecar: bool = True,
    prefix: str = "trace",
) -> List[str]:
    """Write the trace as ``spec.n_files`` files (flows ordered by time).

    Returns the written data file paths. Output is a pure function of
    ``spec``, ``fmt`` and ``compress``.
    """
    fmt = DatasetFormat(fmt)
    trace = build_trace(spec)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    ext = ".csv" if fmt is DatasetFormat.NETFLOW_CSV else ".log"
    render = _netflow_rows if fmt is DatasetFormat.NETFLOW_CSV else _tstat_rows
    paths = []
    for f in range(spec.n_files):
        idx = np.flatnonzero(trace.file_index == f)
        idx = idx[np.lexsort((idx, trace.ts[idx]))]
        data = render(trace, idx).encode()
        path = os.path.join(out_dir, f"{prefix}-{f:03d}{ext}" + (".gz" if compress else ""))
        try:
            if compress:
                with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
                    gz.write(data)
            else:
                with open(path, "wb") as fh:
                    fh.write(data)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
        paths.append(path)
    if sidecar:
        side = sidecar_path(out_dir, prefix)
        with open(side, "w") as fh:
            json.dump(ground_truth(spec, trace), fh, sort_keys=True)
    return paths
