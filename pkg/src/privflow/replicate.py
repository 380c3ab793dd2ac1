"""Desk-scale replication runs: share-of-users vs epsilon, and per-user
volume distributions from log-binned histograms."""

from __future__ import annotations

import csv
import io
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .engine import HistogramRelease, LocalBackend, QueryRequest, execute, run_repeated
from .flow_model import DatasetDescriptor, DatasetFormat, Protocol
from .ledger import BudgetLedger
from .mechanisms import ExplicitBins, Rng
from .selection import FilterSpec, PerUserKind, PerUserSpec
from .synth import Site, SynthSpec, generate

EPS_GRID = (0.1, 0.5, 1.0, 5.0, 10.0)
POPULAR = Site("popular.example.org", 0.08)
RARE = Site("rare.example.org", 0.002)

INACTIVE_BYTES = 10_000  # per-user totals up to this are treated as inactive
VOLUME_EPS = 0.25

EPS_FIELDS = ("site", "popularity", "true_share", "epsilon", "median", "p5", "p95")
VOLUME_FIELDS = ("direction", "protocol", "upper_edge", "ecdf")


def share_request(desc: DatasetDescriptor, domain: str, eps: float, operator: str = "simulation") -> QueryRequest:
    """Two-bin histogram: users with a flow to ``domain`` vs everyone else."""
    return QueryRequest(
        dataset=desc,
        filter=FilterSpec.domain(domain),
        per_user=PerUserSpec(PerUserKind.PRESENCE),
        release=HistogramRelease(ExplicitBins([0.5, 1.5]), include_remainder=True),
        epsilon=eps,
        operator_id=operator,
    )


def replicate_eps(
    work_dir: str,
    *,
    n_users: int = 21_000,
    repetitions: int = 100,
    epsilons: Sequence[float] = EPS_GRID,
    sites: Sequence[Site] = (POPULAR, RARE),
    seed: int = 0,
    rng: Optional[Rng] = None,
    backend: Optional[LocalBackend] = None,
) -> List[Dict[str, Any]]:
    """Simulation-mode runs (no budget charged, results not releasable)."""
    spec = SynthSpec(n_users=n_users, sites=tuple(sites), seed=seed)
    paths = generate(spec, work_dir, DatasetFormat.TSTAT_LOG, prefix="eps")
    desc = DatasetDescriptor(DatasetFormat.TSTAT_LOG, tuple(paths))
    rng = rng if rng is not None else np.random.default_rng(seed)
    rows = []
    for site in sites:
        true_share = round(site.popularity * n_users) / n_users
        for eps in epsilons:
            rep = run_repeated(
                share_request(desc, site.domain, eps),
                repetitions,
                rng=rng,
                ledger_mode="simulation",
                simulate=True,
                backend=backend,
            )
            rows.append(
                {
                    "site": site.domain,
                    "popularity": site.popularity,
                    "true_share": true_share,
                    "epsilon": eps,
                    "median": rep.median,
                    "p5": rep.p5,
                    "p95": rep.p95,
                }
            )
    return rows


def volume_bins() -> ExplicitBins:
    """100 bins: one catch-all up to 10 kB, then 99 log-spaced up to 10 GB."""
    return ExplicitBins([0.0] + list(np.geomspace(INACTIVE_BYTES, 1e10, 100)))


def volume_requests(desc: DatasetDescriptor, operator: str, eps: float = VOLUME_EPS) -> List[QueryRequest]:
    requests = []
    for direction, kind in (("down", PerUserKind.VOLUME_DOWN), ("up", PerUserKind.VOLUME_UP)):
        for proto in (Protocol.TCP, Protocol.UDP):
            requests.append(
                QueryRequest(
                    dataset=desc,
                    filter=FilterSpec.all(protocols={proto}),
                    per_user=PerUserSpec(kind),
                    release=HistogramRelease(volume_bins()),
                    epsilon=eps,
                    operator_id=operator,
                )
            )
    return requests


def ecdf_from_histogram(edges: Sequence[float], counts: Sequence[float]) -> List[tuple]:
    """(upper edge, cumulative share) per bin, skipping the inactive bin."""
    pairs = [(hi, c) for lo, hi, c in zip(edges[:-1], edges[1:], counts) if lo >= INACTIVE_BYTES]
    total = sum(c for _, c in pairs)
    out, acc = [], 0.0
    for hi, c in pairs:
        acc += c
        out.append((hi, acc / total if total > 0 else 0.0))
    return out


def replicate_volume(
    desc: DatasetDescriptor,
    ledger: BudgetLedger,
    operator: str,
    *,
    rng: Optional[Rng] = None,
    backend: Optional[LocalBackend] = None,
) -> List[Dict[str, Any]]:
    """Four charged histogram queries (direction x protocol)."""
    rows = []
    for request in volume_requests(desc, operator):
        result = execute(request, ledger, rng=rng, backend=backend)
        hist = result.payload
        direction = "down" if request.per_user.kind is PerUserKind.VOLUME_DOWN else "up"
        (proto,) = request.filter.protocols
        for edge, share in ecdf_from_histogram(hist.edges, hist.counts):
            rows.append({"direction": direction, "protocol": proto.value, "upper_edge": edge, "ecdf": share})
    return rows


def ecdf_median(rows: Iterable[Dict[str, Any]], direction: str, protocol: str) -> Optional[float]:
    for row in rows:
        if row["direction"] == direction and row["protocol"] == protocol and row["ecdf"] >= 0.5:
            return row["upper_edge"]
    return None


def to_csv(rows: Sequence[Dict[str, Any]], fields: Sequence[str]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return out.getvalue()
