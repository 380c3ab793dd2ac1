"""Command-line interface.

Machine-readable output only: JSON on stdout for ``query``, ``budget``,
``generate-synth`` and ``inspect-schema``; CSV for ``replicate``. Errors are
printed as JSON and mapped to exit codes 2 (validation), 3 (budget) and
4 (I/O and data).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .config import Config, load_config
from .engine import LocalBackend, QueryRequest, execute, release_from_dict, run_repeated
from .errors import PrivflowError, ValidationError
from .flow_model import DatasetDescriptor, DatasetFormat, inspect_schema
from .mechanisms import test_mode
from .selection import FilterKind, FilterSpec, PerUserSpec
from .synth import Site, SynthSpec, generate, sidecar_path

logger = logging.getLogger("privflow")


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=str) + "\n")


# -- request building -------------------------------------------------------


def parse_filter(value: Any, protocols: Optional[List[str]] = None) -> FilterSpec:
    """``all``, ``ip=A,B``, ``domain=X,*.Y``, ``asn=1,2`` or a JSON object."""
    protos = frozenset(p.upper() for p in protocols) if protocols else None
    if isinstance(value, dict):
        return FilterSpec(FilterKind(value.get("kind", "all")), frozenset(value.get("values", ())), protos)
    text = (value or "all").strip()
    if text == "all":
        return FilterSpec.all(protocols=protos)
    key, sep, rest = text.partition("=")
    kinds = {"ip": FilterKind.SERVER_IP, "server_ip": FilterKind.SERVER_IP, "domain": FilterKind.DOMAIN, "asn": FilterKind.ASN}
    if not sep or key not in kinds:
        raise ValidationError(f"bad filter {text!r}; expected all, ip=..., domain=... or asn=...")
    return FilterSpec(kinds[key], frozenset(v for v in rest.split(",") if v), protos)


def request_from_dict(d: Dict[str, Any], config: Config) -> QueryRequest:
    if "epsilon" not in d:
        raise ValidationError("epsilon is required (--eps)")
    if "per_user" not in d:
        raise ValidationError("per-user aggregate is required (--per-user)")
    if "release" not in d:
        raise ValidationError("release is required (--release)")
    ds = d.get("dataset")
    desc = ds if isinstance(ds, DatasetDescriptor) else config.dataset(ds)
    per_user = d["per_user"]
    per_user = PerUserSpec.parse(per_user) if isinstance(per_user, str) else PerUserSpec(**per_user)
    return QueryRequest(
        dataset=desc,
        filter=parse_filter(d.get("filter"), d.get("protocols")),
        per_user=per_user,
        release=release_from_dict(d["release"]),
        epsilon=d["epsilon"],
        operator_id=d.get("operator") or "",
        include_inactive=bool(d.get("include_inactive", False)),
    )


def _bounds(text: str) -> List[float]:
    try:
        lo, hi = text.split(":")
        return [float(lo), float(hi)]
    except ValueError:
        raise ValidationError(f"bounds must look like LO:HI, got {text!r}") from None


def _request_dict(args, config: Config) -> Dict[str, Any]:
    d: Dict[str, Any] = {}
    if args.template:
        if args.template not in config.templates:
            raise ValidationError(f"unknown template {args.template!r}")
        tpl = dict(config.templates[args.template])
        release = {k: tpl.pop(k) for k in ("bounds", "qs", "bins", "include_remainder") if k in tpl}
        if "release" in tpl:
            kind = tpl.pop("release")
            release["kind"] = kind if isinstance(kind, str) else kind.get("kind")
        d.update(tpl)
        d["release"] = release
    if args.request:
        try:
            with open(args.request) as fh:
                d.update(json.load(fh))
        except OSError as exc:
            raise ValidationError(f"cannot read request file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"request file is not JSON: {exc}") from exc
    for key, attr in (("dataset", "dataset"), ("operator", "operator"), ("filter", "filter"), ("per_user", "per_user")):
        if getattr(args, attr) is not None:
            d[key] = getattr(args, attr)
    if args.protocol:
        d["protocols"] = args.protocol.split(",")
    if args.eps is not None:
        d["epsilon"] = args.eps
    if args.include_inactive:
        d["include_inactive"] = True
    release = dict(d.get("release") or {})
    if args.release:
        release["kind"] = args.release
    if args.bounds:
        release["bounds"] = _bounds(args.bounds)
    if args.q:
        release["qs"] = [float(q) for q in args.q.split(",")]
    if args.bins:
        release["bins"] = args.bins
    if args.include_remainder:
        release["include_remainder"] = True
    if release.get("kind") == "histogram" and "bins" not in release:
        release["bins"] = "auto"
    if release:
        d["release"] = release
    return d


def _check_seed(args) -> Optional[int]:
    if args.seed is None:
        return None
    if not (getattr(args, "simulate", False) or test_mode()):
        raise ValidationError("--seed is only accepted with --simulate or in test mode")
    return args.seed


def _backend(args, config: Optional[Config]) -> LocalBackend:
    workers = args.workers or (config.workers if config else None)
    kind = args.backend or (config.backend if config else "process")
    return LocalBackend(workers, kind)


# -- commands ---------------------------------------------------------------


def cmd_query(args) -> int:
    config = load_config(args.config)
    seed = _check_seed(args)
    request = request_from_dict(_request_dict(args, config), config)
    ledger = config.ledger()
    rib = config.rib()
    backend = _backend(args, config)
    if args.repeat:
        mode = "simulation" if args.simulate else "charge_each"
        rep = run_repeated(
            request, args.repeat, ledger, rib, ledger_mode=mode, simulate=args.simulate, backend=backend, seed=seed
        )
        _emit(rep.to_dict())
        return 0
    if args.simulate:
        raise ValidationError("--simulate only applies together with --repeat")
    result = execute(request, ledger, rib, backend=backend, seed=seed)
    _emit(result.to_dict())
    return 0


def cmd_budget(args) -> int:
    config = load_config(args.config)
    _emit(config.ledger().status(args.operator))
    return 0


def _synth_spec(args) -> SynthSpec:
    if args.spec:
        try:
            with open(args.spec) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read synth spec: {exc}") from exc
        return SynthSpec.from_dict(d)
    sites = []
    for item in args.site or ():
        domain, _, pop = item.rpartition(":")
        try:
            sites.append(Site(domain, float(pop)))
        except ValueError:
            raise ValidationError(f"--site must be DOMAIN:POPULARITY, got {item!r}") from None
    return SynthSpec(n_users=args.users, sites=tuple(sites), n_files=args.files, seed=args.seed or 0)


def cmd_generate_synth(args) -> int:
    spec = _synth_spec(args)
    paths = generate(spec, args.out, DatasetFormat(args.format), compress=args.gzip, prefix=args.prefix)
    _emit(
        {
            "files": paths,
            "sidecar": sidecar_path(args.out, args.prefix),
            "n_users": spec.n_users,
            "warning": "the sidecar holds ground truth; test use only",
        }
    )
    return 0


def _write_csv(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_replicate(args) -> int:
    from . import plotting, replicate

    if args.figure == "eps":
        if not args.simulate:
            raise ValidationError("the eps replication runs in simulation mode; pass --simulate")
        seed = _check_seed(args)
        with tempfile.TemporaryDirectory() as tmp:
            rows = replicate.replicate_eps(
                args.work_dir or tmp,
                n_users=args.users,
                repetitions=args.repetitions,
                seed=seed if seed is not None else int(np.random.SeedSequence().entropy % 2**32),
                backend=_backend(args, None),
            )
        _write_csv(replicate.to_csv(rows, replicate.EPS_FIELDS), args.out)
        if args.plot:
            plotting.plot_eps(rows, args.plot)
        return 0
    config = load_config(args.config)
    if not args.operator:
        raise ValidationError("the volume replication charges an operator; pass --operator")
    seed = _check_seed(args)
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as tmp:
        if args.dataset:
            desc = config.dataset(args.dataset)
        else:
            work = args.work_dir or tmp
            spec = SynthSpec(n_users=args.users, seed=args.synth_seed)
            paths = generate(spec, work, DatasetFormat.TSTAT_LOG, prefix="volume", sidecar=False)
            desc = DatasetDescriptor(DatasetFormat.TSTAT_LOG, tuple(paths))
        rows = replicate.replicate_volume(desc, config.ledger(), args.operator, rng=rng, backend=_backend(args, config))
    _write_csv(replicate.to_csv(rows, replicate.VOLUME_FIELDS), args.out)
    if args.plot:
        plotting.plot_volume(rows, args.plot)
    return 0


def cmd_inspect_schema(args) -> int:
    config = load_config(args.config)
    _emit(inspect_schema(config.dataset(args.dataset)))
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privflow", description="Differentially-private flow-record queries")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="config file (default: $PRIVFLOW_CONFIG)")
        p.add_argument("--workers", type=int)
        p.add_argument("--backend", choices=("thread", "process"))

    q = sub.add_parser("query", help="run one privacy-metered query")
    common(q)
    q.add_argument("--request", help="JSON request file")
    q.add_argument("--template", help="named query template from the config")
    q.add_argument("--dataset")
    q.add_argument("--operator")
    q.add_argument("--filter", help="all | ip=A,B | domain=X,*.Y | asn=N,M|UNKNOWN")
    q.add_argument("--protocol", help="restrict to tcp and/or udp, e.g. tcp or tcp,udp")
    q.add_argument("--per-user", dest="per_user", help="flows | volume-down | volume-up | volume-total | presence | feature:NAME:avg|min|max")
    q.add_argument("--release", choices=("mean", "std", "percentiles", "histogram"))
    q.add_argument("--bounds", help="public clipping bounds LO:HI")
    q.add_argument("--q", help="comma-separated quantiles in [0,1]")
    q.add_argument("--bins", help="uniform:LO:HI:N | log:LO:HI:N | edges:E0,E1,... | auto[:N]")
    q.add_argument("--include-remainder", action="store_true", help="add the not-matching users bin (presence only)")
    q.add_argument("--include-inactive", action="store_true", help="count users without matching flows as zero")
    q.add_argument("--eps", type=float)
    q.add_argument("--repeat", type=int, help="run the query N times and summarize")
    q.add_argument("--simulate", action="store_true", help="with --repeat: no charge, results not releasable")
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_query)

    b = sub.add_parser("budget", help="show an operator's budget")
    b.add_argument("--config")
    b.add_argument("--operator", required=True)
    b.set_defaults(func=cmd_budget)

    g = sub.add_parser("generate-synth", help="write a seeded synthetic trace")
    g.add_argument("--spec", help="JSON synth spec (overrides the flags below)")
    g.add_argument("--users", type=int, default=1000)
    g.add_argument("--site", action="append", help="DOMAIN:POPULARITY, repeatable")
    g.add_argument("--files", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=[f.value for f in DatasetFormat], default="netflow")
    g.add_argument("--gzip", action="store_true")
    g.add_argument("--prefix", default="trace")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_synth)

    r = sub.add_parser("replicate", help="emit plot-ready CSV (and optionally a figure)")
    common(r)
    r.add_argument("figure", choices=("eps", "volume"))
    r.add_argument("--out", help="CSV path (default stdout)")
    r.add_argument("--plot", help="also render a figure to this path (png/pdf/svg)")
    r.add_argument("--users", type=int, default=21_000)
    r.add_argument("--repetitions", type=int, default=100)
    r.add_argument("--simulate", action="store_true")
    r.add_argument("--seed", type=int)
    r.add_argument("--synth-seed", type=int, default=0)
    r.add_argument("--operator")
    r.add_argument("--dataset")
    r.add_argument("--work-dir")
    r.set_defaults(func=cmd_replicate)

    s = sub.add_parser("inspect-schema", help="describe a dataset's columns and features")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.set_defaults(func=cmd_inspect_schema)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except PrivflowError as exc:
        _emit({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code})
        return exc.exit_code
    except OSError as exc:
        _emit({"error": "IoError", "message": str(exc), "exit_code": 4})
        return 4


if __name__ == "__main__":
    sys.exit(main())
