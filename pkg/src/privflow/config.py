"""TOML configuration.

Example::

    ledger = "budget.jsonl"          # append-only budget log
    rib = "rib.txt"                  # optional, "prefix ASN" lines

    [operators]                      # allocated epsilon per operator
    alice = 10.0

    [datasets.campus]
    format = "tstat"                 # or "netflow"
    paths = ["logs/"]
    anonymize = false                # hash client ids on ingest
    [datasets.campus.columns]        # optional column-mapping override
    client_id = "c_ip"
    server_ip = "s_ip"
    l4_protocol = ["proto", "=TCP"]
    bytes_up = "c_bytes_all"
    bytes_down = "s_bytes_all"

    [templates.mean-volume]          # defaults for `query --template`
    per_user = "volume-total"
    release = "mean"
    bounds = [0, 1e8]

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, ValidationError
from .flow_model import DatasetDescriptor, DatasetFormat
from .ledger import BudgetLedger
from .rib import RoutingInformationBase, load_rib_file

CONFIG_ENV = "PRIVFLOW_CONFIG"


@dataclass
class Config:
    path: str
    ledger_path: str
    operators: Dict[str, float]
    datasets: Dict[str, DatasetDescriptor] = field(default_factory=dict)
    rib_path: Optional[str] = None
    templates: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    workers: Optional[int] = None
    backend: str = "process"

    def ledger(self) -> BudgetLedger:
        return BudgetLedger(self.ledger_path, self.operators)

    def rib(self) -> Optional[RoutingInformationBase]:
        return load_rib_file(self.rib_path) if self.rib_path else None

    def dataset(self, name: Optional[str] = None) -> DatasetDescriptor:
        if name is None:
            if len(self.datasets) != 1:
                raise ConfigError(f"choose a dataset with --dataset ({sorted(self.datasets)})")
            return next(iter(self.datasets.values()))
        try:
            return self.datasets[name]
        except KeyError:
            raise ConfigError(f"unknown dataset {name!r}") from None


def _resolve(base: str, path: str) -> str:
    path = os.path.expanduser(path)
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def parse_config(data: Dict[str, Any], base_dir: str, path: str = "<config>") -> Config:
    try:
        ledger_path = _resolve(base_dir, data["ledger"])
    except KeyError:
        raise ConfigError("config lacks 'ledger'") from None
    if not os.path.isdir(os.path.dirname(ledger_path) or "."):
        raise ConfigError(f"ledger directory does not exist: {ledger_path}")
    operators = {}
    for op, amount in data.get("operators", {}).items():
        if not isinstance(amount, (int, float)) or not amount > 0:
            raise ConfigError(f"allocation for {op!r} must be a positive number")
        operators[op] = float(amount)
    datasets = {}
    for name, d in data.get("datasets", {}).items():
        try:
            fmt = DatasetFormat(d.get("format", "netflow"))
        except ValueError:
            raise ConfigError(f"dataset {name!r}: unknown format {d.get('format')!r}") from None
        paths = d.get("paths")
        if isinstance(paths, str):
            paths = [paths]
        if not paths:
            raise ConfigError(f"dataset {name!r} needs paths")
        paths = [_resolve(base_dir, p) for p in paths]
        for p in paths:
            if not os.path.exists(p):
                raise ConfigError(f"dataset {name!r}: path does not exist: {p}")
        try:
            datasets[name] = DatasetDescriptor(
                fmt,
                tuple(paths),
                d.get("columns"),
                anonymize=d.get("anonymize"),
                salt=str(d.get("salt", "")),
                max_skip_ratio=float(d.get("max_skip_ratio", 0.5)),
            )
        except ValidationError as exc:
            raise ConfigError(f"dataset {name!r}: {exc}") from exc
    rib_path = data.get("rib")
    if rib_path:
        rib_path = _resolve(base_dir, rib_path)
        if not os.path.exists(rib_path):
            raise ConfigError(f"RIB file does not exist: {rib_path}")
    engine = data.get("engine", {})
    return Config(
        path=path,
        ledger_path=ledger_path,
        operators=operators,
        datasets=datasets,
        rib_path=rib_path or None,
        templates=dict(data.get("templates", {})),
        workers=engine.get("workers"),
        backend=engine.get("backend", "process"),
    )


def load_config(path: Optional[str] = None) -> Config:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        raise ConfigError(f"no config given (use --config or ${CONFIG_ENV})")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, os.path.dirname(os.path.abspath(path)), path)
