"""Per-operator privacy-budget ledger.

The ledger file is an append-only log of JSON lines::

    {"ts": 1715000000.0, "operator": "alice", "eps": 0.25, "query_hash": "...", "released": false}

A charge is written (and fsynced) before any data is touched. A successful
release appends a second line with ``eps == 0`` and ``released == true``, so
spent budget is simply the sum of ``eps`` over the file.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping

from filelock import FileLock

from .errors import CorruptLedger, InsufficientBudget, UnknownOperator, ValidationError
from .mechanisms import check_epsilon

logger = logging.getLogger(__name__)


def _exact(x: float) -> Fraction:
    # budget arithmetic on the shortest decimal form, so that 0.1 + 0.2 == 0.3
    return Fraction(repr(float(x)))


@dataclass(frozen=True)
class ChargeRecord:
    ts: float
    operator: str
    eps: float
    query_hash: str
    released: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ChargeRecord":
        d = json.loads(line)
        if not isinstance(d, dict):
            raise ValueError("ledger line is not an object")
        eps = float(d["eps"])
        if not (math.isfinite(eps) and eps >= 0):
            raise ValueError(f"bad eps {eps}")
        return cls(float(d["ts"]), str(d["operator"]), eps, str(d["query_hash"]), bool(d["released"]))


@dataclass
class OperatorAccount:
    operator_id: str
    allocated: float
    spent: float = 0.0

    @property
    def remaining(self) -> float:
        return max(float(_exact(self.allocated) - _exact(self.spent)), 0.0)

    def to_dict(self) -> Dict[str, float]:
        return {"operator": self.operator_id, "allocated": self.allocated, "spent": self.spent, "remaining": self.remaining}


@dataclass
class LedgerState:
    records: List[ChargeRecord] = field(default_factory=list)
    # byte offset just past the last complete line
    valid_size: int = 0
    truncated: bool = False

    def spent_exact(self, operator: str) -> Fraction:
        return sum((_exact(r.eps) for r in self.records if r.operator == operator), Fraction(0))

    def spent(self, operator: str) -> float:
        return float(self.spent_exact(operator))

    def last_ts(self, operator: str) -> float:
        return max((r.ts for r in self.records if r.operator == operator), default=0.0)


@dataclass(frozen=True)
class ChargeToken:
    """Proof that budget was charged; required to release a result."""

    token_id: str
    operator: str
    eps: float
    query_hash: str


def load_ledger(path: str) -> LedgerState:
    """Fold the log. A malformed *final* line without a trailing newline is a
    torn write and is ignored with a warning; any other malformed line is
    corruption."""
    state = LedgerState()
    if not os.path.exists(path):
        return state
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0
    lines = data.split(b"\n")
    for i, raw in enumerate(lines):
        is_last = i == len(lines) - 1
        if is_last and raw == b"":
            break
        try:
            if not raw.strip():
                raise ValueError("blank line")
            record = ChargeRecord.from_json(raw.decode("utf-8"))
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            if is_last:
                logger.warning("ledger %s: ignoring truncated final line (%d bytes)", path, len(raw))
                state.truncated = True
                break
            raise CorruptLedger(f"{path}: line {i + 1} is malformed: {exc}") from exc
        state.records.append(record)
        offset += len(raw) + 1
        state.valid_size = offset
    state.valid_size = min(state.valid_size, len(data))
    return state


def append_record(path: str, record: ChargeRecord) -> None:
    with open(path, "ab") as fh:
        if fh.tell() > 0:
            with open(path, "rb") as rd:
                rd.seek(-1, os.SEEK_END)
                if rd.read(1) != b"\n":
                    fh.write(b"\n")
        fh.write(record.to_json().encode() + b"\n")
        fh.flush()
        os.fsync(fh.fileno())


class BudgetLedger:
    """Allocations come from configuration; spending from the log file.

    ``charge`` holds an exclusive lock (thread and file level) while it
    re-reads the log, checks the allocation and appends.
    """

    def __init__(self, path: str, allocations: Mapping[str, float]):
        self.path = os.fspath(path)
        self.allocations = {}
        for op, amount in allocations.items():
            amount = float(amount)
            if not (amount > 0 and math.isfinite(amount)):
                raise ValidationError(f"allocation for {op!r} must be positive, got {amount}")
            self.allocations[op] = amount
        self._thread_lock = threading.Lock()
        self._file_lock = FileLock(self.path + ".lock")
        self._issued: Dict[str, ChargeToken] = {}
        # fail early on corruption
        load_ledger(self.path)

    def _allocation(self, operator: str) -> float:
        try:
            return self.allocations[operator]
        except KeyError:
            raise UnknownOperator(f"unknown operator {operator!r}") from None

    def account(self, operator: str) -> OperatorAccount:
        allocated = self._allocation(operator)
        return OperatorAccount(operator, allocated, load_ledger(self.path).spent(operator))

    def status(self, operator: str) -> Dict[str, float]:
        return self.account(operator).to_dict()

    def _repair(self, state: LedgerState) -> None:
        if state.truncated:
            logger.warning("ledger %s: dropping torn tail before append", self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(state.valid_size)
                fh.flush()
                os.fsync(fh.fileno())

    def charge(self, operator: str, eps: float, query_hash: str = "") -> ChargeToken:
        eps = check_epsilon(eps)
        allocated = self._allocation(operator)
        with self._thread_lock, self._file_lock:
            state = load_ledger(self.path)
            spent = state.spent_exact(operator)
            if spent + _exact(eps) > _exact(allocated):
                raise InsufficientBudget(operator, eps, float(spent), allocated)
            self._repair(state)
            ts = max(time.time(), state.last_ts(operator))
            append_record(self.path, ChargeRecord(ts, operator, eps, query_hash, False))
        token = ChargeToken(uuid.uuid4().hex, operator, eps, query_hash)
        self._issued[token.token_id] = token
        return token

    def redeem(self, token: ChargeToken) -> None:
        """Validate a token once and log the release."""
        with self._thread_lock:
            known = self._issued.pop(token.token_id, None)
        if known is None or known != token:
            raise ValidationError("charge token unknown or already redeemed")
        with self._thread_lock, self._file_lock:
            state = load_ledger(self.path)
            self._repair(state)
            ts = max(time.time(), state.last_ts(token.operator))
            append_record(self.path, ChargeRecord(ts, token.operator, 0.0, token.query_hash, True))

    def check_operator(self, operator: str) -> None:
        self._allocation(operator)


def replay(path: str) -> Dict[str, float]:
    """Spent budget per operator, recomputed from the log."""
    state = load_ledger(path)
    return {op: state.spent(op) for op in dict.fromkeys(r.operator for r in state.records)}
