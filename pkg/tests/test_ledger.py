import json
import logging
import multiprocessing as mp
import random
import threading

import pytest

from privflow.errors import CorruptLedger, InsufficientBudget, InvalidEpsilon, UnknownOperator, ValidationError
from privflow.ledger import BudgetLedger, ChargeRecord, append_record, load_ledger, replay


def lines(path):
    return [json.loads(x) for x in open(path).read().splitlines()]


def test_fresh_ledger(tmp_path):
    led = BudgetLedger(tmp_path / "l.jsonl", {"x": 2.5})
    assert led.status("x") == {"operator": "x", "allocated": 2.5, "spent": 0.0, "remaining": 2.5}


def test_four_quarters_then_refusal(tmp_path):
    led = BudgetLedger(tmp_path / "l.jsonl", {"x": 1.0})
    for _ in range(4):
        led.charge("x", 0.25)
    acct = led.account("x")
    assert acct.spent == 1.0 and acct.remaining == 0.0
    for eps in (0.25, 1e-12, 5e-324):
        with pytest.raises(InsufficientBudget):
            led.charge("x", eps)
    assert led.account("x").spent == 1.0


def test_boundary_charges(tmp_path):
    led = BudgetLedger(tmp_path / "l.jsonl", {"five": 5, "one": 1})
    led.charge("five", 5)
    assert led.account("five").spent == 5.0
    with pytest.raises(InsufficientBudget) as err:
        led.charge("one", 1.0000001)
    assert err.value.exit_code == 3
    assert led.account("one").spent == 0.0


def test_decimal_allocations_are_not_eroded_by_binary_rounding(tmp_path):
    led = BudgetLedger(tmp_path / "l.jsonl", {"x": 0.3})
    for _ in range(3):
        led.charge("x", 0.1)
    with pytest.raises(InsufficientBudget):
        led.charge("x", 0.1)


def test_validation_before_charge(tmp_path):
    led = BudgetLedger(tmp_path / "l.jsonl", {"x": 1})
    with pytest.raises(InvalidEpsilon):
        led.charge("x", 0)
    with pytest.raises(UnknownOperator):
        led.charge("nobody", 0.1)
    with pytest.raises(ValidationError):
        BudgetLedger(tmp_path / "m.jsonl", {"x": 0})
    assert not (tmp_path / "l.jsonl").exists()


def test_record_format_and_release_marker(tmp_path):
    path = tmp_path / "l.jsonl"
    led = BudgetLedger(path, {"x": 1})
    token = led.charge("x", 0.5, "abc")
    (rec,) = lines(path)
    assert set(rec) == {"ts", "operator", "eps", "query_hash", "released"}
    assert (rec["operator"], rec["eps"], rec["query_hash"], rec["released"]) == ("x", 0.5, "abc", False)
    led.redeem(token)
    assert lines(path)[1]["released"] is True and lines(path)[1]["eps"] == 0.0
    with pytest.raises(ValidationError):
        led.redeem(token)
    assert led.account("x").spent == 0.5


def test_timestamps_monotone(tmp_path):
    path = tmp_path / "l.jsonl"
    append_record(path, ChargeRecord(4e12, "x", 0.1, "h"))  # a clock far ahead
    led = BudgetLedger(path, {"x": 1})
    led.charge("x", 0.1)
    ts = [r["ts"] for r in lines(path)]
    assert ts == sorted(ts)


def test_fold(tmp_path):
    path = tmp_path / "l.jsonl"
    assert load_ledger(path).spent("X") == 0.0
    for _ in range(3):
        append_record(path, ChargeRecord(1.0, "X", 0.5, "h"))
    assert load_ledger(path).spent("X") == 1.5 and replay(path) == {"X": 1.5}


def test_truncated_final_line_is_ignored(tmp_path, caplog):
    path = tmp_path / "l.jsonl"
    led = BudgetLedger(path, {"x": 1})
    led.charge("x", 0.25)
    led.charge("x", 0.5)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 20])  # tear the last record mid-line
    with caplog.at_level(logging.WARNING):
        state = load_ledger(path)
    assert state.truncated and state.spent("x") == 0.25
    assert "truncated" in caplog.text
    led.charge("x", 0.125)
    assert [r["eps"] for r in lines(path)] == [0.25, 0.125]


def test_corrupt_middle_line(tmp_path):
    path = tmp_path / "l.jsonl"
    append_record(path, ChargeRecord(1.0, "x", 0.1, "h"))
    with open(path, "a") as fh:
        fh.write("garbage\n")
    append_record(path, ChargeRecord(2.0, "x", 0.1, "h"))
    with pytest.raises(CorruptLedger):
        load_ledger(path)
    with pytest.raises(CorruptLedger):
        BudgetLedger(path, {"x": 1})


def test_replay_reproduces_spent(tmp_path):
    path = tmp_path / "l.jsonl"
    led = BudgetLedger(path, {"a": 10, "b": 10})
    rnd = random.Random(3)
    charged = {"a": [], "b": []}
    for _ in range(60):
        op, eps = rnd.choice("ab"), rnd.choice([0.01, 0.1, 0.07, 0.333])
        try:
            token = led.charge(op, eps)
        except InsufficientBudget:
            continue
        charged[op].append(eps)
        if rnd.random() < 0.5:
            led.redeem(token)
    again = replay(path)
    for op in "ab":
        assert again[op] == led.account(op).spent == load_ledger(path).spent(op)
        assert again[op] == pytest.approx(sum(charged[op]), rel=1e-12)


def _hammer(path, allocation, seed, out):
    led = BudgetLedger(path, {"x": allocation})
    rnd = random.Random(seed)
    ok = []
    for _ in range(40):
        eps = rnd.choice([0.01, 0.02, 0.05])
        try:
            led.charge("x", eps)
            ok.append(eps)
        except InsufficientBudget:
            pass
    out.extend(ok) if isinstance(out, list) else out.put(ok)


def test_concurrent_threads_never_overspend(tmp_path):
    path = str(tmp_path / "l.jsonl")
    results = [[] for _ in range(8)]
    threads = [threading.Thread(target=_hammer, args=(path, 1.0, i, results[i])) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    successful = [e for r in results for e in r]
    spent = load_ledger(path).spent("x")
    assert spent <= 1.0
    assert spent == pytest.approx(sum(successful), abs=1e-12)
    assert len(successful) == len(lines(path))


def test_concurrent_processes_never_overspend(tmp_path):
    path = str(tmp_path / "l.jsonl")
    queue = mp.Queue()
    procs = [mp.Process(target=_hammer, args=(path, 1.0, 100 + i, queue)) for i in range(4)]
    for p in procs:
        p.start()
    successful = [e for _ in procs for e in queue.get(timeout=60)]
    for p in procs:
        p.join()
    spent = load_ledger(path).spent("x")
    assert spent <= 1.0
    assert spent == pytest.approx(sum(successful), abs=1e-12)
