"""Trace-level invariant checks used by the test and acceptance suites."""

from __future__ import annotations

from collections import Counter

from .simcore import SimReport, TraceRecord

# Host-blocked reasons a stream-triggered run may legitimately spend time in.
ST_ALLOWED_REASONS = frozenset({"final_sync", "throttle", "app_sync"})


def epoch_safety_violations(trace: list[TraceRecord]) -> list[str]:
    """Payload writes that land outside their target's matching exposure epoch.

    Every write tagged (win, serial) from origin O to target T must come after
    T's ``exposure_open`` for (win, O, serial) and before the matching
    ``exposure_close``.
    """
    opened: set = set()
    closed: set = set()
    bad = []
    for rec in trace:
        if rec.action == "exposure_open":
            f = rec.fields()
            opened.add((f["win"], f["rank"], f["origin"], f["serial"]))
        elif rec.action == "exposure_close":
            f = rec.fields()
            closed.add((f["win"], f["rank"], f["origin"], f["serial"]))
        elif rec.action == "payload_write":
            f = rec.fields()
            if "win" not in f:
                continue
            key = (f["win"], f["dst"], f["src"], f["serial"])
            if key not in opened:
                bad.append(f"{rec.line()}: target exposure not open yet")
            elif key in closed:
                bad.append(f"{rec.line()}: target exposure already closed")
    return bad


def blocked_outside(report: SimReport, allowed=ST_ALLOWED_REASONS) -> int:
    """Host-blocked ns spent under reasons other than ``allowed`` (harness waits ignored)."""
    return sum(b.duration for b in report.blocked_intervals
               if b.reason not in allowed and b.reason != "barrier")


def fire_counts(trace: list[TraceRecord]) -> tuple[Counter, Counter]:
    """(enqueues, fires) per triggered-op id."""
    enq, fired = Counter(), Counter()
    for rec in trace:
        if rec.action == "tops_enqueue":
            enq[rec.entity] += 1
        elif rec.action == "tops_fire":
            fired[rec.entity] += 1
    return enq, fired


def fired_exactly_once(trace: list[TraceRecord]) -> bool:
    enq, fired = fire_counts(trace)
    return enq == fired and all(v == 1 for v in fired.values())
