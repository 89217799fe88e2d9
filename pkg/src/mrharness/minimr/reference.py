"""Single-process reference executor: map everything, group, reduce.

This is the oracle the distributed engine is checked against, so it shares
nothing with the scheduler, shuffle or partitioner.
"""

from __future__ import annotations

from typing import Any

from mrharness.jobs import expr as ex
from mrharness.minimr.jobspec import JobSpec, finalize, job_result
from mrharness.minimr.kv import canonical


def reference_pairs(spec: JobSpec) -> list[tuple[Any, Any]]:
    """Finalized output pairs, or raise ExprFault."""
    intermediate: list[tuple[Any, Any]] = []
    for split in spec.splits:
        for record in split:
            _, emitted = ex.evaluate(spec.map_body, record)
            intermediate.extend(emitted)

    groups: dict[str, tuple[Any, list[Any]]] = {}
    for key, value in intermediate:
        groups.setdefault(canonical(key), (key, []))[1].append(value)

    reduced: list[tuple[Any, Any]] = []
    for ck in sorted(groups, key=lambda k: k.encode("utf-8")):
        key, values = groups[ck]
        _, emitted = ex.evaluate(spec.reduce_body, {"key": key, "values": values})
        reduced.extend(emitted)
    return finalize(spec, reduced)


def run_reference(spec: JobSpec) -> Any:
    """The job result as a client would see it; None (NULL) on a body fault."""
    try:
        return job_result(spec, reference_pairs(spec))
    except ex.ExprFault:
        return None
