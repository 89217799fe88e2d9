from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Mapping

from mrharness.jobs import expr as ex
from mrharness.minimr.kv import canonical, output_key


@dataclass(frozen=True)
class JobSpec:
    """A job as the engine sees it: bodies, reducer count and input splits.

    Each split is a tuple of records; a record is the variable environment the
    map body is evaluated in. `finalize_body`, when present, runs once at the
    master over the reduced output with each output key bound as a variable.
    `result_key` projects a single value out of the final output.
    """

    name: str
    map_body: ex.Expr
    reduce_body: ex.Expr
    num_reducers: int
    splits: tuple[tuple[Mapping[str, Any], ...], ...]
    finalize_body: ex.Expr | None = None
    result_key: str | None = None

    def __post_init__(self) -> None:
        if self.num_reducers < 1:
            raise ValueError("num_reducers must be >= 1")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "map": ex.to_json(self.map_body),
            "reduce": ex.to_json(self.reduce_body),
            "finalize": None if self.finalize_body is None else ex.to_json(self.finalize_body),
            "reducers": self.num_reducers,
            "splits": [[dict(r) for r in split] for split in self.splits],
            "result_key": self.result_key,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "JobSpec":
        return cls(
            name=obj["name"],
            map_body=ex.from_json(obj["map"]),
            reduce_body=ex.from_json(obj["reduce"]),
            finalize_body=None if obj.get("finalize") is None else ex.from_json(obj["finalize"]),
            num_reducers=int(obj["reducers"]),
            splits=tuple(tuple(split) for split in obj["splits"]),
            result_key=obj.get("result_key"),
        )


def finalize(spec: JobSpec, pairs: list[tuple[Any, Any]]) -> list[tuple[Any, Any]]:
    """Apply the finalize body (if any) to reduced pairs. Raises ExprFault."""
    seen: set[str] = set()
    for k, _ in pairs:
        ck = canonical(k)
        if ck in seen:
            raise ex.ExprFault(f"duplicate output key {ck}")
        seen.add(ck)
    if spec.finalize_body is None:
        return list(pairs)
    env = {output_key(k): v for k, v in pairs}
    _, emitted = ex.evaluate(spec.finalize_body, env)
    return finalize(replace(spec, finalize_body=None), emitted)


def job_result(spec: JobSpec, pairs: list[tuple[Any, Any]]) -> Any:
    """The value a client sees for finalized pairs. Raises ExprFault."""
    out = {output_key(k): v for k, v in pairs}
    if spec.result_key is None:
        return out
    if spec.result_key not in out:
        raise ex.ExprFault(f"job produced no {spec.result_key!r} key")
    return out[spec.result_key]
