"""Job registry: turns a job name plus JSON args into a runnable JobSpec."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from mrharness.jobs import expr as ex
from mrharness.jobs import pi, wordcount
from mrharness.minimr.jobspec import JobSpec

SECTIONS = ("map", "reduce", "finalize")


class UnknownJob(KeyError):
    pass


class JobArgsError(ValueError):
    pass


@dataclass(frozen=True)
class JobDefinition:
    name: str
    bodies: Mapping[str, ex.Expr]
    envs: Mapping[str, Mapping[str, str]]
    build: Callable[[Mapping[str, Any]], tuple[tuple, int]] = field(repr=False)
    result_key: str | None = None
    arg_names: frozenset[str] = frozenset()

    def sections(self) -> list[tuple[str, ex.Expr]]:
        return [(s, self.bodies[s]) for s in SECTIONS if s in self.bodies]

    def with_body(self, section: str, body: ex.Expr) -> "JobDefinition":
        return replace(self, bodies={**self.bodies, section: body})

    def typecheck(self) -> None:
        for section, body in self.sections():
            ex.typecheck(body, self.envs[section])


def _int_arg(args: Mapping[str, Any], name: str, default: int, minimum: int = 1) -> int:
    value = args.get(name, default)
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise JobArgsError(f"{name} must be an integer >= {minimum}")
    return value


def _build_pi(args: Mapping[str, Any]) -> tuple[tuple, int]:
    seed = args.get("seed", pi.DEFAULT_SEED)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise JobArgsError("seed must be a 64-bit non-negative integer")
    params = pi.PiParams(
        num_maps=_int_arg(args, "maps", pi.DEFAULT_MAPS),
        points_per_map=_int_arg(args, "points_per_map", pi.DEFAULT_POINTS),
        seed=seed,
    )
    return pi.splits(params), _int_arg(args, "reducers", 1)


def _build_wordcount(args: Mapping[str, Any]) -> tuple[tuple, int]:
    if ("input" in args) == ("input_file" in args):
        raise JobArgsError("wordcount needs exactly one of input / input_file")
    if "input" in args:
        text = args["input"]
        if not isinstance(text, str):
            raise JobArgsError("input must be a string")
    else:
        text = Path(args["input_file"]).read_text(encoding="utf-8")
    num_maps = _int_arg(args, "maps", wordcount.DEFAULT_MAPS)
    return wordcount.splits(text, num_maps), _int_arg(args, "reducers", wordcount.DEFAULT_REDUCERS)


JOBS: dict[str, JobDefinition] = {
    "pi": JobDefinition(
        name="pi",
        bodies={"map": pi.MAP_BODY, "reduce": pi.REDUCE_BODY, "finalize": pi.FINALIZE_BODY},
        envs={"map": pi.MAP_ENV, "reduce": pi.REDUCE_ENV, "finalize": pi.FINALIZE_ENV},
        build=_build_pi,
        result_key="pi",
        arg_names=frozenset({"maps", "points_per_map", "seed", "reducers"}),
    ),
    "wordcount": JobDefinition(
        name="wordcount",
        bodies={"map": wordcount.MAP_BODY, "reduce": wordcount.REDUCE_BODY},
        envs={"map": wordcount.MAP_ENV, "reduce": wordcount.REDUCE_ENV},
        build=_build_wordcount,
        arg_names=frozenset({"input", "input_file", "maps", "reducers"}),
    ),
}


def get_job(name: str) -> JobDefinition:
    try:
        return JOBS[name]
    except KeyError:
        raise UnknownJob(name) from None


def apply_mutation(job: JobDefinition, mutation: Mapping[str, Any]) -> JobDefinition:
    """Swap one operator. `mutation` is {"section", "path", "op"}."""
    section = mutation["section"]
    path = tuple(mutation["path"])
    body = job.bodies[section]
    node = ex.node_at(body, path)
    op = mutation["op"]
    if not isinstance(node, ex.Binary) or op not in ex.operator_class(node.op):
        raise JobArgsError(f"cannot replace {node!r} with {op!r}")
    return job.with_body(section, ex.replace_at(body, path, replace(node, op=op)))


def build_job(name: str, args: Mapping[str, Any]) -> JobSpec:
    """Build a JobSpec; args may carry a `mutant` entry naming one operator swap."""
    job = get_job(name)
    args = dict(args)
    mutation = args.pop("mutant", None)
    unknown = sorted(set(args) - job.arg_names)
    if unknown:
        raise JobArgsError(f"unknown {name} args {unknown}")
    if mutation is not None:
        job = apply_mutation(job, mutation)
    job.typecheck()
    splits, reducers = job.build(args)
    return JobSpec(
        name=name,
        map_body=job.bodies["map"],
        reduce_body=job.bodies["reduce"],
        finalize_body=job.bodies.get("finalize"),
        num_reducers=reducers,
        splits=splits,
        result_key=job.result_key,
    )
