"""Monte Carlo pi estimator.

Each map task draws `n` points in the unit square and counts those inside the
inscribed circle; the reduce sums counts per key and the finalize step turns
the totals into 4 * inside / (inside + outside).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from mrharness.jobs import expr as ex
from mrharness.jobs.expr import Binary, Call, Cond, Const, Emit, Fold, Let, Seq, Var

DEFAULT_MAPS = 10
DEFAULT_POINTS = 100_000
DEFAULT_SEED = 42


@dataclass(frozen=True)
class PiParams:
    num_maps: int = DEFAULT_MAPS
    points_per_map: int = DEFAULT_POINTS
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.num_maps < 1 or self.points_per_map < 1:
            raise ValueError("num_maps and points_per_map must be >= 1")

    @property
    def total_points(self) -> int:
        return self.num_maps * self.points_per_map


def _sq_offset(var: str) -> ex.Expr:
    d = Binary("-", Var(var), Const(0.5))
    # two distinct nodes so each subtraction is its own mutation site
    return Binary("*", d, Binary("-", Var(var), Const(0.5)))


MAP_BODY: ex.Expr = Cond(
    Binary("and", Binary(">", Var("n"), Const(0)), Binary(">=", Var("task"), Const(0))),
    Let("xs", Call("rand_point", (Var("seed"), Var("task"), Var("n"), Const(0))),
        Let("ys", Call("rand_point", (Var("seed"), Var("task"), Var("n"), Const(1))),
            Let("inside",
                Call("sum", (Binary("<=", Binary("+", _sq_offset("xs"), _sq_offset("ys")), Const(0.25)),)),
                Seq((
                    Emit(Const("inside"), Var("inside")),
                    Emit(Const("outside"), Binary("-", Var("n"), Var("inside"))),
                ))))),
    Call("error", (Const("invalid pi parameters"),)),
)

REDUCE_BODY: ex.Expr = Emit(
    Var("key"), Fold(Var("values"), Const(0), "acc", "v", Binary("+", Var("acc"), Var("v")))
)

FINALIZE_BODY: ex.Expr = Emit(
    Const("pi"),
    Binary("*", Const(4), Binary("/", Var("inside"), Binary("+", Var("inside"), Var("outside")))),
)

MAP_ENV = {"task": ex.NUM, "n": ex.NUM, "seed": ex.NUM}
REDUCE_ENV = {"key": ex.STR, "values": ex.LIST_NUM}
FINALIZE_ENV = {"inside": ex.NUM, "outside": ex.NUM}


def splits(params: PiParams) -> tuple[tuple[dict[str, Any], ...], ...]:
    return tuple(
        ({"task": i, "n": params.points_per_map, "seed": params.seed},)
        for i in range(params.num_maps)
    )


def pi_map(task_index: int, params: PiParams) -> list[tuple[Any, Any]]:
    _, emitted = ex.evaluate(
        MAP_BODY, {"task": task_index, "n": params.points_per_map, "seed": params.seed}
    )
    return emitted


def pi_reduce(key: str, counts: list[int]) -> tuple[str, int]:
    _, emitted = ex.evaluate(REDUCE_BODY, {"key": key, "values": list(counts)})
    return emitted[0]


def pi_estimate(inside: int, outside: int) -> float:
    """4 * I / (I + O). Raises ExprFault when no points were counted."""
    _, emitted = ex.evaluate(FINALIZE_BODY, {"inside": inside, "outside": outside})
    return emitted[0][1]
