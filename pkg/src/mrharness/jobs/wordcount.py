"""Word count over ASCII-whitespace separated tokens."""

from __future__ import annotations

from typing import Any

from mrharness.jobs import expr as ex
from mrharness.jobs.expr import Binary, Call, Cond, Const, Emit, Fold, ForEach, Seq, Var

DEFAULT_MAPS = 4
DEFAULT_REDUCERS = 2

MAP_BODY: ex.Expr = ForEach(
    "w",
    Call("tokenize", (Var("line"),)),
    Cond(
        Binary(">", Call("len", (Var("w"),)), Const(0)),
        Emit(Var("w"), Const(1)),
        Seq(()),
    ),
)

REDUCE_BODY: ex.Expr = Emit(
    Var("key"), Fold(Var("values"), Const(0), "acc", "v", Binary("+", Var("acc"), Var("v")))
)

MAP_ENV = {"line": ex.STR}
REDUCE_ENV = {"key": ex.STR, "values": ex.LIST_NUM}


def splits(text: str, num_maps: int = DEFAULT_MAPS) -> tuple[tuple[dict[str, Any], ...], ...]:
    """Chunk the lines of `text` into at most `num_maps` contiguous splits."""
    if num_maps < 1:
        raise ValueError("num_maps must be >= 1")
    lines = text.split("\n")
    if text.endswith("\n"):
        lines.pop()
    if not lines:
        return ((),)
    size = -(-len(lines) // num_maps)
    return tuple(
        tuple({"line": line} for line in lines[i:i + size]) for i in range(0, len(lines), size)
    )


def wc_map(line: str) -> list[tuple[str, int]]:
    _, emitted = ex.evaluate(MAP_BODY, {"line": line})
    return emitted


def wc_reduce(word: str, counts: list[int]) -> tuple[str, int]:
    _, emitted = ex.evaluate(REDUCE_BODY, {"key": word, "values": list(counts)})
    return emitted[0]
