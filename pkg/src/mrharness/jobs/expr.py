"""Expression trees for map/reduce bodies.

Job bodies are small typed programs rather than Python callables so they can
be shipped to workers as JSON and rewritten operator-by-operator by the
mutation engine. Numeric operators accept scalars or numpy arrays; array
operands are evaluated elementwise with floating-point errors raised.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterator, Mapping, Union

import numpy as np

ARITHMETIC = ("+", "-", "*", "/")
RELATIONAL = ("<", "<=", ">", ">=", "==", "!=")
LOGICAL = ("and", "or")
BINARY_OPS = ARITHMETIC + RELATIONAL + LOGICAL
UNARY_OPS = ("neg", "not")


def operator_class(op: str) -> tuple[str, ...]:
    for cls in (ARITHMETIC, RELATIONAL, LOGICAL):
        if op in cls:
            return cls
    raise ValueError(f"unknown operator {op!r}")


class ExprFault(Exception):
    """Evaluation failed on some record; the job's result becomes NULL."""


class ExprTypeError(TypeError):
    pass


@dataclass(frozen=True)
class Const:
    value: Any


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Cond:
    test: "Expr"
    then: "Expr"
    orelse: "Expr"


@dataclass(frozen=True)
class Let:
    name: str
    value: "Expr"
    body: "Expr"


@dataclass(frozen=True)
class Emit:
    key: "Expr"
    value: "Expr"


@dataclass(frozen=True)
class Seq:
    items: tuple["Expr", ...]


@dataclass(frozen=True)
class ForEach:
    var: str
    iterable: "Expr"
    body: "Expr"


@dataclass(frozen=True)
class Fold:
    items: "Expr"
    init: "Expr"
    acc: str
    var: str
    body: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Expr", ...]


Expr = Union[Const, Var, Unary, Binary, Cond, Let, Emit, Seq, ForEach, Fold, Call]

# child field names per node type, in traversal order
_CHILD_FIELDS: dict[type, tuple[str, ...]] = {
    Const: (),
    Var: (),
    Unary: ("operand",),
    Binary: ("left", "right"),
    Cond: ("test", "then", "orelse"),
    Let: ("value", "body"),
    Emit: ("key", "value"),
    ForEach: ("iterable", "body"),
    Fold: ("items", "init", "body"),
}


def children(node: Expr) -> tuple[Expr, ...]:
    if isinstance(node, Seq):
        return node.items
    if isinstance(node, Call):
        return node.args
    return tuple(getattr(node, f) for f in _CHILD_FIELDS[type(node)])


def with_children(node: Expr, new: tuple[Expr, ...]) -> Expr:
    if isinstance(node, Seq):
        return Seq(tuple(new))
    if isinstance(node, Call):
        return Call(node.name, tuple(new))
    fields = _CHILD_FIELDS[type(node)]
    return replace(node, **dict(zip(fields, new)))


Path = tuple[int, ...]


def walk(node: Expr, path: Path = ()) -> Iterator[tuple[Path, Expr]]:
    """Pre-order traversal yielding (path, node)."""
    yield path, node
    for i, child in enumerate(children(node)):
        yield from walk(child, path + (i,))


def node_at(node: Expr, path: Path) -> Expr:
    for i in path:
        node = children(node)[i]
    return node


def replace_at(node: Expr, path: Path, new: Expr) -> Expr:
    if not path:
        return new
    kids = list(children(node))
    kids[path[0]] = replace_at(kids[path[0]], path[1:], new)
    return with_children(node, tuple(kids))


# -- serialization ------------------------------------------------------------


def to_json(node: Expr) -> Any:
    if isinstance(node, Const):
        return ["const", node.value]
    if isinstance(node, Var):
        return ["var", node.name]
    if isinstance(node, Unary):
        return ["unary", node.op, to_json(node.operand)]
    if isinstance(node, Binary):
        return ["binary", node.op, to_json(node.left), to_json(node.right)]
    if isinstance(node, Cond):
        return ["cond", to_json(node.test), to_json(node.then), to_json(node.orelse)]
    if isinstance(node, Let):
        return ["let", node.name, to_json(node.value), to_json(node.body)]
    if isinstance(node, Emit):
        return ["emit", to_json(node.key), to_json(node.value)]
    if isinstance(node, Seq):
        return ["seq", [to_json(i) for i in node.items]]
    if isinstance(node, ForEach):
        return ["foreach", node.var, to_json(node.iterable), to_json(node.body)]
    if isinstance(node, Fold):
        return ["fold", node.acc, node.var, to_json(node.items), to_json(node.init), to_json(node.body)]
    if isinstance(node, Call):
        return ["call", node.name, [to_json(a) for a in node.args]]
    raise TypeError(f"not an expression: {node!r}")


def from_json(obj: Any) -> Expr:
    tag = obj[0]
    if tag == "const":
        return Const(obj[1])
    if tag == "var":
        return Var(obj[1])
    if tag == "unary":
        return Unary(obj[1], from_json(obj[2]))
    if tag == "binary":
        return Binary(obj[1], from_json(obj[2]), from_json(obj[3]))
    if tag == "cond":
        return Cond(from_json(obj[1]), from_json(obj[2]), from_json(obj[3]))
    if tag == "let":
        return Let(obj[1], from_json(obj[2]), from_json(obj[3]))
    if tag == "emit":
        return Emit(from_json(obj[1]), from_json(obj[2]))
    if tag == "seq":
        return Seq(tuple(from_json(i) for i in obj[1]))
    if tag == "foreach":
        return ForEach(obj[1], from_json(obj[2]), from_json(obj[3]))
    if tag == "fold":
        return Fold(from_json(obj[3]), from_json(obj[4]), obj[1], obj[2], from_json(obj[5]))
    if tag == "call":
        return Call(obj[1], tuple(from_json(a) for a in obj[2]))
    raise ValueError(f"unknown expression tag {tag!r}")


def render(node: Expr) -> str:
    """Infix rendering, for reports and debugging."""
    if isinstance(node, Const):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return f"({'-' if node.op == 'neg' else 'not '}{render(node.operand)})"
    if isinstance(node, Binary):
        return f"({render(node.left)} {node.op} {render(node.right)})"
    if isinstance(node, Cond):
        return f"(if {render(node.test)} then {render(node.then)} else {render(node.orelse)})"
    if isinstance(node, Let):
        return f"let {node.name} = {render(node.value)} in {render(node.body)}"
    if isinstance(node, Emit):
        return f"emit({render(node.key)}, {render(node.value)})"
    if isinstance(node, Seq):
        return "{" + "; ".join(render(i) for i in node.items) + "}"
    if isinstance(node, ForEach):
        return f"for {node.var} in {render(node.iterable)}: {render(node.body)}"
    if isinstance(node, Fold):
        return f"fold({render(node.items)}, {render(node.init)}, ({node.acc}, {node.var}) -> {render(node.body)})"
    return f"{node.name}({', '.join(render(a) for a in node.args)})"


# -- types --------------------------------------------------------------------

NUM, BOOL, STR, UNIT, NEVER = "num", "bool", "str", "unit", "never"
LIST_STR, LIST_NUM = "list[str]", "list[num]"
_ELEMENT = {LIST_STR: STR, LIST_NUM: NUM}


def _unify(a: str, b: str) -> str | None:
    if a == NEVER:
        return b
    if b == NEVER or a == b:
        return a
    return None


def _const_type(value: Any) -> str:
    if isinstance(value, bool):
        return BOOL
    if isinstance(value, (int, float)):
        return NUM
    if isinstance(value, str):
        return STR
    raise ExprTypeError(f"unsupported constant {value!r}")


# builtin name -> (argument types, result type)
_BUILTIN_TYPES: dict[str, tuple[tuple[str, ...], str]] = {
    "tokenize": ((STR,), LIST_STR),
    "len": ((STR,), NUM),
    "rand_point": ((NUM, NUM, NUM, NUM), NUM),
    "error": ((STR,), NEVER),
}


def typecheck(node: Expr, env: Mapping[str, str]) -> str:
    """Return the static type of `node` or raise ExprTypeError."""
    if isinstance(node, Const):
        return _const_type(node.value)
    if isinstance(node, Var):
        if node.name not in env:
            raise ExprTypeError(f"unbound variable {node.name}")
        return env[node.name]
    if isinstance(node, Unary):
        t = typecheck(node.operand, env)
        want = NUM if node.op == "neg" else BOOL
        if node.op not in UNARY_OPS or _unify(t, want) is None:
            raise ExprTypeError(f"{node.op} applied to {t}")
        return want
    if isinstance(node, Binary):
        lt, rt = typecheck(node.left, env), typecheck(node.right, env)
        if node.op in ARITHMETIC:
            if _unify(lt, NUM) is None or _unify(rt, NUM) is None:
                raise ExprTypeError(f"{node.op} over {lt}, {rt}")
            return NUM
        if node.op in ("==", "!="):
            if _unify(lt, rt) not in (NUM, STR, BOOL, NEVER):
                raise ExprTypeError(f"{node.op} over {lt}, {rt}")
            return BOOL
        if node.op in RELATIONAL:
            if _unify(lt, NUM) is None or _unify(rt, NUM) is None:
                raise ExprTypeError(f"{node.op} over {lt}, {rt}")
            return BOOL
        if node.op in LOGICAL:
            if _unify(lt, BOOL) is None or _unify(rt, BOOL) is None:
                raise ExprTypeError(f"{node.op} over {lt}, {rt}")
            return BOOL
        raise ExprTypeError(f"unknown operator {node.op}")
    if isinstance(node, Cond):
        if _unify(typecheck(node.test, env), BOOL) is None:
            raise ExprTypeError("condition is not boolean")
        t = _unify(typecheck(node.then, env), typecheck(node.orelse, env))
        if t is None:
            raise ExprTypeError("branches disagree")
        return t
    if isinstance(node, Let):
        return typecheck(node.body, {**env, node.name: typecheck(node.value, env)})
    if isinstance(node, Emit):
        kt, vt = typecheck(node.key, env), typecheck(node.value, env)
        if kt not in (NUM, STR, BOOL, NEVER) or vt not in (NUM, STR, BOOL, NEVER):
            raise ExprTypeError(f"emit of {kt}, {vt}")
        return UNIT
    if isinstance(node, Seq):
        for item in node.items:
            typecheck(item, env)
        return UNIT
    if isinstance(node, ForEach):
        it = typecheck(node.iterable, env)
        if it not in _ELEMENT:
            raise ExprTypeError(f"cannot iterate {it}")
        typecheck(node.body, {**env, node.var: _ELEMENT[it]})
        return UNIT
    if isinstance(node, Fold):
        it = typecheck(node.items, env)
        if it not in _ELEMENT:
            raise ExprTypeError(f"cannot fold {it}")
        acc_t = typecheck(node.init, env)
        body_t = typecheck(node.body, {**env, node.acc: acc_t, node.var: _ELEMENT[it]})
        if _unify(acc_t, body_t) is None:
            raise ExprTypeError("fold body changes accumulator type")
        return acc_t
    if isinstance(node, Call):
        if node.name == "sum":
            if len(node.args) != 1:
                raise ExprTypeError("sum takes one argument")
            t = typecheck(node.args[0], env)
            if t not in (NUM, BOOL, LIST_NUM):
                raise ExprTypeError(f"sum over {t}")
            return NUM
        if node.name not in _BUILTIN_TYPES:
            raise ExprTypeError(f"unknown builtin {node.name}")
        params, result = _BUILTIN_TYPES[node.name]
        if len(params) != len(node.args):
            raise ExprTypeError(f"{node.name} takes {len(params)} arguments")
        for want, arg in zip(params, node.args):
            if _unify(typecheck(arg, env), want) is None:
                raise ExprTypeError(f"bad argument to {node.name}")
        return result
    raise ExprTypeError(f"not an expression: {node!r}")


def well_typed(node: Expr, env: Mapping[str, str]) -> bool:
    try:
        typecheck(node, env)
    except ExprTypeError:
        return False
    return True


# -- evaluation ---------------------------------------------------------------

_ASCII_WS = re.compile(r"[ \t\n\r\x0b\x0c]+")
_MAX_POINTS = 10_000_000


def rand_points(seed: int, task: int, count: int) -> np.ndarray:
    """`count` points in [0,1)^2 from a Philox stream keyed by (seed, task).

    Point i is always the i-th pair of draws, so a re-executed task sees the
    same points.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, task & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.random((count, 2))


def _as_index(value: Any, what: str) -> int:
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        value = int(value)
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ExprFault(f"{what} must be an integer, got {value!r}")
    return int(value)


def _rand_point(seed: Any, task: Any, count: Any, axis: Any) -> np.ndarray:
    count = _as_index(count, "point count")
    if count < 0 or count > _MAX_POINTS:
        raise ExprFault(f"point count {count} out of range")
    axis = _as_index(axis, "axis")
    if axis not in (0, 1):
        raise ExprFault(f"axis {axis} out of range")
    return rand_points(_as_index(seed, "seed"), _as_index(task, "task"), count)[:, axis]


def _sum(value: Any) -> int | float:
    if isinstance(value, np.ndarray):
        if value.dtype == bool:
            return int(np.count_nonzero(value))
        total = value.sum()
        return total.item()
    if isinstance(value, list):
        return _plain(sum(value))
    return _plain(value)


def _tokenize(text: str) -> list[str]:
    # empty tokens are kept (leading/trailing whitespace); bodies filter them
    return _ASCII_WS.split(text)


def _error(message: str) -> Any:
    raise ExprFault(message)


BUILTINS: dict[str, Callable[..., Any]] = {
    "tokenize": _tokenize,
    "len": len,
    "rand_point": _rand_point,
    "error": _error,
    "sum": _sum,
}


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    return value


def _binary(op: str, a: Any, b: Any) -> Any:
    vector = isinstance(a, np.ndarray) or isinstance(b, np.ndarray)
    if op in LOGICAL:
        if vector:
            return np.logical_and(a, b) if op == "and" else np.logical_or(a, b)
        return (a and b) if op == "and" else (a or b)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if not vector and b == 0:
            raise ExprFault("division by zero")
        return a / b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    raise ExprFault(f"unknown operator {op}")


def _emit_scalar(value: Any, what: str) -> Any:
    value = _plain(value)
    if isinstance(value, float) and not np.isfinite(value):
        raise ExprFault(f"non-finite {what} {value!r}")
    if not isinstance(value, (int, float, str, bool)):
        raise ExprFault(f"{what} must be a scalar, got {type(value).__name__}")
    return value


class Evaluator:
    """Evaluates one body; `emits` collects the (key, value) pairs it emits."""

    def __init__(self) -> None:
        self.emits: list[tuple[Any, Any]] = []

    def run(self, node: Expr, env: Mapping[str, Any]) -> Any:
        try:
            with np.errstate(all="raise"):
                return _plain(self.eval(node, dict(env)))
        except ExprFault:
            raise
        except (ArithmeticError, FloatingPointError, OverflowError, ValueError, TypeError,
                KeyError, IndexError, MemoryError) as exc:
            raise ExprFault(f"{type(exc).__name__}: {exc}") from exc

    def eval(self, node: Expr, env: dict[str, Any]) -> Any:
        if isinstance(node, Const):
            return node.value
        if isinstance(node, Var):
            if node.name not in env:
                raise ExprFault(f"unbound variable {node.name}")
            return env[node.name]
        if isinstance(node, Unary):
            v = self.eval(node.operand, env)
            if node.op == "neg":
                return -v
            return np.logical_not(v) if isinstance(v, np.ndarray) else not v
        if isinstance(node, Binary):
            return _binary(node.op, self.eval(node.left, env), self.eval(node.right, env))
        if isinstance(node, Cond):
            test = self.eval(node.test, env)
            if isinstance(test, np.ndarray):
                raise ExprFault("condition must be a scalar")
            return self.eval(node.then if test else node.orelse, env)
        if isinstance(node, Let):
            inner = dict(env)
            inner[node.name] = self.eval(node.value, env)
            return self.eval(node.body, inner)
        if isinstance(node, Emit):
            key = _emit_scalar(self.eval(node.key, env), "key")
            value = _emit_scalar(self.eval(node.value, env), "value")
            self.emits.append((key, value))
            return None
        if isinstance(node, Seq):
            for item in node.items:
                self.eval(item, env)
            return None
        if isinstance(node, ForEach):
            inner = dict(env)
            for element in self.eval(node.iterable, env):
                inner[node.var] = element
                self.eval(node.body, inner)
            return None
        if isinstance(node, Fold):
            items = self.eval(node.items, env)
            acc = self.eval(node.init, env)
            inner = dict(env)
            for element in items:
                inner[node.acc] = acc
                inner[node.var] = element
                acc = self.eval(node.body, inner)
            return acc
        if isinstance(node, Call):
            fn = BUILTINS.get(node.name)
            if fn is None:
                raise ExprFault(f"unknown builtin {node.name}")
            return fn(*(self.eval(a, env) for a in node.args))
        raise ExprFault(f"not an expression: {node!r}")


def evaluate(node: Expr, env: Mapping[str, Any]) -> tuple[Any, list[tuple[Any, Any]]]:
    """Evaluate `node`; returns (value, emitted pairs). Raises ExprFault."""
    ev = Evaluator()
    value = ev.run(node, env)
    return value, ev.emits
