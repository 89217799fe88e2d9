"""Canonical key/value serialization and key partitioning."""

from __future__ import annotations

import json
from typing import Any

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def canonical(value: Any) -> str:
    """Equal logical values serialize to identical text."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def partition(key: Any, num_reducers: int) -> int:
    """Reducer index for `key`; stable across processes and runs."""
    if num_reducers < 1:
        raise ValueError("num_reducers must be >= 1")
    return fnv1a64(canonical(key).encode("utf-8")) % num_reducers


def output_key(key: Any) -> str:
    """Key under which a reduced pair appears in a job's output object."""
    return key if isinstance(key, str) else canonical(key)


def format_output(pairs: list[tuple[Any, Any]]) -> str:
    """Output-file body: one `key<TAB>value` line per key, sorted by the
    canonical key's bytes."""
    lines = sorted((canonical(k).encode("utf-8"), canonical(k), canonical(v)) for k, v in pairs)
    return "".join(f"{k}\t{v}\n" for _, k, v in lines)


def parse_output(text: str) -> list[tuple[Any, Any]]:
    pairs = []
    for line in text.splitlines():
        k, _, v = line.partition("\t")
        pairs.append((json.loads(k), json.loads(v)))
    return pairs
