"""Parameter containers and helpers for walking them.

Leaves are numpy arrays for storage and inference, or :class:`Tensor`
objects while a training step is being recorded; :func:`map_leaves` converts
between the two.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Callable, Iterator

import numpy as np


@dataclass
class Dense:
    """Fully-connected layer; ``w`` is ``(out, in)``."""

    w: Any
    b: Any


@dataclass
class Conv:
    """Convolution; ``w`` is ``(k, k, Cin, Cout)``."""

    w: Any
    b: Any


def _is_container(obj) -> bool:
    return dataclasses.is_dataclass(obj) and not isinstance(obj, type)


def _param_fields(obj):
    for f in dataclasses.fields(obj):
        if f.metadata.get("static"):
            continue
        yield f.name, getattr(obj, f.name)


def named_leaves(obj, prefix: str = "") -> Iterator[tuple[str, Any]]:
    """Yield ``(dotted.name, leaf)`` in a stable order."""
    if _is_container(obj):
        for name, val in _param_fields(obj):
            yield from named_leaves(val, f"{prefix}{name}.")
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            yield from named_leaves(val, f"{prefix}{i}.")
    else:
        yield prefix[:-1], obj


def map_leaves(fn: Callable[[Any], Any], obj):
    """Return a copy of ``obj`` with every parameter leaf replaced by ``fn(leaf)``."""
    if _is_container(obj):
        changes = {name: map_leaves(fn, val) for name, val in _param_fields(obj)}
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [map_leaves(fn, v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(map_leaves(fn, v) for v in obj)
    return fn(obj)


def leaves(obj) -> list:
    return [leaf for _, leaf in named_leaves(obj)]


def zeros_like(obj):
    return map_leaves(lambda a: np.zeros_like(np.asarray(a)), obj)


def count(obj) -> int:
    return int(sum(np.asarray(a).size for a in leaves(obj)))
