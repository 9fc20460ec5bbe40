"""Walk nested parameter containers (dataclasses, lists, dicts) down to their arrays."""
from __future__ import annotations

import dataclasses
from typing import Any, Callable

import numpy as np

from ..errors import ConfigurationError
from .tape import Var


def _is_leaf(x: Any) -> bool:
    return isinstance(x, (np.ndarray, Var))


def tree_map_with_path(fn: Callable[[str, Any], Any], tree: Any, prefix: str = "") -> Any:
    def join(key: Any) -> str:
        return f"{prefix}.{key}" if prefix else str(key)

    if _is_leaf(tree):
        return fn(prefix, tree)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        updates = {
            f.name: tree_map_with_path(fn, getattr(tree, f.name), join(f.name))
            for f in dataclasses.fields(tree)
            if f.init
        }
        return dataclasses.replace(tree, **updates)
    if isinstance(tree, list):
        return [tree_map_with_path(fn, x, join(i)) for i, x in enumerate(tree)]
    if isinstance(tree, tuple):
        return tuple(tree_map_with_path(fn, x, join(i)) for i, x in enumerate(tree))
    if isinstance(tree, dict):
        return {k: tree_map_with_path(fn, v, join(k)) for k, v in tree.items()}
    return tree


def tree_map(fn: Callable[[Any], Any], tree: Any) -> Any:
    return tree_map_with_path(lambda _, leaf: fn(leaf), tree)


def tree_flatten(tree: Any) -> dict[str, Any]:
    flat: dict[str, Any] = {}

    def collect(path: str, leaf: Any) -> Any:
        flat[path] = leaf
        return leaf

    tree_map_with_path(collect, tree)
    return flat


def tree_unflatten(template: Any, flat: dict[str, np.ndarray]) -> Any:
    """Rebuild `template`'s structure from named arrays; shapes must match."""

    def pick(path: str, leaf: Any) -> np.ndarray:
        if path not in flat:
            raise ConfigurationError(f"missing array '{path}'")
        arr = np.asarray(flat[path], dtype=np.float64)
        if arr.shape != leaf.shape:
            raise ConfigurationError(
                f"array '{path}' has shape {arr.shape}, expected {leaf.shape}"
            )
        return arr

    return tree_map_with_path(pick, template)


def watch_tree(tape: Any, tree: Any) -> Any:
    return tree_map_with_path(lambda path, leaf: tape.watch(leaf, name=path), tree)


def detach_tree(tree: Any) -> Any:
    return tree_map(lambda leaf: leaf.value if isinstance(leaf, Var) else leaf, tree)
