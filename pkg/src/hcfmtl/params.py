"""Layer-structured parameter containers and the vector algebra used by aggregation.

A parameter tree is a plain ``dict`` mapping a layer id to a float64 array.
Every weight matrix and every bias vector is its own layer unit, and dict
insertion order is the layer order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

ParamTree = dict[str, np.ndarray]


class SchemaError(ValueError):
    """Raised when a tree or vector does not match the expected schema."""


@dataclass(frozen=True)
class ParamSchema:
    layers: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def total_dim(self) -> int:
        return sum(layer_size(shape) for _, shape in self.layers)

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.layers)

    def offsets(self) -> list[tuple[str, int, int, tuple[int, ...]]]:
        out = []
        start = 0
        for name, shape in self.layers:
            stop = start + layer_size(shape)
            out.append((name, start, stop, shape))
            start = stop
        return out


def layer_size(shape: Sequence[int]) -> int:
    return int(math.prod(shape))


def schema_of(tree: Mapping[str, np.ndarray]) -> ParamSchema:
    return ParamSchema(tuple((name, tuple(np.shape(arr))) for name, arr in tree.items()))


@dataclass(frozen=True)
class FlatVector:
    data: np.ndarray
    schema: ParamSchema

    def __post_init__(self):
        if self.data.ndim != 1 or self.data.shape[0] != self.schema.total_dim:
            raise SchemaError(
                f"vector of length {self.data.shape} does not match schema total_dim "
                f"{self.schema.total_dim}"
            )

    def __len__(self) -> int:
        return self.data.shape[0]


def flatten(tree: Mapping[str, np.ndarray], schema: ParamSchema | None = None) -> FlatVector:
    """Concatenate the tree's tensors in schema order (row-major)."""
    if schema is None:
        schema = schema_of(tree)
    if tuple(tree.keys()) != schema.layer_ids:
        raise SchemaError(f"layer ids {list(tree)} do not match schema {list(schema.layer_ids)}")
    parts = []
    for name, shape in schema.layers:
        arr = np.asarray(tree[name], dtype=np.float64)
        if arr.shape != shape:
            raise SchemaError(f"layer {name!r} has shape {arr.shape}, schema expects {shape}")
        parts.append(arr.reshape(-1))
    data = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float64)
    return FlatVector(data, schema)


def unflatten(vec: FlatVector) -> ParamTree:
    return {
        name: vec.data[start:stop].reshape(shape).copy()
        for name, start, stop, shape in vec.schema.offsets()
    }


def _check_pair(x: FlatVector, y: FlatVector) -> None:
    if x.schema != y.schema:
        raise SchemaError(f"schema mismatch: dims {x.schema.total_dim} vs {y.schema.total_dim}")


def dot(x: np.ndarray, y: np.ndarray) -> float:
    """Correctly rounded inner product of two 1-d float arrays.

    ``math.fsum`` makes the result independent of summation order.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise SchemaError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return math.fsum((x * y).tolist())


def inner(x: FlatVector, y: FlatVector) -> float:
    _check_pair(x, y)
    return dot(x.data, y.data)


def norm(x: FlatVector) -> float:
    return math.sqrt(inner(x, x))


def add_scaled(y: FlatVector, a: float, x: FlatVector) -> FlatVector:
    """Return ``y + a * x``."""
    _check_pair(x, y)
    if a == 0.0:
        return FlatVector(y.data.copy(), y.schema)
    return FlatVector(y.data + a * x.data, y.schema)


def scale(x: FlatVector, a: float) -> FlatVector:
    return FlatVector(a * x.data, x.schema)


def mean(vectors: Sequence[FlatVector]) -> FlatVector:
    """Elementwise mean with a fixed sequential summation order."""
    if len(vectors) == 0:
        raise ValueError("mean of an empty sequence of vectors")
    first = vectors[0]
    acc = first.data.copy()
    for v in vectors[1:]:
        _check_pair(first, v)
        acc += v.data
    return FlatVector(acc / len(vectors), first.schema)


# Tree-level helpers used by the models and the federation engine.

def tree_zeros_like(tree: Mapping[str, np.ndarray]) -> ParamTree:
    return {k: np.zeros_like(v) for k, v in tree.items()}


def tree_add(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> ParamTree:
    _same_keys(a, b)
    return {k: a[k] + b[k] for k in a}


def tree_sub(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> ParamTree:
    _same_keys(a, b)
    return {k: a[k] - b[k] for k in a}


def tree_scale(a: Mapping[str, np.ndarray], s: float) -> ParamTree:
    return {k: s * v for k, v in a.items()}


def tree_copy(a: Mapping[str, np.ndarray]) -> ParamTree:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in a.items()}


def tree_mean(trees: Sequence[Mapping[str, np.ndarray]]) -> ParamTree:
    if not trees:
        raise ValueError("mean of an empty sequence of trees")
    schema = schema_of(trees[0])
    return unflatten(mean([flatten(t, schema) for t in trees]))


def tree_allfinite(tree: Mapping[str, np.ndarray]) -> bool:
    return all(np.isfinite(v).all() for v in tree.values())


def _same_keys(a: Mapping, b: Mapping) -> None:
    if list(a.keys()) != list(b.keys()):
        raise SchemaError(f"layer ids differ: {list(a)} vs {list(b)}")


def trees_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    """Bit-exact equality of two trees (same ids, order, shapes and values)."""
    if list(a.keys()) != list(b.keys()):
        return False
    return all(
        a[k].shape == b[k].shape and np.array_equal(a[k], b[k]) for k in a
    )

