"""Magnitude pruning producing per-layer index sets of unpruned parameters."""

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

MAX_DENSE_LEN = 2**32


class PruningError(ValueError):
    pass


def as_fraction(x):
    """Exact rational for a sparsity-like value; floats are read by their
    shortest decimal repr, so 0.9 becomes 9/10."""
    if isinstance(x, (Fraction, int)):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(repr(float(x)))


def kept_count(dense_len, p):
    """round((1 - p) * dense_len), ties rounding up."""
    keep = (1 - as_fraction(p)) * dense_len
    return int((keep + Fraction(1, 2)).__floor__())


@dataclass(eq=False)
class PrunedIndexSet:
    """Sorted 1-D (row-major linearized) indices of a layer's unpruned parameters."""

    layer_id: str
    dense_len: int
    indices: np.ndarray

    def __post_init__(self):
        self.dense_len = int(self.dense_len)
        if not 0 <= self.dense_len < MAX_DENSE_LEN:
            raise PruningError(f"{self.layer_id}: dense_len {self.dense_len} does not fit 32-bit indices")
        idx = np.asarray(self.indices)
        if idx.ndim != 1:
            raise PruningError(f"{self.layer_id}: indices must be 1-D")
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.dense_len:
                raise PruningError(f"{self.layer_id}: index out of range [0, {self.dense_len})")
            if np.any(np.diff(idx.astype(np.int64)) <= 0):
                raise PruningError(f"{self.layer_id}: indices must be strictly increasing")
        self.indices = np.ascontiguousarray(idx, dtype=np.uint32)
        self.indices.flags.writeable = False

    def __len__(self):
        return int(self.indices.size)

    def __eq__(self, other):
        if not isinstance(other, PrunedIndexSet):
            return NotImplemented
        return (self.layer_id == other.layer_id and self.dense_len == other.dense_len
                and np.array_equal(self.indices, other.indices))

    def mask(self):
        m = np.zeros(self.dense_len, dtype=bool)
        m[self.indices] = True
        return m

    @classmethod
    def full(cls, layer_id, dense_len):
        return cls(layer_id, dense_len, np.arange(dense_len, dtype=np.uint32))

    def to_dict(self):
        return {"layer_id": self.layer_id, "dense_len": self.dense_len,
                "indices": self.indices.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["layer_id"], d["dense_len"], np.asarray(d["indices"], dtype=np.int64))


def linearize(coords, shape):
    """Row-major linear index of each N-d coordinate, sorted ascending.

    >>> linearize([(0, 0), (1, 1)], (2, 2))
    [0, 3]
    """
    shape = tuple(int(s) for s in shape)
    if not coords:
        return []
    arr = np.asarray(coords, dtype=np.int64).reshape(len(coords), -1)
    if arr.shape[1] != len(shape):
        raise IndexError(f"coordinates have {arr.shape[1]} dims, shape has {len(shape)}")
    if np.any(arr < 0) or np.any(arr >= np.asarray(shape)):
        raise IndexError(f"coordinate out of bounds for shape {shape}")
    flat = np.ravel_multi_index(tuple(arr.T), shape)
    return sorted(int(i) for i in flat)


def _top_k(magnitudes, k):
    # Descending magnitude, ties go to the lower linear index (stable sort).
    order = np.argsort(-magnitudes, kind="stable")
    return np.sort(order[:k])


def magnitude_prune(layers, p, scope="per-layer"):
    """Keep the largest-magnitude (1 - p) fraction of parameters.

    ``layers`` is a sequence of ``(layer_id, params)`` or
    ``(layer_id, params, prunable)``; non-prunable layers keep every index.
    Returns one PrunedIndexSet per layer, in input order.
    """
    p = as_fraction(p)
    if not 0 <= p < 1:
        raise PruningError(f"sparsity must lie in [0, 1), got {p}")
    if scope not in ("per-layer", "global"):
        raise PruningError(f"unknown pruning scope {scope!r}")

    entries = []
    for item in layers:
        layer_id, params = item[0], item[1]
        prunable = item[2] if len(item) > 2 else True
        flat = np.abs(np.asarray(params, dtype=np.float64).reshape(-1))
        entries.append((layer_id, flat, prunable))

    if scope == "per-layer":
        out = []
        for layer_id, mags, prunable in entries:
            if prunable:
                keep = _top_k(mags, kept_count(mags.size, p))
            else:
                keep = np.arange(mags.size)
            out.append(PrunedIndexSet(layer_id, mags.size, keep))
        return out

    prunable_ids = [i for i, e in enumerate(entries) if e[2]]
    pooled = np.concatenate([entries[i][1] for i in prunable_ids]) if prunable_ids else np.zeros(0)
    chosen = _top_k(pooled, kept_count(pooled.size, p))
    keep_by_layer = {}
    offset = 0
    for i in prunable_ids:
        n = entries[i][1].size
        sel = chosen[(chosen >= offset) & (chosen < offset + n)]
        keep_by_layer[i] = sel - offset
        offset += n
    out = []
    for i, (layer_id, mags, _) in enumerate(entries):
        keep = keep_by_layer.get(i, np.arange(mags.size))
        out.append(PrunedIndexSet(layer_id, mags.size, keep))
    return out


def dump_index_sets(index_sets, fp):
    json.dump([s.to_dict() for s in index_sets], fp)


def load_index_sets(fp):
    return [PrunedIndexSet.from_dict(d) for d in json.load(fp)]
