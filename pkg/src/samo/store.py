"""Compressed model-state storage and memory accounting.

Every model state except the half-precision parameters lives in compressed
form: one flat value buffer per state, holding only the unpruned entries, all
sharing the layer's PrunedIndexSet. The half-precision parameters stay dense
(zeros at pruned slots) so forward and backward can use dense kernels.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import dense
from .dense import HALF, SINGLE, DimensionError
from .pruner import PrunedIndexSet, as_fraction

# bytes per element
THETA16, GRAD16, THETA32, GRAD32, ADAM = 2, 2, 4, 4, 8
INDEX = 4
HALF_COPY = 2

PEAK = "peak"
STEADY = "steady"

MEMORY_CSV_COLUMNS = ["phi", "p", "bytes_default", "bytes_samo", "bytes_saved", "savings_fraction"]


def compress(t, ind):
    """Gather the unpruned entries of a dense tensor into a flat buffer."""
    flat = np.asarray(t).reshape(-1)
    if flat.size != ind.dense_len:
        raise DimensionError(f"{ind.layer_id}: tensor has {flat.size} elements, index set expects {ind.dense_len}")
    return flat[ind.indices]


def expand(values, ind, shape):
    """Scatter compressed values into a zero-filled dense tensor of ``shape``."""
    values = np.asarray(values)
    if values.ndim != 1 or values.size != len(ind):
        raise DimensionError(f"{ind.layer_id}: {values.size} values for {len(ind)} indices")
    if math.prod(shape) != ind.dense_len:
        raise DimensionError(f"{ind.layer_id}: shape {tuple(shape)} does not hold {ind.dense_len} elements")
    out = np.zeros(ind.dense_len, dtype=values.dtype)
    out[ind.indices] = values
    return out.reshape(shape)


@dataclass(eq=False)
class CompressedState:
    ind: PrunedIndexSet
    theta32: np.ndarray
    grad16: np.ndarray = None
    grad32: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None

    def __post_init__(self):
        n = len(self.ind)
        self.theta32 = np.ascontiguousarray(self.theta32, dtype=SINGLE)
        if self.grad16 is None:
            self.grad16 = np.zeros(n, dtype=HALF)
        if self.grad32 is None:
            self.grad32 = np.zeros(n, dtype=SINGLE)
        if self.adam_m is None:
            self.adam_m = np.zeros(n, dtype=SINGLE)
        if self.adam_v is None:
            self.adam_v = np.zeros(n, dtype=SINGLE)
        for name, buf in self.buffers().items():
            if buf.shape != (n,):
                raise DimensionError(f"{self.ind.layer_id}: {name} has shape {buf.shape}, expected ({n},)")

    def buffers(self):
        return {"theta32": self.theta32, "grad16": self.grad16, "grad32": self.grad32,
                "adam_m": self.adam_m, "adam_v": self.adam_v}


@dataclass(eq=False)
class LayerState:
    """One parameter tensor: dense half copy plus its compressed states."""

    theta16: np.ndarray
    compressed: CompressedState
    shape: tuple

    @property
    def ind(self):
        return self.compressed.ind

    @property
    def layer_id(self):
        return self.compressed.ind.layer_id

    @classmethod
    def from_dense(cls, theta32, ind):
        """Build from a dense single-precision initialization; pruned entries are dropped."""
        shape = tuple(np.shape(theta32))
        comp = CompressedState(ind, compress(dense.tensor(theta32, "single"), ind))
        layer = cls(None, comp, shape)
        layer.refresh_theta16()
        return layer

    def refresh_theta16(self):
        # Discard the old dense copy, make a compressed half copy, expand it.
        self.theta16 = None
        half_copy = dense.cast(self.compressed.theta32, "half")
        self.theta16 = expand(half_copy, self.ind, self.shape)

    def dense_theta32(self):
        return expand(self.compressed.theta32, self.ind, self.shape)


@dataclass(eq=False)
class ModelState:
    layers: list = field(default_factory=list)
    step: int = 0
    skipped: int = 0
    pending: object = None  # activations awaiting backward
    peak_dense_grads: int = 0

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    @property
    def phi(self):
        return sum(layer.ind.dense_len for layer in self.layers)

    @classmethod
    def from_dense(cls, params, index_sets):
        return cls([LayerState.from_dense(w, ind) for w, ind in zip(params, index_sets, strict=True)])


def measured_bytes(state, mode=PEAK):
    """Sum of the actual model-state buffer footprints.

    ``peak`` adds the transient compressed half copy made while downcasting
    parameters in the optimizer step; ``steady`` leaves it out.
    """
    if mode not in (PEAK, STEADY):
        raise ValueError(f"unknown accounting mode {mode!r}")
    total = 0
    for layer in state.layers:
        c = layer.compressed
        total += layer.theta16.nbytes
        total += c.theta32.nbytes + c.grad16.nbytes + c.grad32.nbytes
        total += c.adam_m.nbytes + c.adam_v.nbytes
        total += c.ind.indices.nbytes
        if mode == PEAK:
            total += HALF_COPY * len(c.ind)
    return total


@dataclass(frozen=True)
class MemoryReport:
    phi: int
    p: Fraction
    bytes_default: Fraction
    bytes_samo: Fraction
    bytes_saved: Fraction
    savings_fraction: Fraction

    def row(self):
        return [_fmt(self.phi), _fmt(self.p), _fmt(self.bytes_default), _fmt(self.bytes_samo),
                _fmt(self.bytes_saved), _fmt(self.savings_fraction)]


def memory_model(phi, p):
    """Closed-form model-state bytes, dense mixed precision vs compressed.

    Dense: 2+2+4+4+8 = 20 bytes per parameter. Compressed: 18 bytes per kept
    parameter for the compressed states, 4 for its index, 2 for the transient
    half copy, plus 2 bytes per parameter for the dense half weights.
    Exact rational arithmetic throughout.
    """
    p = as_fraction(p)
    if phi < 0:
        raise ValueError("phi must be non-negative")
    if not 0 <= p <= 1:
        raise ValueError(f"sparsity must lie in [0, 1], got {p}")
    phi = Fraction(phi)
    f = 1 - p
    default = 20 * phi
    samo = 24 * f * phi + 2 * phi
    saved = (24 * p - 6) * phi
    assert default - samo == saved
    return MemoryReport(
        phi=phi, p=p, bytes_default=default, bytes_samo=samo, bytes_saved=saved,
        savings_fraction=(24 * p - 6) / 20,
    )


def _fmt(x):
    x = Fraction(x)
    if x.denominator == 1:
        return str(x.numerator)
    return repr(float(x))


def sparsity_grid(p_min, p_max, step):
    """Inclusive exact grid ``p_min, p_min+step, ... <= p_max``."""
    p_min, p_max, step = as_fraction(p_min), as_fraction(p_max), as_fraction(step)
    if not (0 <= p_min <= p_max <= 1) or step <= 0:
        raise ValueError(f"bad sparsity range {p_min}:{p_max}:{step}")
    out = []
    p = p_min
    while p <= p_max:
        out.append(p)
        p += step
    return out


def write_memory_csv(reports, fp):
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(MEMORY_CSV_COLUMNS)
    for r in reports:
        w.writerow(r.row())


def checkpoint_dict(state):
    def floats(a):
        return [float(x) for x in a]

    return {
        "step": state.step,
        "layers": [
            {
                "layer_id": layer.layer_id,
                "shape": list(layer.shape),
                "indices": layer.ind.indices.tolist(),
                "theta32": floats(layer.compressed.theta32),
                "adam_m": floats(layer.compressed.adam_m),
                "adam_v": floats(layer.compressed.adam_v),
            }
            for layer in state.layers
        ],
    }


def save_checkpoint(state, fp):
    json.dump(checkpoint_dict(state), fp)


def load_checkpoint(fp):
    """Rebuild a ModelState; theta16 comes from expand + cast, gradients start at zero."""
    doc = json.load(fp)
    layers = []
    for d in doc["layers"]:
        shape = tuple(d["shape"])
        ind = PrunedIndexSet(d["layer_id"], math.prod(shape), np.asarray(d["indices"], dtype=np.int64))
        comp = CompressedState(
            ind,
            np.asarray(d["theta32"], dtype=SINGLE),
            adam_m=np.asarray(d["adam_m"], dtype=SINGLE),
            adam_v=np.asarray(d["adam_v"], dtype=SINGLE),
        )
        layer = LayerState(None, comp, shape)
        layer.refresh_theta16()
        layers.append(layer)
    return ModelState(layers, step=int(doc.get("step", 0)))
