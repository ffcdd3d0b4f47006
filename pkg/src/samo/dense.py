"""Deterministic dense numeric core.

Tensors are plain numpy arrays restricted to ``float16`` (IEEE binary16) and
``float32`` (IEEE binary32), C-contiguous/row-major. numpy's half type is a
software binary16 with round-to-nearest-even conversions, so results do not
depend on the host's FP16 hardware.
"""

import numpy as np

HALF = np.dtype(np.float16)
SINGLE = np.dtype(np.float32)
_DTYPES = {"half": HALF, "single": SINGLE, HALF: HALF, SINGLE: SINGLE}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def as_dtype(dtype):
    try:
        return _DTYPES[dtype if isinstance(dtype, str) else np.dtype(dtype)]
    except (KeyError, TypeError):
        raise TypeError(f"unsupported dtype {dtype!r}; expected half or single") from None


def tensor(values, dtype="single"):
    """Build a row-major tensor of the given precision."""
    return np.ascontiguousarray(np.asarray(values, dtype=as_dtype(dtype)))


def zeros(shape, dtype="single"):
    return np.zeros(shape, dtype=as_dtype(dtype))


def _check_float(t):
    if not isinstance(t, np.ndarray):
        raise TypeError(f"expected ndarray, got {type(t).__name__}")
    as_dtype(t.dtype)


def cast(t, dtype):
    """Convert precision. single->half rounds to nearest even (overflow gives
    +-inf); half->single is exact."""
    _check_float(t)
    with np.errstate(over="ignore"):
        return np.ascontiguousarray(t.astype(as_dtype(dtype)))


def matmul(a, b):
    """Matrix product with single-precision accumulation.

    Products are summed over the inner dimension in increasing k order, each
    partial sum rounded to single precision, and the final sum is rounded
    once to the operand precision. Half inputs give a half result.
    """
    _check_float(a)
    _check_float(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"mixed operand precisions {a.dtype} and {b.dtype}")
    a32 = a.astype(SINGLE)
    b32 = b.astype(SINGLE)
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=SINGLE)
    # Separate multiply and add ufuncs: no fused multiply-add, fixed order.
    for k in range(a.shape[1]):
        acc += np.multiply.outer(a32[:, k], b32[k, :])
    return cast(acc, a.dtype)


def sum_rows(t):
    """Column sums of a 2-D tensor, accumulated row by row in single precision
    and rounded once to the operand precision."""
    _check_float(t)
    if t.ndim != 2:
        raise DimensionError(f"sum_rows expects a 2-D tensor, got {t.shape}")
    acc = np.zeros(t.shape[1], dtype=SINGLE)
    for row in t.astype(SINGLE):
        acc += row
    return cast(acc, t.dtype)


def _binary(a, b):
    _check_float(a)
    _check_float(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"mixed operand precisions {a.dtype} and {b.dtype}")


def add(a, b):
    _binary(a, b)
    return np.add(a, b)


def sub(a, b):
    _binary(a, b)
    return np.subtract(a, b)


def mul(a, b):
    _binary(a, b)
    return np.multiply(a, b)


def div(a, b):
    _binary(a, b)
    return np.divide(a, b)


def scale(a, s):
    """Multiply by a scalar given in the operand's precision."""
    _check_float(a)
    return np.multiply(a, a.dtype.type(s))


def sqrt(a):
    _check_float(a)
    return np.sqrt(a)


def greater(a, b):
    _binary(a, b)
    return np.greater(a, b)
