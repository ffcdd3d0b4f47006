import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samo.dense import DimensionError
from samo.pruner import PrunedIndexSet
from samo.store import (
    ModelState,
    compress,
    expand,
    load_checkpoint,
    measured_bytes,
    memory_model,
    save_checkpoint,
    sparsity_grid,
    write_memory_csv,
)


def gather_oracle(x, idx):
    flat = list(np.asarray(x).reshape(-1))
    return [flat[i] for i in idx]


def random_index_set(rng, n, name="w"):
    k = int(rng.integers(0, n + 1))
    return PrunedIndexSet(name, n, np.sort(rng.choice(n, size=k, replace=False)))


def test_compress_example():
    ind = PrunedIndexSet("w", 4, [0, 3])
    assert compress(np.array([1.0, 2.0, 3.0, 4.0]), ind).tolist() == [1.0, 4.0]


def test_compress_full_index_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert compress(x, PrunedIndexSet.full("w", 6)).tolist() == x.reshape(-1).tolist()


def test_compress_random_matches_gather_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.standard_normal(16).astype(np.float32)
        ind = random_index_set(rng, 16)
        assert compress(x, ind).tolist() == gather_oracle(x, ind.indices)


def test_compress_leaves_input_untouched():
    x = np.arange(4.0)
    out = compress(x, PrunedIndexSet("w", 4, [1, 2]))
    out[:] = -1
    assert x.tolist() == [0, 1, 2, 3]


def test_compress_length_mismatch():
    with pytest.raises(DimensionError):
        compress(np.zeros(5), PrunedIndexSet("w", 4, [0]))


def test_expand_example():
    out = expand(np.array([1.0, 4.0]), PrunedIndexSet("w", 4, [0, 3]), (2, 2))
    assert out.tolist() == [[1, 0], [0, 4]]


def test_expand_empty():
    out = expand(np.zeros(0, dtype=np.float16), PrunedIndexSet("w", 6, []), (2, 3))
    assert out.dtype == np.float16 and not out.any()


def test_expand_length_mismatch():
    with pytest.raises(DimensionError):
        expand(np.zeros(3), PrunedIndexSet("w", 4, [0, 1]), (4,))
    with pytest.raises(DimensionError):
        expand(np.zeros(2), PrunedIndexSet("w", 4, [0, 1]), (5,))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=3), st.integers(0, 2**32 - 1),
       st.sampled_from(["float16", "float32"]))
def test_roundtrips(shape, seed, dtype):
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    n = int(np.prod(shape))
    x = rng.standard_normal(shape).astype(dtype)
    ind = random_index_set(rng, n)
    masked = np.where(ind.mask().reshape(shape), x, np.zeros((), dtype))
    assert expand(compress(x, ind), ind, shape).tobytes() == masked.tobytes()
    v = rng.standard_normal(len(ind)).astype(dtype)
    assert compress(expand(v, ind, shape), ind).tobytes() == v.tobytes()


def one_layer_state(phi, kept):
    rng = np.random.default_rng(phi)
    ind = PrunedIndexSet("w", phi, np.sort(rng.choice(phi, size=kept, replace=False)))
    return ModelState.from_dense([rng.standard_normal(phi).astype(np.float32)], [ind])


def test_measured_bytes_p09():
    assert measured_bytes(one_layer_state(100, 10)) == 440
    assert memory_model(100, 0.9).bytes_samo == 440


def test_measured_bytes_p0():
    assert measured_bytes(one_layer_state(100, 100)) == 2600
    assert memory_model(100, 0).bytes_samo == 2600


def test_measured_bytes_steady_mode():
    assert measured_bytes(one_layer_state(100, 10), "steady") == 420


def test_measured_bytes_empty():
    assert measured_bytes(ModelState()) == 0


@pytest.mark.parametrize("p, frac", [("0.9", Fraction(78, 100)), ("0.8", Fraction(66, 100)), ("0.25", 0)])
def test_memory_model_reported_points(p, frac):
    assert memory_model(10**9, p).savings_fraction == frac
    assert memory_model(10**9, float(p)).savings_fraction == frac


def test_memory_model_invariants():
    for p in sparsity_grid(0, 1, "0.01"):
        r = memory_model(1000, p)
        assert r.bytes_default == 20000
        assert r.bytes_samo == 24 * (1 - p) * 1000 + 2000
        assert r.bytes_default - r.bytes_samo == r.bytes_saved == (24 * p - 6) * 1000


def test_memory_model_savings_monotone_and_signed():
    grid = sparsity_grid(0, 1, "0.05")
    saved = [memory_model(10, p).bytes_saved for p in grid]
    assert all(a < b for a, b in zip(saved, saved[1:]))
    assert all((s < 0) == (p < Fraction(1, 4)) for s, p in zip(saved, grid))


def test_memory_csv_format():
    buf = io.StringIO()
    write_memory_csv([memory_model(1000, "0.9")], buf)
    assert buf.getvalue() == "phi,p,bytes_default,bytes_samo,bytes_saved,savings_fraction\n1000,0.9,20000,4400,15600,0.78\n"


def test_grid_inclusive_and_single():
    assert len(sparsity_grid(0, 1, "0.05")) == 21
    assert sparsity_grid("0.2", "0.3", "0.5") == [Fraction(1, 5)]


def test_index_shared_across_buffers():
    state = one_layer_state(20, 5)
    layer = state.layers[0]
    assert layer.compressed.ind is layer.ind
    for buf in layer.compressed.buffers().values():
        assert buf.shape == (len(layer.ind),)


def test_theta16_invariant():
    state = one_layer_state(50, 7)
    layer = state.layers[0]
    mask = layer.ind.mask()
    assert not layer.theta16[~mask].any()
    assert np.array_equal(layer.theta16[mask], layer.compressed.theta32.astype(np.float16))


def test_checkpoint_roundtrip():
    state = one_layer_state(30, 9)
    state.layers[0].compressed.adam_m[:] = 0.125
    state.step = 4
    buf = io.StringIO()
    save_checkpoint(state, buf)
    buf.seek(0)
    back = load_checkpoint(buf)
    a, b = state.layers[0], back.layers[0]
    assert back.step == 4 and b.shape == a.shape and b.ind == a.ind
    assert a.compressed.theta32.tobytes() == b.compressed.theta32.tobytes()
    assert a.compressed.adam_m.tobytes() == b.compressed.adam_m.tobytes()
    assert a.theta16.tobytes() == b.theta16.tobytes()
    assert not b.compressed.grad16.any()
