"""Mixed-precision training of small MLPs on compressed model states.

Two trainers share the same forward/backward kernels:

* ``train`` keeps states compressed. Each parameter gradient is gathered
  into its compressed half buffer the moment it is produced, and the
  optimizer runs on compressed buffers, expanding only the new half weights.
* ``train_reference_masked`` keeps every state dense and applies the pruning
  mask to gradients after backward and to weights after every step.

With identical op ordering the two produce bit-identical results.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import dense
from .dense import HALF, SINGLE, DimensionError
from .pruner import magnitude_prune
from .store import ModelState, compress, measured_bytes

MSE = "mse"
SOFTMAX_CE = "softmax-cross-entropy"


class TrainingStateError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    layers: list  # (in_features, out_features, has_bias)
    loss: str = MSE

    def __post_init__(self):
        self.layers = [(int(i), int(o), bool(b)) for i, o, b in self.layers]
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for (_, prev_out, _), (nxt_in, _, _) in zip(self.layers, self.layers[1:]):
            if prev_out != nxt_in:
                raise DimensionError(f"layer widths do not chain: {prev_out} -> {nxt_in}")
        if any(i <= 0 or o <= 0 for i, o, _ in self.layers):
            raise ValueError("layer widths must be positive")
        if self.loss not in (MSE, SOFTMAX_CE):
            raise ValueError(f"unknown loss {self.loss!r}")

    @classmethod
    def mlp(cls, widths, bias=True, loss=MSE):
        """``ModelSpec.mlp([16, 32, 16, 4])`` -> three linear layers."""
        return cls([(a, b, bias) for a, b in zip(widths, widths[1:])], loss)

    @property
    def in_features(self):
        return self.layers[0][0]

    @property
    def out_features(self):
        return self.layers[-1][1]

    def param_shapes(self):
        """(layer_id, shape, prunable) for every parameter tensor, forward order."""
        out = []
        for i, (fin, fout, bias) in enumerate(self.layers):
            out.append((f"fc{i}.weight", (fout, fin), True))
            if bias:
                out.append((f"fc{i}.bias", (fout,), False))
        return out


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss_scale: float = 2.0**10
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.loss_scale < 1 or math.frexp(self.loss_scale)[0] != 0.5:
            raise ValueError(f"loss_scale must be a power of two >= 1, got {self.loss_scale}")
        if self.learning_rate < 0 or self.epsilon < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate, epsilon and weight_decay must be non-negative")


def init_params(spec, seed):
    """Seeded single-precision init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng([seed, 1])
    params = []
    for layer_id, shape, _ in spec.param_shapes():
        if layer_id.endswith(".weight"):
            bound = 1.0 / math.sqrt(shape[1])
            params.append(rng.uniform(-bound, bound, size=shape).astype(SINGLE))
        else:
            params.append(np.zeros(shape, dtype=SINGLE))
    return params


def prune_model(spec, params, sparsity, scope="per-layer"):
    layers = [(lid, w, prunable) for (lid, _, prunable), w in zip(spec.param_shapes(), params)]
    return magnitude_prune(layers, sparsity, scope)


# --- shared kernels ---------------------------------------------------------

def _relu(z):
    return np.where(z > 0, z, z.dtype.type(0))


def _add_bias(z, b):
    return dense.add(z, np.broadcast_to(b, z.shape))


def _split(spec, weights):
    it = iter(weights)
    for fin, fout, bias in spec.layers:
        yield next(it), (next(it) if bias else None)


def _loss_and_grad(spec, y, targets):
    """Loss and dL/dy, both single precision."""
    y32 = y.astype(SINGLE)
    t32 = np.asarray(targets, dtype=SINGLE)
    if y32.shape != t32.shape:
        raise DimensionError(f"targets {t32.shape} do not match outputs {y32.shape}")
    if spec.loss == MSE:
        d = y32 - t32
        loss = np.mean(d * d, dtype=SINGLE)
        grad = d * SINGLE.type(2.0 / d.size)
    else:
        shifted = y32 - y32.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        s = e.sum(axis=1, keepdims=True)
        log_p = shifted - np.log(s)
        n = y32.shape[0]
        loss = -np.sum(t32 * log_p, dtype=SINGLE) / SINGLE.type(n)
        grad = (e / s - t32) / SINGLE.type(n)
    return SINGLE.type(loss), grad.astype(SINGLE)


def forward_pass(spec, weights, x, targets):
    """Dense forward in the weights' precision. Returns (activations, loss)."""
    if x.ndim != 2 or x.shape[1] != spec.in_features:
        raise DimensionError(f"batch shape {x.shape} does not match input width {spec.in_features}")
    h = dense.cast(x, weights[0].dtype)
    acts = []
    last = len(spec.layers) - 1
    for i, (w, b) in enumerate(_split(spec, weights)):
        z = dense.matmul(h, w.T)
        if b is not None:
            z = _add_bias(z, b)
        acts.append((h, z))
        h = z if i == last else _relu(z)
    loss, dy = _loss_and_grad(spec, h, targets)
    return Activations(acts, h, dy), loss


@dataclass
class Activations:
    layers: list  # (layer input, pre-activation) per linear layer
    output: np.ndarray
    dloss: np.ndarray  # dL/d(output), single precision


class GradientResidency:
    """Counts dense gradient buffers alive at once during backward."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def acquire(self):
        self.live += 1
        self.peak = max(self.peak, self.live)

    def release(self):
        self.live -= 1


def backward_pass(spec, weights, acts, loss_scale, sink, residency=None):
    """Backpropagate the scaled loss, last layer first.

    ``sink(param_index, dense_grad)`` receives each parameter gradient as soon
    as it exists; the buffer is dropped when ``sink`` returns.
    """
    residency = residency or GradientResidency()
    dtype = weights[0].dtype
    g = dense.cast(acts.dloss * SINGLE.type(loss_scale), dtype)
    pairs = list(_split(spec, weights))
    index = len(weights)
    for i in reversed(range(len(pairs))):
        w, b = pairs[i]
        h, z = acts.layers[i]
        if i != len(pairs) - 1:
            g = np.where(z > 0, g, dtype.type(0))
        if b is not None:
            index -= 1
            bias_index = index
        index -= 1
        residency.acquire()
        dw = dense.matmul(np.ascontiguousarray(g.T), h)
        sink(index, dw)
        del dw
        residency.release()
        if b is not None:
            residency.acquire()
            db = dense.sum_rows(g)
            sink(bias_index, db)
            del db
            residency.release()
        if i:
            g = dense.matmul(g, w)
    return residency


def adam_update(theta, grad, m, v, step, cfg):
    """In-place Adam with bias correction; elementwise, so dense and
    compressed buffers get identical per-element results."""
    f32 = SINGLE.type
    m *= f32(cfg.beta1)
    m += f32(1.0 - cfg.beta1) * grad
    v *= f32(cfg.beta2)
    v += f32(1.0 - cfg.beta2) * (grad * grad)
    bc1 = f32(1.0 - cfg.beta1**step)
    bc2 = f32(1.0 - cfg.beta2**step)
    m_hat = m / bc1
    v_hat = v / bc2
    update = m_hat / (np.sqrt(v_hat) + f32(cfg.epsilon))
    if cfg.weight_decay:
        theta -= f32(cfg.learning_rate * cfg.weight_decay) * theta
    theta -= f32(cfg.learning_rate) * update


def unscale(grad16, loss_scale):
    return dense.cast(grad16, "single") / SINGLE.type(loss_scale)


# --- compressed trainer -----------------------------------------------------

def forward(state, spec, batch, targets):
    acts, loss = forward_pass(spec, [layer.theta16 for layer in state.layers], batch, targets)
    state.pending = acts
    return acts, loss


def backward(state, spec, acts=None, loss_scale=1.0):
    """Fill each layer's compressed grad16; dense gradients never outlive their layer."""
    acts = acts if acts is not None else getattr(state, "pending", None)
    if acts is None:
        raise TrainingStateError("backward called without a preceding forward")
    layers = state.layers

    def sink(i, g):
        layers[i].compressed.grad16 = compress(g, layers[i].ind)

    residency = backward_pass(spec, [layer.theta16 for layer in layers], acts, loss_scale, sink)
    state.pending = None
    state.peak_dense_grads = residency.peak
    return residency


def optimizer_step(state, cfg):
    """Upscale, Adam on compressed buffers, expand the new half weights.

    Returns False (and counts a skip) when any unscaled gradient is non-finite.
    """
    for layer in state.layers:
        c = layer.compressed
        c.grad32 = unscale(c.grad16, cfg.loss_scale)
    finite = all(np.isfinite(layer.compressed.grad32).all() for layer in state.layers)
    if finite:
        state.step += 1
        for layer in state.layers:
            c = layer.compressed
            adam_update(c.theta32, c.grad32, c.adam_m, c.adam_v, state.step, cfg)
            layer.refresh_theta16()
    else:
        state.skipped += 1
    for layer in state.layers:
        layer.compressed.grad16 = np.zeros_like(layer.compressed.grad16)
    return finite


# --- runs -------------------------------------------------------------------

@dataclass
class Dataset:
    features: np.ndarray  # (n, in) single
    targets: np.ndarray  # (n, out) single

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=SINGLE)
        self.targets = np.asarray(self.targets, dtype=SINGLE)
        if self.features.ndim != 2 or self.targets.ndim != 2 or len(self.features) != len(self.targets):
            raise DimensionError("features and targets must be 2-D with equal row counts")

    def __len__(self):
        return len(self.features)

    def batch(self, step, batch_size):
        n = len(self)
        rows = (np.arange(batch_size) + step * batch_size) % n
        return dense.cast(self.features[rows], "half"), self.targets[rows]


def synthetic_regression(n_samples, n_features, n_targets, seed, noise=0.01):
    rng = np.random.default_rng([seed, 0])
    x = rng.standard_normal((n_samples, n_features))
    w = rng.standard_normal((n_features, n_targets)) / math.sqrt(n_features)
    y = np.tanh(x @ w) + noise * rng.standard_normal((n_samples, n_targets))
    return Dataset(x.astype(SINGLE), y.astype(SINGLE))


SAMD_MAGIC = b"SAMD"
_SAMD_HEADER = struct.Struct("<4sIII")


def write_samd(fp, data):
    n, nf = data.features.shape
    fp.write(_SAMD_HEADER.pack(SAMD_MAGIC, n, nf, data.targets.shape[1]))
    fp.write(data.features.astype("<f4").tobytes())
    fp.write(data.targets.astype("<f4").tobytes())


def read_samd(fp):
    magic, n, nf, nt = _SAMD_HEADER.unpack(fp.read(_SAMD_HEADER.size))
    if magic != SAMD_MAGIC:
        raise ValueError(f"bad dataset magic {magic!r}")
    x = np.frombuffer(fp.read(4 * n * nf), dtype="<f4")
    y = np.frombuffer(fp.read(4 * n * nt), dtype="<f4")
    if x.size != n * nf or y.size != n * nt:
        raise ValueError("truncated dataset file")
    return Dataset(x.reshape(n, nf), y.reshape(n, nt))


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    skipped: bool
    peak_state_bytes: int


@dataclass
class RunResult:
    records: list = field(default_factory=list)
    params: list = field(default_factory=list)  # final dense single-precision parameters
    state: object = None
    diverged: bool = False
    peak_dense_grads: int = 0

    @property
    def losses(self):
        return [r.loss for r in self.records]


def _grad_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def train(spec, data, steps, ind, cfg, init, batch_size=32, on_step=None):
    """Compressed-state training; ``init`` holds dense single-precision parameters."""
    state = ModelState.from_dense(init, ind)
    result = RunResult(state=state)
    for step in range(steps):
        x, t = data.batch(step, batch_size)
        acts, loss = forward(state, spec, x, t)
        if not np.isfinite(loss):
            result.diverged = True
            break
        backward(state, spec, acts, cfg.loss_scale)
        result.peak_dense_grads = max(result.peak_dense_grads, state.peak_dense_grads)
        ok = optimizer_step(state, cfg)
        rec = StepRecord(step, float(loss), _grad_norm([l.compressed.grad32 for l in state.layers]),
                         not ok, measured_bytes(state))
        result.records.append(rec)
        if on_step:
            on_step(rec)
    result.params = [layer.dense_theta32() for layer in state.layers]
    return result


def train_reference_masked(spec, data, steps, ind, cfg, init, batch_size=32):
    """Dense-state oracle: mask gradients after backward, weights after each step."""
    masks = [s.mask().reshape(np.shape(w)) for s, w in zip(ind, init, strict=True)]
    zero32 = SINGLE.type(0)
    theta32 = [np.where(m, np.asarray(w, dtype=SINGLE), zero32) for w, m in zip(init, masks)]
    theta16 = [dense.cast(w, "half") for w in theta32]
    adam_m = [np.zeros_like(w) for w in theta32]
    adam_v = [np.zeros_like(w) for w in theta32]
    grad16 = [None] * len(theta32)
    result = RunResult()
    t = 0
    for step in range(steps):
        x, tgt = data.batch(step, batch_size)
        acts, loss = forward_pass(spec, theta16, x, tgt)
        if not np.isfinite(loss):
            result.diverged = True
            break

        def sink(i, g):
            grad16[i] = np.where(masks[i], g, HALF.type(0))

        backward_pass(spec, theta16, acts, cfg.loss_scale, sink)
        grad32 = [unscale(g, cfg.loss_scale) for g in grad16]
        ok = all(np.isfinite(g).all() for g in grad32)
        if ok:
            t += 1
            for i in range(len(theta32)):
                adam_update(theta32[i], grad32[i], adam_m[i], adam_v[i], t, cfg)
                theta32[i] = np.where(masks[i], theta32[i], zero32)
                theta16[i] = dense.cast(theta32[i], "half")
        result.records.append(StepRecord(step, float(loss), _grad_norm(grad32), not ok, 0))
    result.params = theta32
    return result


def dense_gradients(spec, params, x, targets):
    """Loss and unscaled parameter gradients, computed in the precision of ``params``."""
    params = [np.asarray(p) for p in params]
    acts, loss = forward_pass(spec, params, x, targets)
    grads = [None] * len(params)

    def sink(i, g):
        grads[i] = g

    backward_pass(spec, params, acts, 1.0, sink)
    return loss, grads


def max_relative_deviation(a_list, b_list):
    """max |a - b| / max(|a|, |b|) over all elements (0/0 counts as 0)."""
    worst = 0.0
    for a, b in zip(a_list, b_list, strict=True):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        denom = np.maximum(np.abs(a), np.abs(b))
        diff = np.abs(a - b)
        rel = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst
