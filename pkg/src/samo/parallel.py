"""Cost model and simulator for hybrid inter-layer + data parallel training.

A batch of size B is split across ``G_data`` pipeline replicas; each replica
partitions the layers evenly over ``G_inter`` GPUs and streams microbatches of
size ``mbs`` through a 1F1B schedule. Compressed model states shrink the
per-replica memory footprint, which admits smaller ``G_inter``, fewer and
shorter pipeline messages, a smaller bubble, and a smaller all-reduce.

Times accept ints/Fractions (exact results) or floats.
"""

import heapq
from dataclasses import dataclass, fields
from fractions import Fraction

from .pruner import as_fraction
from .store import memory_model


class ConfigurationError(ValueError):
    pass


class InfeasibleError(ConfigurationError):
    """No pipeline depth fits the model state in GPU memory."""


@dataclass(frozen=True)
class ClusterSpec:
    G: int
    mem_cap: float  # bytes per GPU
    link_bw_p2p: float  # bytes/s
    link_bw_coll: float  # bytes/s
    link_latency: float = 0.0  # s
    flops_per_gpu: float = 1.0

    def __post_init__(self):
        if int(self.G) != self.G or self.G < 1:
            raise ConfigurationError(f"G must be a positive integer, got {self.G}")
        for name in ("mem_cap", "link_bw_p2p", "link_bw_coll", "flops_per_gpu"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.link_latency < 0:
            raise ConfigurationError("link_latency must be non-negative")


# Summit inter-node injection bandwidth, 16 GB of HBM per V100.
SUMMIT = dict(mem_cap=16e9, link_bw_p2p=12.5e9, link_bw_coll=12.5e9, link_latency=5e-6, flops_per_gpu=125e12)


@dataclass(frozen=True)
class WorkloadSpec:
    phi: int
    p: float
    B: int
    mbs: int
    t_f: float  # full-model forward of one microbatch, s
    t_b: float  # full-model backward of one microbatch, s
    bytes_activation_msg: float = 0.0
    overhead_frac: float = 0.10
    act_bytes_per_layer_per_microbatch: float = 0.0
    p2p_overlap: float = 0.0

    def __post_init__(self):
        if self.phi < 0 or self.B < 1 or self.mbs < 1:
            raise ConfigurationError("phi must be >= 0, B and mbs >= 1")
        if not 0 <= as_fraction(self.p) < 1:
            raise ConfigurationError(f"sparsity must lie in [0, 1), got {self.p}")
        if self.t_f <= 0 or self.t_b <= 0:
            raise ConfigurationError("t_f and t_b must be positive")
        if self.overhead_frac < 0 or not 0 <= self.p2p_overlap <= 1:
            raise ConfigurationError("overhead_frac must be >= 0 and p2p_overlap in [0, 1]")


@dataclass(frozen=True)
class ParallelConfig:
    G_inter: int
    G_data: int

    @property
    def G(self):
        return self.G_inter * self.G_data


@dataclass(frozen=True)
class BatchTimeBreakdown:
    G_inter: int
    G_data: int
    compute: float
    p2p_send: float
    bubble: float
    collective: float
    overhead: float

    @property
    def total(self):
        return self.compute + self.p2p_send + self.bubble + self.collective + self.overhead

    @property
    def communication(self):
        return self.p2p_send + self.bubble + self.collective


def divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def bubble_time(G_inter, t_f, t_b):
    """Idle time per GPU: forward+backward of G_inter - 1 microbatches at
    per-stage cost (t_f + t_b) / G_inter."""
    if G_inter < 1:
        raise ConfigurationError("G_inter must be >= 1")
    return (t_f + t_b) * (1 - Fraction(1, G_inter))


def microbatches_per_gpu(B, mbs, G_data):
    n, rem = divmod(B, mbs * G_data)
    if rem or n == 0:
        raise ConfigurationError(f"batch {B} does not split into microbatches of {mbs} over {G_data} replicas")
    return n


def send_time(B, mbs, G, G_inter, msg_bytes, bw, latency=0.0):
    """Point-to-point time per GPU: 4 messages (2 forward, 2 backward) per
    microbatch, each costing latency + bytes / bandwidth."""
    if G % G_inter:
        raise ConfigurationError(f"G_inter={G_inter} does not divide G={G}")
    n = microbatches_per_gpu(B, mbs, G // G_inter)
    return 4 * n * (latency + msg_bytes / bw)


def allreduce_elements(phi, p, G_inter, samo_enabled):
    """Gradient elements each GPU contributes to its data-parallel all-reduce."""
    kept = (1 - as_fraction(p)) * phi if samo_enabled else Fraction(phi)
    return kept / G_inter


def allreduce_volume(msg_elements, G_data, bytes_per_element=2):
    """Bytes each GPU sends in a ring all-reduce (reduce-scatter + all-gather)."""
    return Fraction(2 * (G_data - 1), G_data) * msg_elements * bytes_per_element


def allreduce_time(msg_elements, G_data, bw, latency=0.0, bytes_per_element=2):
    if G_data < 1:
        raise ConfigurationError("G_data must be >= 1")
    if G_data == 1:
        return 0
    vol = allreduce_volume(Fraction(msg_elements), G_data, bytes_per_element)
    return vol / bw + 2 * (G_data - 1) * latency


# --- event-driven pipeline --------------------------------------------------

@dataclass(frozen=True)
class TimelineEvent:
    gpu: int
    microbatch: int  # -1 for idle spans
    kind: str  # F, B or idle
    start: float
    end: float


@dataclass
class PipelineResult:
    events: list
    makespan: float
    bubble: list  # idle time per GPU

    def timeline(self, with_idle=True):
        """Events sorted by (gpu, start), with idle gaps filled in."""
        out = []
        for gpu in range(len(self.bubble)):
            t = 0
            for ev in sorted((e for e in self.events if e.gpu == gpu), key=lambda e: e.start):
                if with_idle and ev.start > t:
                    out.append(TimelineEvent(gpu, -1, "idle", t, ev.start))
                out.append(ev)
                t = ev.end
            if with_idle and t < self.makespan:
                out.append(TimelineEvent(gpu, -1, "idle", t, self.makespan))
        return out


def _one_f_one_b_order(stage, n_stages, n_mb):
    warmup = min(n_stages - stage - 1, n_mb)
    order = [("F", m) for m in range(warmup)]
    for k in range(n_mb - warmup):
        order.append(("F", warmup + k))
        order.append(("B", k))
    order.extend(("B", m) for m in range(n_mb - warmup, n_mb))
    return order


def simulate_pipeline(G_inter, n_microbatches, t_f_stage, t_b_stage, link_delay=0):
    """Run a 1F1B schedule on G_inter uniform stages.

    A stage runs its next scheduled op once it is free and the op's input has
    arrived (activation from upstream for F, gradient from downstream for B).
    Bubble per GPU is makespan minus busy time.
    """
    if G_inter < 1 or n_microbatches < 1:
        raise ConfigurationError("need G_inter >= 1 and n_microbatches >= 1")
    S, n = G_inter, n_microbatches
    orders = [_one_f_one_b_order(s, S, n) for s in range(S)]
    cursor = [0] * S
    free_at = [0] * S
    done = {}  # (kind, stage, mb) -> finish time
    events = []
    # (time, seq, kind, stage, mb): seq makes ordering deterministic
    queue = []
    seq = 0

    def dep_ready(stage, kind, mb):
        if kind == "F":
            return 0 if stage == 0 else _arrival(("F", stage - 1, mb))
        if stage == S - 1:
            return done.get(("F", stage, mb))
        return _arrival(("B", stage + 1, mb))

    def _arrival(key):
        t = done.get(key)
        return None if t is None else t + link_delay

    def try_start(stage):
        nonlocal seq
        if cursor[stage] >= len(orders[stage]) or free_at[stage] is None:
            return
        kind, mb = orders[stage][cursor[stage]]
        ready = dep_ready(stage, kind, mb)
        if ready is None:
            return
        start = max(free_at[stage], ready)
        end = start + (t_f_stage if kind == "F" else t_b_stage)
        free_at[stage] = None  # busy
        events.append(TimelineEvent(stage, mb, kind, start, end))
        heapq.heappush(queue, (end, seq, kind, stage, mb))
        seq += 1

    for s in range(S):
        try_start(s)
    while queue:
        end, _, kind, stage, mb = heapq.heappop(queue)
        done[(kind, stage, mb)] = end
        free_at[stage] = end
        cursor[stage] += 1
        for s in sorted({stage, stage - 1, stage + 1}):
            if 0 <= s < S:
                try_start(s)

    if any(c != len(o) for c, o in zip(cursor, orders)):
        raise RuntimeError("pipeline schedule deadlocked")
    makespan = max(e.end for e in events)
    busy = n * (t_f_stage + t_b_stage)
    return PipelineResult(events, makespan, [makespan - busy] * S)


# --- configuration and breakdown --------------------------------------------

def model_state_bytes(phi, p, samo_enabled):
    return memory_model(phi, p).bytes_samo if samo_enabled else Fraction(20 * phi)


def min_feasible_g_inter(phi, p, samo_enabled, cluster, act_term=0):
    """Smallest divisor d of G with state_bytes / d + act_term <= mem_cap."""
    need = model_state_bytes(phi, p, samo_enabled)
    for d in divisors(int(cluster.G)):
        if need / d + Fraction(act_term) <= Fraction(cluster.mem_cap):
            return d
    mode = "samo" if samo_enabled else "dense"
    raise InfeasibleError(f"{mode}: {float(need):.4g} state bytes do not fit on {cluster.G} GPUs of {cluster.mem_cap:.4g} bytes")


def batch_breakdown(workload, cluster, samo_enabled, G_inter=None):
    """Per-GPU batch time split into compute, p2p, bubble, collective and
    compression overhead. ``G_inter`` defaults to the smallest feasible depth."""
    w, c = workload, cluster
    if G_inter is None:
        G_inter = min_feasible_g_inter(w.phi, w.p, samo_enabled, c, w.act_bytes_per_layer_per_microbatch)
    if c.G % G_inter:
        raise ConfigurationError(f"G_inter={G_inter} does not divide G={c.G}")
    G_data = c.G // G_inter
    n = microbatches_per_gpu(w.B, w.mbs, G_data)
    compute = n * (w.t_f + w.t_b) * Fraction(1, G_inter)
    bubble = bubble_time(G_inter, w.t_f, w.t_b)
    if G_inter > 1:
        p2p = (1 - w.p2p_overlap) * send_time(w.B, w.mbs, c.G, G_inter, w.bytes_activation_msg,
                                               c.link_bw_p2p, c.link_latency)
    else:
        p2p = 0
    elements = allreduce_elements(w.phi, w.p, G_inter, samo_enabled)
    collective = allreduce_time(elements, G_data, c.link_bw_coll, c.link_latency)
    overhead = w.overhead_frac * n * w.t_b * Fraction(1, G_inter) if samo_enabled else 0
    return BatchTimeBreakdown(G_inter, G_data, compute, p2p, bubble, collective, overhead)


def phase_reductions(dense, samo):
    """Per-phase time saved by SAMO as fractions of the dense batch time."""
    total = dense.total
    return {
        "p2p": (dense.p2p_send - samo.p2p_send) / total,
        "bubble": (dense.bubble - samo.bubble) / total,
        "collective": (dense.collective - samo.collective) / total,
        "communication": (dense.communication - samo.communication) / total,
        "overhead": samo.overhead / total,
        "speedup": (dense.total - samo.total) / total,
    }


def from_dict(cls, d):
    """Build a spec dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigurationError(f"{cls.__name__} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigurationError(str(e)) from None
