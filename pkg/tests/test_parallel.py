from fractions import Fraction

import pytest
from conftest import cluster_dict, workload_dict

from samo.parallel import (
    ClusterSpec,
    ConfigurationError,
    InfeasibleError,
    WorkloadSpec,
    allreduce_elements,
    allreduce_time,
    allreduce_volume,
    batch_breakdown,
    bubble_time,
    divisors,
    from_dict,
    microbatches_per_gpu,
    min_feasible_g_inter,
    send_time,
    simulate_pipeline,
)


def ring_allreduce_oracle(n_bytes, P, bw):
    """Step-by-step ring: P-1 reduce-scatter + P-1 all-gather steps, each
    moving one chunk of n_bytes / P."""
    t = 0.0
    for _ in range(2 * (P - 1)):
        t += (n_bytes / P) / bw
    return t


def test_bubble_examples():
    assert bubble_time(3, 3, 6) == 6
    assert bubble_time(1, 5.0, 7.0) == 0
    assert bubble_time(4, 1, 2) == Fraction(9, 4)


def test_message_count():
    assert microbatches_per_gpu(16, 2, 2) * 4 == 16
    assert send_time(16, 2, 4, 2, msg_bytes=1, bw=1) == 16


def test_single_microbatch_full_pipeline():
    assert send_time(8, 8, 4, 4, msg_bytes=1, bw=1) == 4


def test_send_time_doubles_with_g_inter():
    a = send_time(64, 2, 16, 2, 1e6, 1e9)
    b = send_time(64, 2, 16, 4, 1e6, 1e9)
    assert b == 2 * a


def test_send_time_non_divisible():
    with pytest.raises(ConfigurationError):
        send_time(10, 3, 4, 2, 1, 1)
    with pytest.raises(ConfigurationError):
        send_time(16, 1, 6, 4, 1, 1)


def test_allreduce_single_replica_is_free():
    assert allreduce_time(10**6, 1, 1e9, 1e-3) == 0


def test_allreduce_dense_example():
    elements = allreduce_elements(10**6, 0, 1, samo_enabled=False)
    t = allreduce_time(elements, 4, 1e9, 0)
    assert t == pytest.approx(ring_allreduce_oracle(2e6, 4, 1e9), rel=1e-12)
    assert t == pytest.approx(3e-3, rel=1e-12)


def test_allreduce_latency_term():
    assert allreduce_time(0, 4, 1e9, 1e-6) == pytest.approx(6e-6)


def test_samo_allreduce_volume_is_tenth():
    dense = allreduce_volume(allreduce_elements(10**6, "0.9", 4, False), 8)
    samo = allreduce_volume(allreduce_elements(10**6, "0.9", 4, True), 8)
    assert samo == dense / 10


def test_three_stage_pipeline():
    r = simulate_pipeline(3, 5, 1, 2)
    assert r.bubble == [6, 6, 6]
    assert r.makespan == 5 * 3 + 6
    idle = {}
    for e in r.timeline():
        if e.kind == "idle":
            idle[e.gpu] = idle.get(e.gpu, 0) + e.end - e.start
    assert idle == {0: 6, 1: 6, 2: 6}


def test_single_stage_pipeline():
    r = simulate_pipeline(1, 7, 1, 2)
    assert r.bubble == [0] and r.makespan == 21


@pytest.mark.parametrize("G", range(2, 9))
def test_pipeline_matches_formula(G):
    for n in range(G, 33):
        r = simulate_pipeline(G, n, 1, 2)
        assert r.bubble == [bubble_time(G, G * 1, G * 2)] * G


def test_pipeline_schedule_is_1f1b():
    r = simulate_pipeline(4, 8, 1, 2)
    last = [e for e in r.timeline(with_idle=False) if e.gpu == 3]
    assert [e.kind for e in last] == ["F", "B"] * 8
    # every stage processes each microbatch forward before backward, in order
    for gpu in range(4):
        evs = [e for e in r.events if e.gpu == gpu]
        assert [e.microbatch for e in evs if e.kind == "F"] == list(range(8))
        assert [e.microbatch for e in evs if e.kind == "B"] == list(range(8))


def test_pipeline_dependencies_respected():
    r = simulate_pipeline(5, 9, 2, 3, link_delay=1)
    end = {(e.kind, e.gpu, e.microbatch): e.end for e in r.events}
    for e in r.events:
        if e.kind == "F" and e.gpu > 0:
            assert e.start >= end[("F", e.gpu - 1, e.microbatch)] + 1
        if e.kind == "B" and e.gpu < 4:
            assert e.start >= end[("B", e.gpu + 1, e.microbatch)] + 1
    per_gpu = {}
    for e in sorted(r.events, key=lambda e: e.start):
        assert e.start >= per_gpu.get(e.gpu, 0)
        per_gpu[e.gpu] = e.end


def test_pipeline_deterministic():
    assert simulate_pipeline(6, 13, 1, 2).events == simulate_pipeline(6, 13, 1, 2).events


def test_min_feasible_g_inter():
    phi = 1000
    roomy = ClusterSpec(G=8, mem_cap=20 * phi + 1, link_bw_p2p=1, link_bw_coll=1)
    assert min_feasible_g_inter(phi, 0.9, False, roomy) == 1
    tight = ClusterSpec(G=8, mem_cap=20 * phi / 4 + 10, link_bw_p2p=1, link_bw_coll=1)
    assert min_feasible_g_inter(phi, 0.9, False, tight, act_term=10) == 4
    assert min_feasible_g_inter(phi, 0.9, True, tight, act_term=10) == 1
    starved = ClusterSpec(G=8, mem_cap=20 * phi / 8 - 1, link_bw_p2p=1, link_bw_coll=1)
    with pytest.raises(InfeasibleError):
        min_feasible_g_inter(phi, 0, False, starved)


@pytest.mark.parametrize("p", ["0.3", "0.5", "0.9", "0.99"])
@pytest.mark.parametrize("cap_div", [1, 2, 3, 5, 16, 64])
def test_samo_never_needs_deeper_pipeline(p, cap_div):
    cluster = ClusterSpec(G=64, mem_cap=20 * 10**6 / cap_div + 1, link_bw_p2p=1, link_bw_coll=1)
    assert min_feasible_g_inter(10**6, p, True, cluster) <= min_feasible_g_inter(10**6, p, False, cluster)


def test_breakdown_components_sum():
    c = from_dict(ClusterSpec, cluster_dict())
    w = from_dict(WorkloadSpec, workload_dict())
    for samo in (False, True):
        b = batch_breakdown(w, c, samo)
        assert b.total == pytest.approx(b.compute + b.p2p_send + b.bubble + b.collective + b.overhead)
        assert min(b.compute, b.p2p_send, b.bubble, b.collective, b.overhead) >= 0


def test_breakdown_degenerate_sparsity():
    c = ClusterSpec(G=16, mem_cap=1e12, link_bw_p2p=1e9, link_bw_coll=1e9, link_latency=1e-6)
    w = WorkloadSpec(phi=10**6, p=0, B=64, mbs=2, t_f=0.1, t_b=0.2, bytes_activation_msg=1e5)
    d = batch_breakdown(w, c, False, G_inter=4)
    s = batch_breakdown(w, c, True, G_inter=4)
    assert (d.compute, d.p2p_send, d.bubble, d.collective) == (s.compute, s.p2p_send, s.bubble, s.collective)
    assert d.overhead == 0 and s.overhead == pytest.approx(0.1 * 8 * 0.2 / 4)


def test_breakdown_samo_communication_lower():
    c = from_dict(ClusterSpec, cluster_dict(512))
    w = from_dict(WorkloadSpec, workload_dict())
    d, s = batch_breakdown(w, c, False), batch_breakdown(w, c, True)
    assert (d.G_inter, s.G_inter) == (4, 1)
    assert s.communication < d.communication


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ClusterSpec(G=0, mem_cap=1, link_bw_p2p=1, link_bw_coll=1)
    with pytest.raises(ConfigurationError):
        WorkloadSpec(phi=1, p=1.0, B=1, mbs=1, t_f=1, t_b=1)
    with pytest.raises(ConfigurationError):
        from_dict(ClusterSpec, {**cluster_dict(), "bogus": 1})


def test_divisors():
    assert divisors(12) == [1, 2, 3, 4, 6, 12]
