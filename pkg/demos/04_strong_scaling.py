# Batch-time breakdown for a GPT-3 2.7B-like model pruned to 90%.
#
# Each GPU holds 14.5 GB: the dense model state (54 GB) needs a 4-deep pipeline,
# the compressed state (11.9 GB) fits on one GPU. Freed GPUs go to data
# parallelism, which removes the bubble and point-to-point traffic and shrinks
# the gradient all-reduce to 10% of its dense size.

from samo.parallel import SUMMIT, ClusterSpec, WorkloadSpec, batch_breakdown, phase_reductions

work = WorkloadSpec(phi=2_700_000_000, p=0.9, B=1024, mbs=1, t_f=0.1, t_b=0.2,
                    bytes_activation_msg=2048 * 2560 * 2, overhead_frac=0.1,
                    act_bytes_per_layer_per_microbatch=1e9)

print(f"{'GPUs':>5} {'mode':>6} {'G_inter':>7} {'compute':>8} {'p2p':>6} {'bubble':>7} "
      f"{'coll':>6} {'ovh':>6} {'total':>6}")
for G in (128, 256, 512):
    cluster = ClusterSpec(G=G, **{**SUMMIT, "mem_cap": 14.5e9})
    dense = batch_breakdown(work, cluster, samo_enabled=False)
    samo = batch_breakdown(work, cluster, samo_enabled=True)
    for mode, b in (("dense", dense), ("samo", samo)):
        print(f"{G:5d} {mode:>6} {b.G_inter:7d} {float(b.compute):8.3f} {float(b.p2p_send):6.3f} "
              f"{float(b.bubble):7.3f} {float(b.collective):6.3f} {float(b.overhead):6.3f} {float(b.total):6.3f}")
    red = phase_reductions(dense, samo)
    print(f"      communication cut by {red['communication']:.0%} of the dense batch time, "
          f"speedup {red['speedup']:.0%}")
