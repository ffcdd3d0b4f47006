# Compressed-state training changes where states live, not the arithmetic.
#
# Train a 16-32-16-4 MLP at 90% sparsity twice: once with compressed states
# (gradients gathered per layer as they are produced, Adam on the compressed
# buffers, fp16 weights rebuilt by expand) and once with dense states and a
# mask. The two runs agree bit for bit.

from samo import training

spec = training.ModelSpec.mlp([16, 32, 16, 4])
cfg = training.OptimizerConfig(learning_rate=1e-2)
data = training.synthetic_regression(256, 16, 4, seed=0)
init = training.init_params(spec, seed=0)
ind = training.prune_model(spec, init, 0.9)

samo = training.train(spec, data, 200, ind, cfg, init)
ref = training.train_reference_masked(spec, data, 200, ind, cfg, init)

for step in (0, 49, 99, 199):
    print(f"step {step:3d}  loss {samo.losses[step]:.6f}  reference {ref.losses[step]:.6f}")

print("identical losses:", samo.losses == ref.losses)
print("max relative parameter deviation:", training.max_relative_deviation(samo.params, ref.params))
print("dense gradient buffers alive at once during backward:", samo.peak_dense_grads)
kept = sum(len(s) for s in ind)
total = sum(s.dense_len for s in ind)
print(f"{kept} of {total} parameters unpruned; model-state bytes {samo.records[-1].peak_state_bytes}")
