# Memory saved by keeping every model state except the fp16 weights compressed.
#
# Dense mixed precision with Adam costs 20 bytes per parameter
# (fp16 weights 2 + fp16 grads 2 + fp32 weights 4 + fp32 grads 4 + moments 8).
# Compressed storage keeps the fp16 weights dense but stores the other states,
# a 32-bit index and a transient fp16 copy only for unpruned parameters.

import numpy as np

from samo import ModelState, magnitude_prune, measured_bytes, memory_model
from samo.store import sparsity_grid

phi = 10**9
print(f"{'p':>5} {'dense GB':>9} {'samo GB':>8} {'saved':>7}")
for p in sparsity_grid(0, 1, "0.1"):
    r = memory_model(phi, p)
    print(f"{float(p):5.2f} {float(r.bytes_default) / 1e9:9.1f} {float(r.bytes_samo) / 1e9:8.1f} "
          f"{float(r.savings_fraction):7.0%}")

# Below p = 0.25 the indices cost more than the compression saves.
print("break-even at p =", [float(p) for p in sparsity_grid(0, 1, "0.05")
                            if memory_model(phi, p).bytes_saved == 0])

# The closed form matches the bytes actually held by a pruned model.
rng = np.random.default_rng(0)
layers = [rng.standard_normal(n).astype(np.float32) for n in (4000, 2000, 1000)]
ind = magnitude_prune([(f"layer{i}", w) for i, w in enumerate(layers)], 0.9)
state = ModelState.from_dense(layers, ind)
print("measured:", measured_bytes(state), "bytes; formula:", memory_model(7000, 0.9).bytes_samo, "bytes")
