# A 1F1B pipeline on three GPUs with five microbatches, forward = 1 unit and
# backward = 2 units per stage. Every GPU idles for 6 units: the forward and
# backward of G_inter - 1 = 2 microbatches.

from samo.parallel import bubble_time, simulate_pipeline

sim = simulate_pipeline(3, 5, 1, 2)
for gpu in range(3):
    row = ""
    for e in sim.timeline():
        if e.gpu != gpu:
            continue
        width = int(e.end - e.start)
        row += ("." if e.kind == "idle" else (str(e.microbatch) if e.kind == "F" else chr(ord("a") + e.microbatch))) * width
    print(f"GPU {gpu}: {row}   idle {sim.bubble[gpu]}")
print("(digits: forward of microbatch n, letters: backward, dots: idle)")

# The simulated bubble equals the closed form for any depth and microbatch count,
# and it grows with pipeline depth at a diminishing rate.
for G in range(1, 9):
    print(f"G_inter={G}: simulated {simulate_pipeline(G, 16, 1, 2).bubble[0]}, "
          f"closed form {bubble_time(G, G * 1, G * 2)}")
