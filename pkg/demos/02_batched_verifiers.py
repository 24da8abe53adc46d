"""
Evaluating many tiny verifiers at once
======================================

Every row of ``thetas`` is a complete verifier. ``batched_predict`` scores
every image with every verifier in one pass, which is the nB x nB prediction
matrix used in training.
"""
import time

import numpy as np

from hyperverify.verifier import DESK, PAPER_SCALE, batched_predict, count_flops, count_params, verify

rng = np.random.default_rng(0)
p = count_params(DESK)
print(f"default verifier: {p} parameters, {count_flops(DESK)} FLOPs per image")
print(f"paper-scale verifier: {count_params(PAPER_SCALE)} parameters, "
      f"{count_flops(PAPER_SCALE) / 1e6:.2f} MFLOPs")

for entry in DESK.layout():
    print(f"  {entry.name:14s} {str(entry.shape):18s} offset {entry.offset}")

nB = 16
images = rng.uniform(-1, 1, (nB, 3, 32, 32))
thetas = rng.normal(size=(nB, p)) * 0.2

t0 = time.perf_counter()
Y = batched_predict(DESK, images, thetas).data
t_batch = time.perf_counter() - t0

t0 = time.perf_counter()
loop = np.array([[verify(DESK, images[k], thetas[j]) for k in range(nB)] for j in range(nB)])
t_loop = time.perf_counter() - t0

print(f"{nB}x{nB} matrix: batched {t_batch * 1e3:.1f} ms, loop {t_loop * 1e3:.1f} ms, "
      f"max diff {np.abs(Y - loop).max():.1e}")
