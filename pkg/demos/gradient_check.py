"""
Checking the hand-written backward pass
=======================================

The MLP computes its gradient by hand, so it is worth comparing it against
central finite differences before trusting any training run built on it.
"""

import numpy as np

from acesync.tensor import DataSpec, backward, forward_loss, init_model, make_synthetic_dataset

# a small network and one batch drawn from the synthetic clusters
params = init_model([20, 64, 5], seed=0)
data = make_synthetic_dataset(DataSpec(M=256, D=20, C=5), seed=0)
batch = (data.features[:32], data.labels[:32])
print(f"{params.size} parameters, initial loss {forward_loss(params, batch).loss:.4f}")

grad = backward(params, batch)

# nudge a few coordinates each way and watch the loss move
rng = np.random.default_rng(1)
h = 1e-5
worst = 0.0
for i in rng.choice(params.size, size=25, replace=False):
    up, down = params.values.copy(), params.values.copy()
    up[i] += h
    down[i] -= h
    fd = (forward_loss(params.with_values(up), batch).loss
          - forward_loss(params.with_values(down), batch).loss) / (2 * h)
    rel = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6)
    worst = max(worst, rel)
print(f"worst relative error over 25 coordinates: {worst:.2e}")

# with every weight at zero the softmax is uniform, so the loss is ln C
zero = params.with_values(np.zeros(params.size))
print(f"zero-weight loss {forward_loss(zero, batch).loss:.12f} vs ln 5 = {np.log(5):.12f}")
