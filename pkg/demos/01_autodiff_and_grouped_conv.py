"""
Reverse-mode gradients and grouped convolution
==============================================

Builds a tiny expression graph, backpropagates through it and checks the
result against central differences. Then runs one grouped convolution for a
stack of independent networks and compares it with a per-network loop.
"""
import numpy as np

from hyperverify import tensor as T
from hyperverify.tensor import Tensor

rng = np.random.default_rng(0)

# a scalar loss over a matmul, GeLU and a layer norm
x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
w = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
gain, shift = Tensor(np.ones(5), requires_grad=True), Tensor(np.zeros(5), requires_grad=True)


def loss_fn():
    return T.tsum(T.layer_norm(T.gelu(T.matmul(x, w)), gain, shift) ** 2.0 * 0.5)


loss = loss_fn()
T.backward(loss)
print("loss", float(loss.data))

# finite differences on a few entries of w
h = 1e-6
for idx in [(0, 0), (3, 2), (5, 4)]:
    old = w.data[idx]
    w.data[idx] = old + h
    with T.no_grad():
        up = float(loss_fn().data)
    w.data[idx] = old - h
    with T.no_grad():
        down = float(loss_fn().data)
    w.data[idx] = old
    print(f"dL/dw{idx}: backward {w.grad[idx]: .6f}  numeric {(up - down) / (2 * h): .6f}")

# grouped conv for J networks at once, samples innermost: x is [J, C, H, W, K]
J, K = 3, 5
xs = rng.normal(size=(1, 8, 9, 9, K))  # J=1: every network sees the same K images
ws = rng.normal(size=(J, 16, 2, 3, 3))  # groups=4 -> 8/4 = 2 input channels per group
bs = rng.normal(size=(J, 16))
out = T.conv2d_multi(Tensor(xs), Tensor(ws), Tensor(bs), stride=2, padding=1, groups=4).data
print("multi-network output", out.shape)

nchw = np.moveaxis(xs[0], -1, 0)  # [K, C, H, W]
for j in range(J):
    ref = T.conv2d_grouped(Tensor(nchw), Tensor(ws[j]), Tensor(bs[j]), 2, 1, 4).data
    print(f"network {j}: max diff vs single conv {np.abs(np.moveaxis(out[j], -1, 0) - ref).max():.2e}")
