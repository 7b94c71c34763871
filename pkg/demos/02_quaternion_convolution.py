"""Quaternion convolution: 4x fewer kernel parameters, same real algebra.

A quaternion conv layer stores four kernel banks shared across all four
input/output planes via the Hamilton sign pattern.  Expanding that pattern
into a big real kernel reproduces the quaternion output exactly, which is
also how the layer's parameter saving is easiest to see: the expanded real
conv would need 16 independent kernels where the quaternion layer stores 4.
"""

import numpy as np

from qprune import Conv2d, ModelGraph, QConv2d, count_macs, count_params, qconv2d, real_conv2d

rng = np.random.default_rng(1)

q = QConv2d(q_in=2, q_out=3, kernel=(3, 3), padding=1)
q.weights = rng.normal(size=q.weights.shape).astype(np.float32)
q.bias = rng.normal(size=q.bias.shape).astype(np.float32)

x = rng.normal(size=(1, 4, 2, 8, 8)).astype(np.float32)  # (N, plane, Q, H, W)
y = qconv2d(q, x)
print("quaternion conv:", x.shape, "->", y.shape)

# materialize the signed block kernel and run it as a real convolution
wr, wi, wj, wk = q.weights
big = Conv2d(8, 12, (3, 3), padding=1)
big.w = np.concatenate([
    np.concatenate([wr, -wi, -wj, -wk], axis=1),
    np.concatenate([wi, wr, -wk, wj], axis=1),
    np.concatenate([wj, wk, wr, -wi], axis=1),
    np.concatenate([wk, -wj, wi, wr], axis=1),
], axis=0)
big.b = q.bias.reshape(-1)
y_real = real_conv2d(big, x.reshape(1, 8, 8, 8)).reshape(y.shape)
print("max |quaternion - materialized real| =", np.abs(y - y_real).max())

print("\nparameter accounting (4-in/4-out 3x3, no bias):")
print("  real conv:      ", sum(a.size for _, a in Conv2d(4, 4, (3, 3), bias=False).params()))
print("  quaternion conv:", sum(a.size for _, a in QConv2d(1, 1, (3, 3), bias=False).params()))

qm = ModelGraph([QConv2d(1, 1, (3, 3))], (4, 3, 3), 1, quaternion=True)
rm = ModelGraph([Conv2d(4, 4, (3, 3))], (4, 3, 3), 1, quaternion=False)
print("\nMACs at one output position (Hamilton product = 16 multiplies):")
print("  quaternion:", count_macs(qm), "MACs,", count_params(qm), "params")
print("  real:      ", count_macs(rm), "MACs,", count_params(rm), "params")
