"""Quaternion basics: the Hamilton product and its 4x4 matrix form.

A quaternion q = r + i*i + j*j + k*k multiplies non-commutatively; the
product m * q equals a signed 4x4 matrix (built from m) applied to q's
component vector.  That matrix form is what turns quaternion convolution
into plain real convolutions with shared kernels.
"""

import numpy as np

from qprune import Quaternion, hamilton_product

i = Quaternion(0, 1, 0, 0)
j = Quaternion(0, 0, 1, 0)
k = Quaternion(0, 0, 0, 1)

print("basis rules:")
print("  i*i =", tuple(hamilton_product(i, i)))
print("  j*j =", tuple(hamilton_product(j, j)))
print("  k*k =", tuple(hamilton_product(k, k)))
print("  i*j =", tuple(hamilton_product(i, j)), " j*i =",
      tuple(hamilton_product(j, i)), " (non-commutative)")

m = Quaternion(1, 2, 3, 4)
q = Quaternion(5, 6, 7, 8)
print("\n(1,2,3,4) * (5,6,7,8) =", tuple(hamilton_product(m, q)))

matrix = np.array([
    [m.r, -m.i, -m.j, -m.k],
    [m.i, m.r, -m.k, m.j],
    [m.j, m.k, m.r, -m.i],
    [m.k, -m.j, m.i, m.r],
])
print("matrix form gives    ", tuple(matrix @ q.as_array()))

rng = np.random.default_rng(0)
worst = 0.0
for _ in range(1000):
    a, b = rng.normal(size=(2, 4))
    ma = np.array([
        [a[0], -a[1], -a[2], -a[3]],
        [a[1], a[0], -a[3], a[2]],
        [a[2], a[3], a[0], -a[1]],
        [a[3], -a[2], a[1], a[0]],
    ])
    got = hamilton_product(Quaternion(*a), Quaternion(*b)).as_array()
    worst = max(worst, np.abs(got - ma @ b).max())
print(f"\n1000 random pairs vs matrix form: worst |error| = {worst:.2e}")
