"""Extended-precision oracle for the overidentified linear IV-GMM estimate.

Generates the same arrays the unit test regenerates from seed 7, then solves
the normal equations in 50-digit arithmetic. Frozen output goes into
tests/test_gmm.py.
"""

import mpmath as mp
import numpy as np

mp.mp.dps = 50

rng = np.random.default_rng(7)
T, J, K, q = 2, 3, 2, 5
n = T * J
x = rng.standard_normal((n, K))
z = rng.standard_normal((n, q))
delta = rng.standard_normal(n)

X = mp.matrix(x.tolist())
Z = mp.matrix(z.tolist())
d = mp.matrix(delta.tolist())

M = (Z.T * Z) / n
W = M ** -1
B = Z.T * X
A = B.T * W * B
beta = A ** -1 * (B.T * (W * (Z.T * d)))
print("beta oracle (50 dps, printed to 17 significant digits):")
for k in range(K):
    print(f"  beta[{k}] = {mp.nstr(beta[k], 17)}")

# weight-matrix sanity in the same precision: W @ M = I
resid = W * M - mp.eye(q)
print("max |W M - I| =", mp.nstr(max(abs(resid[i, j]) for i in range(q) for j in range(q)), 5))
