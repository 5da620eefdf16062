"""
Reverse-mode autodiff on numpy arrays
=====================================

Everything in memreg is built on a small tape-based ``Tensor``. This script
differentiates a tiny conv net and checks the tape against central finite
differences.
"""

import numpy as np

from memreg import functional as F
from memreg.gradcheck import check_gradients
from memreg.tensor import Tensor

rng = np.random.default_rng(0)

# a 3x3 convolution followed by a softmax over channels
x = Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
w = Tensor(0.3 * rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
probs = F.softmax(F.conv2d(x, w, padding=1), axis=1)
print("output shape:", probs.shape)
print("channels sum to one:", np.allclose(probs.data.sum(axis=1), 1.0))

# backward from a scalar
loss = (probs * Tensor(rng.normal(size=probs.shape))).sum()
loss.backward()
print("d loss / d weight has shape", w.grad.shape)

# the finite-difference oracle only calls the forward function
def fn(a, k):
    return (F.relu(F.conv2d(a, k, padding=1)) ** 2).mean()

err = check_gradients(fn, [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))])
print(f"relative error vs finite differences: {err:.2e}")
