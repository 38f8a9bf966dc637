"""
Reverse-mode autodiff and finite-difference checks
==================================================

Every trainable computation in the package runs on a small tape-based
autodiff over numpy arrays. This script builds a few expressions, reads
their gradients and checks them against central differences.
"""

import numpy as np

from aimclr import autodiff as ad

# a leaf that records gradients
x = ad.Tensor([1.0, 2.0], requires_grad=True)

# sum of squares: the gradient is 2x
loss = ad.sum(ad.mul(x, x))
ad.backward(loss)
print("sum(x*x) at", x.data, "-> grad", x.grad)

# cross-entropy identity: d/da log softmax(a)[0] = 1 - softmax(a)[0]
a = ad.Tensor([0.3, -1.2], requires_grad=True)
ad.backward(ad.take(ad.log_softmax(a), 0))
print("grad of log softmax[0]:", a.grad, " softmax:", np.exp(a.data) / np.exp(a.data).sum())

# grad_check compares the tape against central differences coordinate by coordinate
report = ad.grad_check(lambda t: ad.sum(ad.square(t)), np.array([1.0, 2.0, 3.0]))
print("grad_check sum(x^2): max rel err %.2e, passed %s" % (report.max_rel_error, report.passed))

# the same harness works for whole model pieces; here a temporal convolution
rng = np.random.default_rng(0)
w = ad.Tensor(rng.normal(size=(3, 2, 4)))
inp = rng.normal(size=(2, 7, 3, 2))
proj = ad.Tensor(rng.normal(size=(2, 4, 3, 4)))  # contract the stride-2 output to a scalar
report = ad.grad_check(lambda t: ad.sum(ad.mul(ad.temporal_conv(t, w, 2), proj)), inp)
print("grad_check temporal_conv: max rel err %.2e" % report.max_rel_error)

# shape mistakes fail loudly and name both shapes
try:
    ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))
except ad.ShapeError as exc:
    print("ShapeError:", exc)
