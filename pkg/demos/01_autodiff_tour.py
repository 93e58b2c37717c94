"""
A tour of the autodiff engine
=============================

Tensors record the ops that produced them; ``backward`` walks that tape in
reverse. Everything here runs in float64 so finite differences are meaningful.
"""
import numpy as np

from afusion import autodiff as ad
from afusion.autodiff import Tensor, grad_check

rng = np.random.default_rng(0)

# a tiny two-layer regression, written with raw ops
x = Tensor(rng.normal(size=(8, 3)))
W1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
W2 = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
y = rng.normal(size=(8, 1))

def loss():
    h = ad.tanh(ad.linear(x, W1))
    return ad.mean(ad.square(ad.linear(h, W2) - Tensor(y)))

out = loss()
out.backward()
print("loss", out.item())
print("dL/dW2", W2.grad.ravel().round(4))

# compare against central differences
print("max rel err", grad_check(loss, [W1, W2]))

# gradients accumulate until cleared
W1.grad = W2.grad = None
loss().backward()
first = W1.grad.copy()
loss().backward()
print("second backward doubles the gradient:", np.allclose(W1.grad, 2 * first))

# dilated causal convolution: output t only sees t, t-d, t-2d, ...
impulse = np.zeros((10, 1))
impulse[0] = 1.0
resp = ad.conv1d_dilated_causal(Tensor(impulse), Tensor(np.ones((3, 1, 1))), None, 2)
print("impulse response, k=3 d=2:", resp.data.ravel())

# no_grad skips recording
with ad.no_grad():
    z = W1 * 2.0
print("recorded under no_grad:", z.requires_grad)
