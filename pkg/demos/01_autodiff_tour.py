"""
A tour of the tape-based autodiff
=================================

Every model in the package is built from a small set of float64 primitives.
Each primitive appends a node to the active tape; ``backward`` walks the tape
in reverse and accumulates gradients with ``+=``.
"""

import numpy as np

from cogrind import autodiff as ad
from cogrind.autodiff import Tensor

rng = np.random.default_rng(0)

# A leaf that wants a gradient, and a fixed input.
w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(2, 4)))

# Record a small computation: softmax over a linear map, then a weighted sum.
with ad.Tape() as tape:
    p = ad.softmax(ad.matmul(x, w))
    loss = ad.sum(ad.mul(p, Tensor([[1.0, 0.0, -1.0], [0.5, 0.5, 0.0]])))
    ad.backward(loss)

print("nodes on the tape:", len(tape))
print("loss:", loss.item())
print("dloss/dw:\n", np.round(w.grad, 4))

# Central finite differences agree with the analytic gradient.
err = ad.grad_check(lambda t: ad.sum(ad.mul(ad.softmax(ad.matmul(x, t)),
                                            Tensor([[1.0, 0.0, -1.0], [0.5, 0.5, 0.0]]))),
                    Tensor(w.data.copy()), eps=1e-6)
print(f"relative gradient error: {err:.2e}")

# Inside no_grad nothing is recorded, which is how inference runs.
with ad.Tape() as tape, ad.no_grad():
    ad.tanh(w)
print("nodes recorded under no_grad:", len(tape))

# Shape errors name the primitive and the offending shapes.
try:
    ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
except ad.ShapeError as exc:
    print("ShapeError:", exc)
