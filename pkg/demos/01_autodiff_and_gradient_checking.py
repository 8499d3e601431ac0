"""
Reverse-mode autodiff on a tape, with numeric gradient checking
===============================================================

"""

import numpy as np

from distillab.optim import grad_check
from distillab.tensor import Tensor, add, gelu, matmul, record, tmean

# Tensors wrap numpy arrays. Marking one requires_grad asks the tape to
# accumulate a gradient for it when we run a backward pass.
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(5, 3)))
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(rng.normal(size=(5, 4)), requires_grad=True)

# Ops executed inside `record()` are written to a tape in order.
with record() as tape:
    h = gelu(add(matmul(x, w), b))
    loss = tmean(h)
print("loss:", float(loss.data))

# backward() replays the tape in reverse and fills .grad on the leaves.
tape.backward(loss)
print("dloss/dw row 0:", np.round(w.grad[0], 4))
print("dloss/db row 0:", np.round(b.grad[0], 4))

# grad_check rebuilds the same scalar through central differences, one
# coordinate at a time, and reports the worst relative disagreement.
w2 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)


def f(params):
    (wp,) = params
    return tmean(gelu(matmul(x, wp)))


worst = grad_check(f, [w2])
print(f"worst relative gradient error: {worst:.3e}")
assert worst < 1e-6
