"""The numpy tape: write the forward pass, get gradients, check them numerically.

Run: python3 demos/02_autodiff.py
"""

import numpy as np

from omdet.autodiff import Tape, Tensor, gradient_check, precision
from omdet.autodiff import functional as F
from omdet.errors import NumericError

rng = np.random.default_rng(0)
A = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
B = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

# Every primitive called while a Tape is open is recorded; backward walks it in reverse.
with Tape() as tape:
    y = F.sum(F.matmul(A, B))
grads = tape.backward(y)
print("dy/dA matches ones @ B.T:", np.allclose(grads[A], np.ones((3, 2)) @ B.data.T))

# Central differences are only trustworthy in float64, so checks switch precision.
with precision("float64"):
    w = rng.normal(size=(5, 5))
    err = gradient_check(lambda x: F.sum(F.gelu(F.matmul(x, Tensor(w)))), rng.normal(size=(2, 5)))
print(f"gelu(x @ W) relative gradient error {err:.2e}")

# A non-finite intermediate stops the computation and names the primitive.
try:
    F.log(Tensor(np.array([-1.0])))
except NumericError as exc:
    print("caught:", exc)
