"""A few lines of reverse-mode autodiff, then a finite-difference check.

The tape is rebuilt on every forward pass; ``backward`` walks it once.
"""

import numpy as np

from imaformer import tensor as T

rng = np.random.default_rng(0)
x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)

probs = T.softmax(x @ w, axis=-1)
loss = T.cross_entropy(probs, np.array([0, 1, 1]))
loss.backward()
print("loss", round(loss.item(), 6))
print("dL/dw\n", w.grad)

# The same gradient, checked against central differences.
err = T.grad_check(lambda v: T.cross_entropy(T.softmax(x.detach() @ v, axis=-1), np.array([0, 1, 1])), w.data, h=1e-5)
print(f"grad_check max relative error: {err:.2e}")

# Shared subexpressions accumulate: d(a + a)/da = 2.
a = T.Tensor(np.array(1.5), requires_grad=True)
(a + a).backward()
print("d(a+a)/da =", a.grad)
