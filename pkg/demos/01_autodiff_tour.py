"""
A small tour of the autodiff engine
===================================

Build a two-layer network by hand, backpropagate through it, and compare the
result with central differences.
"""

import numpy as np

from udaqa import autodiff as ad
from udaqa.autodiff import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 1)), requires_grad=True)

# forward: relu(x w1) w2, then mean squared output
loss = ad.mean(ad.square(ad.matmul(ad.relu(ad.matmul(x, w1)), w2)))
print("loss", loss.item())

# the graph is implicit; topological_order walks it from the root
print("nodes in graph:", len(ad.topological_order(loss)))

ad.backward(loss)
print("d loss / d w2:\n", w2.grad.ravel())

# finite differences agree wherever no relu flips sign under the step
res = ad.finite_diff_check(
    lambda w1, w2: ad.mean(ad.square(ad.matmul(ad.relu(ad.matmul(x, w1)), w2))),
    {"w1": w1.data, "w2": w2.data},
)
print(f"max relative error {res.max_rel_error:.2e}, checked {res.checked}, skipped at kinks {res.excluded}")
