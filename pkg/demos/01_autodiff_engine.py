"""Tour of the tensor engine: forward ops, backward pass, AdamW.

Run:  python demos/01_autodiff_engine.py
"""

import numpy as np

from promptad import tensor as T
from promptad.optim import adamw_step

# --- build a tiny computation and differentiate it -------------------------

x = T.Tensor(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
w = T.Tensor(np.random.default_rng(0).normal(size=(4, 2)), requires_grad=True)
b = T.Tensor(np.zeros(2), requires_grad=True)

out = T.relu(T.linear(x, w, b))
loss = T.mean_all(T.square(out))
loss.backward()

print("loss:", float(loss.data))
print("dL/dw:\n", w.grad)

# --- compare against central finite differences ----------------------------

h = 1e-3
i, j = 2, 1
orig = w.data[i, j]
w.data[i, j] = orig + h
fp = float(T.mean_all(T.square(T.relu(T.linear(x, w, b)))).data)
w.data[i, j] = orig - h
fm = float(T.mean_all(T.square(T.relu(T.linear(x, w, b)))).data)
w.data[i, j] = orig
numeric = (fp - fm) / (2 * h)
print(f"analytic {w.grad[i, j]:.6f} vs numeric {numeric:.6f}")

# --- a few AdamW steps on a quadratic bowl ---------------------------------

p = np.array([3.0, -2.0])
state = {}
for step in range(5):
    grad = 2.0 * p
    adamw_step([p], [grad], state, lr=0.3)
    print(f"step {step}: p={p}, f={float((p**2).sum()):.4f}")

# decoupled weight decay acts directly on the parameter, not the moments
p = np.array([1.0])
adamw_step([p], [np.array([0.0])], {}, lr=0.1, weight_decay=0.1)
print("pure-decay step on p=1 (lr=0.1, wd=0.1):", p)
