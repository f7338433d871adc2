"""Reverse-mode autodiff: build a small graph, backpropagate, check by finite differences.

Run with ``python demos/01_autodiff.py``.
"""
import numpy as np

from surlonformer import autodiff as ad

# %% A tiny two-layer network written directly against the tape.
rng = np.random.default_rng(0)
x = ad.tensor(rng.normal(size=(5, 3)))
w1 = ad.parameter(rng.normal(size=(3, 4)), "w1")
w2 = ad.parameter(rng.normal(size=(4, 1)), "w2")


def forward(w1_, w2_):
    h = ad.gelu(ad.matmul(x, w1_))
    return ad.mean(ad.square(ad.matmul(h, w2_)))


loss = forward(w1, w2)
grads = ad.backward(loss, [w1, w2])
print("loss", float(loss.data))
print("dL/dw2", grads["w2"].ravel())

# %% Central differences agree with the tape to ~1e-9.
h = 1e-6
numeric = np.zeros_like(w2.data)
for idx in np.ndindex(w2.shape):
    plus, minus = w2.data.copy(), w2.data.copy()
    plus[idx] += h
    minus[idx] -= h
    numeric[idx] = (float(forward(w1, ad.tensor(plus)).data)
                    - float(forward(w1, ad.tensor(minus)).data)) / (2 * h)
print("max |tape - finite difference|", np.abs(numeric - grads["w2"]).max())

# %% Masked softmax: masked entries get exactly zero probability.
scores = ad.tensor(rng.normal(size=(3, 3)))
mask = np.tril(np.ones((3, 3), dtype=bool))
print(ad.masked_softmax(scores, mask).data.round(3))
