"""Reverse-mode gradients on the tape, checked against finite differences.

Run: python3 gallery/01_autodiff_and_gradcheck.py
"""
import numpy as np

from reco import numerics as nx
from reco.numerics import Tensor, Trace
from reco.trainer import gradient_check

# A tiny expression: loss = sum(tanh(x W + b)).
rng = np.random.default_rng(0)
W = Tensor(rng.normal(size=(3, 2)), requires_grad=True, name="W")
b = Tensor(np.zeros(2), requires_grad=True, name="b")
x = Tensor(rng.normal(size=3))

with Trace() as tape:
    loss = nx.total(nx.tanh(nx.affine(x, W, b)))
grads = nx.backward(tape, loss)
print("loss", round(loss.item(), 6))
print("dL/db", np.round(grads["b"], 6))

# The same check over every parameter of a small full model (m=8).
res = gradient_check(m=8, seed=0)
print("full model max relative error:", f"{res.max_rel_error:.2e}", "ok" if res.ok else "FAILED")
