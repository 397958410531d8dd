"""A look inside the float32 autodiff engine.

Walks through taping a computation, reverse-mode gradients, a
finite-difference cross-check, and the convolution/transposed-convolution
adjoint identity the decoder relies on.
"""

import numpy as np

from dota import tensor as T

rng = np.random.default_rng(0)

# --- 1. taping and backward --------------------------------------------------
w = T.Tensor(rng.standard_normal((3, 2)).astype(np.float32), requires_grad=True)
x = T.Tensor(rng.standard_normal((4, 3)).astype(np.float32))
out = T.relu(T.matmul(x, w))
loss = T.mean_(T.mul(out, out))
T.backward(loss)
print("loss:", loss.item())
print("dL/dw:\n", w.grad)

# --- 2. finite-difference cross-check ---------------------------------------
def loss_value():
    with T.no_grad():
        o = T.relu(T.matmul(x, w))
        return float((o.data.astype(np.float64) ** 2).mean())

step = 1e-3
worst = 0.0
for idx in range(w.size):
    saved = w.data.ravel()[idx]
    w.data.ravel()[idx] = saved + step
    hi = loss_value()
    w.data.ravel()[idx] = saved - step
    lo = loss_value()
    w.data.ravel()[idx] = saved
    fd = (hi - lo) / (2 * step)
    an = float(w.grad.ravel()[idx])
    worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
print(f"worst relative gradient error vs central differences: {worst:.2e}")

# --- 3. the adjoint identity -------------------------------------------------
# <conv(x), y> == <x, convT(y)> makes the decoder the exact adjoint of a
# strided convolution with the same kernels.
kernels = T.Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32))
a = rng.standard_normal((1, 2, 8, 6)).astype(np.float32)
b = rng.standard_normal((1, 4, 4, 3)).astype(np.float32)
lhs = float((T.conv2d(T.Tensor(a), kernels, stride=2).data.astype(np.float64) * b).sum())
rhs = float((a.astype(np.float64) * T.conv2d_transposed(T.Tensor(b), kernels).data).sum())
print(f"adjoint identity: <conv(x), y>={lhs:.6f}  <x, convT(y)>={rhs:.6f}")

# --- 4. masked softmax is how causality enters attention ---------------------
logits = T.Tensor(rng.standard_normal((5, 5)).astype(np.float32))
mask = np.tril(np.ones((5, 5), dtype=bool))
att = T.softmax(logits, mask=mask)
print("causal attention rows (zeros above the diagonal):")
print(np.array_str(att.data, precision=3, suppress_small=True))
