"""Compare the WTA layers on one score vector and show the surrogate gradient."""
import numpy as np

from wtaspike import autodiff as ad
from wtaspike.wta import WTAKind, apply_wta, hard_wta, softmax_tau, sparsemax, topk_wta

a = np.array([0.2, 0.8, 0.5, 0.1])
print("scores      ", a)
print("hard        ", hard_wta(a))
print("top-2       ", topk_wta(a, 2))
print("sparsemax   ", np.round(sparsemax(a), 6))
for tau in (1.0, 0.1, 0.01):
    print(f"softmax t={tau:<5}", np.round(softmax_tau(a, tau), 6))

# forward is one-hot, backward is the softmax Jacobian-vector product
x = ad.Tensor(a, requires_grad=True)
upstream = np.array([0.0, 1.0, 0.0, 0.0])
ad.backward((apply_wta(x, WTAKind("hard")) * ad.Tensor(upstream)).sum())
print("d(out[1])/da", np.round(x.grad, 6))
