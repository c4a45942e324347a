"""Pure numpy versions of the compiled kernels.

Results are bit-identical to ``_ckernels``: every output element sees the
same sequence of IEEE single (or double) operations in the same order.
"""
import numpy as np


def gemm_f32(a, b):
    m, kk = a.shape
    out = np.zeros((m, b.shape[1]), dtype=np.float32)
    # one rank-1 update per k keeps the k-ascending order of the scalar loop
    for k in range(kk):
        out += a[:, k, None] * b[None, k, :]
    return out


def square_accumulate(acc, grads):
    for row in grads:
        g = row.astype(np.float64)
        acc += g * g


def dampen_f32(theta, imp_f, imp_d, alpha, lam, beta_out):
    alpha = np.float32(alpha)
    lam = np.float32(lam)
    mask = imp_f > alpha * imp_d
    sel_f = imp_f[mask]
    beta = np.minimum((lam * imp_d[mask]) / sel_f, np.float32(1.0))
    beta_out[mask] = beta
    theta[mask] = beta * theta[mask]
    return mask.astype(np.uint8)
