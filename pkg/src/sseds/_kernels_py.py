"""NumPy implementations of the kernels in ``_kernels.pyx``."""
import numpy as np


def scatter_add_rows(out, index, vals):
    # np.add.at applies updates in index order, matching the compiled loop
    np.add.at(out, index, vals)


def fm_forward(E):
    S = E.sum(axis=1)
    Q = (E * E).sum(axis=1)
    fm = E.dtype.type(0.5) * (S * S - Q).sum(axis=1)
    return fm, S


def fm_backward(E, S, dz):
    return dz[:, None, None] * (S[:, None, :] - E)


def sparse_adam(param, rows, grad, m1, m2, lr, beta1, beta2, eps, bc1, bc2):
    t = param.dtype.type
    a = t(beta1) * m1[rows] + t(1.0 - beta1) * grad
    b = t(beta2) * m2[rows] + t(1.0 - beta2) * (grad * grad)
    m1[rows] = a
    m2[rows] = b
    param[rows] -= t(lr / bc1) * a / (np.sqrt(b * t(1.0 / bc2)) + t(eps))


def slot_grad_reduce(dE, E):
    return (dE * E).sum(axis=0)
