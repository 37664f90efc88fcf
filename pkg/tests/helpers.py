"""Independent numerical oracles shared by the test modules."""
import numpy as np


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian ``J[..., i] = d f / d x_i`` for a flat ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def richardson_jacobian(f, x, h=1e-3):
    """Fourth-order central differences (one Richardson step), for nested derivatives."""
    d1 = fd_jacobian(f, x, h)
    d2 = fd_jacobian(f, x, h / 2)
    return (4 * d2 - d1) / 3


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def planar_points(lengths, q, offset=(0.0, 0.0)):
    """Tip position plus a point fixed in the last link frame, by direct trigonometry."""
    theta = np.cumsum(q)
    tip = np.array([np.sum(lengths * np.cos(theta)), np.sum(lengths * np.sin(theta))])
    c, s = np.cos(theta[-1]), np.sin(theta[-1])
    return tip + np.array([c * offset[0] - s * offset[1], s * offset[0] + c * offset[1]])
