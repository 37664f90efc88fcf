"""Residual Lagrangian network conditioned on a latent context vector.

Two small MLPs take ``[cos q, sin q, z]``: one emits the Cholesky factor of a
residual inertia matrix, the other a residual potential energy.  Residual
torques follow from the Euler-Lagrange equation of the residual Lagrangian.

The math is written once against a tiny array namespace (``xp``).  The default
namespace is :mod:`cadelac.autodiff`, so every function accepts plain arrays or
forward-mode :class:`~cadelac.autodiff.Dual` inputs; ``trainer`` supplies a
torch namespace for reverse-mode training.  The q-Jacobian of each MLP is
propagated by hand alongside the values, which keeps the torque formula free of
nested differentiation and lets an outer Dual produce exact second derivatives.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from cadelac import autodiff as ad
from cadelac import rigid_body as rb


@dataclass(frozen=True)
class DelanConfig:
    epsilon: float = 0.1
    latent_dim: int = 10
    hidden: tuple = (30, 20)
    trig_input: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def input_dim(self, n):
        return (2 * n if self.trig_input else n) + self.latent_dim

    def to_dict(self):
        return {"epsilon": self.epsilon, "latent_dim": self.latent_dim, "hidden": list(self.hidden),
                "trig_input": self.trig_input}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MlpParams:
    """Dense layers ``y = h @ W + b`` with tanh between them; ``W`` is ``(in, out)``."""
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, nonempty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[-1] != b.shape[-1]:
                raise ValueError(f"layer {i}: bias does not match weight output size")
            if i and self.weights[i - 1].shape[-1] != W.shape[0]:
                raise ValueError(f"layer {i}: input size does not chain")

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, scale=1.0):
        """Glorot-uniform weights, zero biases."""
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(Ws, bs)

    @classmethod
    def zeros(cls, sizes):
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]])

    def map(self, fn):
        return MlpParams([fn(W) for W in self.weights], [fn(b) for b in self.biases])

    def to_dict(self):
        return {"weights": [np.asarray(W).tolist() for W in self.weights],
                "biases": [np.asarray(b).tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d):
        return cls([np.asarray(W, dtype=float) for W in d["weights"]], [np.asarray(b, dtype=float) for b in d["biases"]])


@dataclass
class NetworkParams:
    theta_H: MlpParams
    theta_P: MlpParams
    n: int
    cfg: DelanConfig = field(default_factory=DelanConfig)

    def __post_init__(self):
        d_in = self.cfg.input_dim(self.n)
        if self.theta_H.sizes[0] != d_in or self.theta_P.sizes[0] != d_in:
            raise ValueError(f"networks must take {d_in} inputs")
        if self.theta_H.sizes[-1] != n_cholesky(self.n):
            raise ValueError("inertia network must output n(n+1)/2 values")
        if self.theta_P.sizes[-1] != 1:
            raise ValueError("potential network must output a scalar")

    @classmethod
    def init(cls, n, cfg: DelanConfig, rng: np.random.Generator):
        d_in = cfg.input_dim(n)
        return cls(MlpParams.init([d_in, *cfg.hidden, n_cholesky(n)], rng),
                   MlpParams.init([d_in, *cfg.hidden, 1], rng), n, cfg)

    @classmethod
    def zeros(cls, n, cfg: DelanConfig = DelanConfig()):
        d_in = cfg.input_dim(n)
        return cls(MlpParams.zeros([d_in, *cfg.hidden, n_cholesky(n)]), MlpParams.zeros([d_in, *cfg.hidden, 1]), n, cfg)

    def to_dict(self):
        return {"n": self.n, "config": self.cfg.to_dict(), "theta_H": self.theta_H.to_dict(),
                "theta_P": self.theta_P.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(MlpParams.from_dict(d["theta_H"]), MlpParams.from_dict(d["theta_P"]), int(d["n"]),
                   DelanConfig.from_dict(d["config"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def n_cholesky(n):
    return n + n * (n - 1) // 2


@lru_cache(maxsize=None)
def cholesky_selectors(n):
    """Constant maps from network outputs to ``L``: diagonal first, then the strict lower triangle row-major."""
    diag = np.zeros((n, n, n))
    diag[np.arange(n), np.arange(n), np.arange(n)] = 1.0
    rows, cols = np.tril_indices(n, -1)
    off = np.zeros((n, n, len(rows)))
    off[rows, cols, np.arange(len(rows))] = 1.0
    return diag, off


# --- MLP ------------------------------------------------------------------------

def mlp_jet(params: MlpParams, x, dx=None, xp=ad):
    """Evaluate the MLP and push the tangent matrix ``dx`` (``(..., in, k)``) through it.

    Returns ``y`` and, when ``dx`` is given, ``dy`` of shape ``(..., out, k)``.
    """
    h, dh = x, dx
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = xp.einsum("...i,io->...o", h, W) + b
        if dh is not None:
            dh = xp.einsum("...ik,io->...ok", dh, W)
        if i == last:
            h = a
            break
        h = xp.tanh(a)
        if dh is not None:
            dh = (1.0 - h * h)[..., None] * dh
    return h, dh


def mlp_forward(params: MlpParams, x, xp=ad):
    if x.shape[-1] != params.sizes[0]:
        raise ValueError(f"expected input size {params.sizes[0]}, got {x.shape[-1]}")
    return mlp_jet(params, x, xp=xp)[0]


def mlp_input_jacobian(params: MlpParams, x):
    """Output and exact input Jacobian ``dy/dx`` of shape ``(..., out, in)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.sizes[0]:
        raise ValueError(f"expected input size {params.sizes[0]}, got {x.shape[-1]}")
    eye = np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],))
    return mlp_jet(params, x, eye)


# --- network inputs --------------------------------------------------------------

def _features(q, z, cfg: DelanConfig, xp):
    """Network input and its q-Jacobian ``(..., in, n)``."""
    n = q.shape[-1]
    eye = np.eye(n)
    if cfg.trig_input:
        c, s = xp.cos(q), xp.sin(q)
        # d cos(q_i)/dq_k = -sin(q_i) delta_ik, d sin(q_i)/dq_k = cos(q_i) delta_ik
        dphi_q = xp.concatenate([xp.einsum("...i,ik->...ik", -s, eye),
                                 xp.einsum("...i,ik->...ik", c, eye)], axis=-2)
        parts = [c, s]
    else:
        dphi_q = xp.einsum("...i,ik->...ik", q * 0.0 + 1.0, eye)
        parts = [q]
    z = _broadcast_latent(z, q, xp)
    dz = xp.einsum("...i,ik->...ik", z, np.zeros((z.shape[-1], n)))
    return xp.concatenate(parts + [z], axis=-1), xp.concatenate([dphi_q, dz], axis=-2)


def _broadcast_latent(z, q, xp):
    batch = q.shape[:-1]
    if tuple(z.shape[:-1]) == tuple(batch):
        return z
    return z + xp.zeros_like(q[..., :1])


def _check(params: NetworkParams, q, z):
    if q.shape[-1] != params.n:
        raise ValueError(f"expected {params.n} joints, got {q.shape[-1]}")
    if z.shape[-1] != params.cfg.latent_dim:
        raise ValueError(f"expected latent size {params.cfg.latent_dim}, got {z.shape[-1]}")


# --- inertia and potential ---------------------------------------------------------

def _cholesky_factor(theta_H, phi, dphi, n, eps, xp):
    out, dout = mlp_jet(theta_H, phi, dphi, xp=xp)
    sel_d, sel_o = cholesky_selectors(n)
    l_diag, l_off = out[..., :n], out[..., n:]
    dl_diag, dl_off = dout[..., :n, :], dout[..., n:, :]
    d = xp.softplus(l_diag) + eps
    dd = xp.sigmoid(l_diag)[..., None] * dl_diag
    L = xp.einsum("abi,...i->...ab", sel_d, d) + xp.einsum("abj,...j->...ab", sel_o, l_off)
    dL = xp.einsum("abi,...ik->...abk", sel_d, dd) + xp.einsum("abj,...jk->...abk", sel_o, dl_off)
    return L, dL


def _inertia(theta_H, phi, dphi, n, eps, xp):
    L, dL = _cholesky_factor(theta_H, phi, dphi, n, eps, xp)
    H = xp.einsum("...ac,...bc->...ab", L, L)
    t = xp.einsum("...ack,...bc->...abk", dL, L)
    dH = t + xp.einsum("...abk->...bak", t)
    return H, dH


def assemble_inertia(theta_H: MlpParams, q, z, cfg: DelanConfig, xp=ad):
    """Residual inertia ``H = L L^T`` and its q-derivative ``dH[..., a, b, k] = dH_ab/dq_k``."""
    phi, dphi = _features(q, z, cfg, xp)
    return _inertia(theta_H, phi, dphi, q.shape[-1], cfg.epsilon, xp)


def residual_potential(theta_P: MlpParams, q, z, cfg: DelanConfig, xp=ad):
    phi, _ = _features(q, z, cfg, xp)
    return mlp_jet(theta_P, phi, xp=xp)[0][..., 0]


def residual_gravity(theta_P: MlpParams, q, z, cfg: DelanConfig, xp=ad):
    """``dP/dq`` of the residual potential."""
    phi, dphi = _features(q, z, cfg, xp)
    _, dP = mlp_jet(theta_P, phi, dphi, xp=xp)
    return dP[..., 0, :]


def residual_terms(params: NetworkParams, q, dq, z, xp=ad):
    """Residual inertia ``H`` and the velocity-plus-potential torque ``c`` with ``tau = H ddq + c``."""
    phi, dphi = _features(q, z, params.cfg, xp)
    H, dH = _inertia(params.theta_H, phi, dphi, params.n, params.cfg.epsilon, xp)
    _, dP = mlp_jet(params.theta_P, phi, dphi, xp=xp)
    Hdot_dq = xp.einsum("...abk,...k,...b->...a", dH, dq, dq)
    quad = xp.einsum("...bck,...b,...c->...k", dH, dq, dq)
    return H, Hdot_dq - 0.5 * quad + dP[..., 0, :]


def residual_inverse_dynamics(params: NetworkParams, q, dq, ddq, z, xp=ad):
    """Residual torque from the Euler-Lagrange equation of ``0.5 dq^T H(q, z) dq - P(q, z)``."""
    _check(params, q, z)
    H, c = residual_terms(params, q, dq, z, xp)
    return xp.einsum("...ab,...b->...a", H, ddq) + c


def total_inverse_dynamics(nominal: rb.ManipulatorModel, params: NetworkParams, z, q, dq, ddq):
    return rb.inverse_dynamics(nominal, q, dq, ddq) + residual_inverse_dynamics(params, q, dq, ddq, z)


def total_forward_dynamics(nominal: rb.ManipulatorModel, params: NetworkParams, z, q, dq, tau):
    """Joint accelerations of nominal plus residual model; the summed inertia is PD by construction."""
    _check(params, q, z)
    H_nom, bias = rb.bias_torque(nominal, q, dq)
    H_res, c = residual_terms(params, q, dq, z)
    return ad.cho_solve(H_nom + H_res, tau - bias - c)
