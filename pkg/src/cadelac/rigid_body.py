"""Analytic Lagrangian dynamics of a planar serial arm with revolute joints.

Conventions: joint angles are relative, ``q = 0`` stretches the arm along +x,
gravity acts along -y. All functions accept leading batch dimensions on the
joint arrays, and on the model parameters (see :func:`stack_models`), and
run unchanged on :class:`~cadelac.autodiff.Dual` inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from cadelac import autodiff as ad


@dataclass(frozen=True)
class ManipulatorModel:
    masses: np.ndarray
    lengths: np.ndarray
    com_offsets: np.ndarray
    link_inertias: np.ndarray
    gravity: float = 9.81
    viscous_friction: np.ndarray | None = None
    # COM offset perpendicular to the link axis; nonzero only after a payload with lateral offset
    com_lateral: np.ndarray | None = None

    def __post_init__(self):
        for name in ("masses", "lengths", "com_offsets", "link_inertias"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.lengths.shape[-1]
        if self.viscous_friction is None:
            object.__setattr__(self, "viscous_friction", np.zeros(n))
        if self.com_lateral is None:
            object.__setattr__(self, "com_lateral", np.zeros(n))
        object.__setattr__(self, "viscous_friction", np.asarray(self.viscous_friction, dtype=float))
        object.__setattr__(self, "com_lateral", np.asarray(self.com_lateral, dtype=float))
        self.validate()

    @property
    def n_links(self) -> int:
        return int(self.lengths.shape[-1])

    def validate(self):
        n = self.n_links
        for name in ("masses", "com_offsets", "link_inertias", "viscous_friction", "com_lateral"):
            arr = getattr(self, name)
            if arr.shape[-1] != n:
                raise ValueError(f"{name} has {arr.shape[-1]} entries, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")
        if np.any(self.lengths <= 0):
            raise ValueError("lengths must be positive")
        if np.any(self.link_inertias < 0):
            raise ValueError("link inertias must be nonnegative")
        if np.any(self.viscous_friction < 0):
            raise ValueError("viscous friction must be nonnegative")
        if not np.isfinite(self.gravity):
            raise ValueError("gravity must be finite")

    def to_dict(self) -> dict:
        return {
            "n_links": self.n_links,
            "masses": self.masses.tolist(),
            "lengths": self.lengths.tolist(),
            "com_offsets": self.com_offsets.tolist(),
            "link_inertias": self.link_inertias.tolist(),
            "gravity": float(self.gravity),
            "viscous_friction": self.viscous_friction.tolist(),
            "com_lateral": self.com_lateral.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManipulatorModel":
        model = cls(
            masses=d["masses"],
            lengths=d["lengths"],
            com_offsets=d["com_offsets"],
            link_inertias=d["link_inertias"],
            gravity=d.get("gravity", 9.81),
            viscous_friction=d.get("viscous_friction"),
            com_lateral=d.get("com_lateral"),
        )
        if "n_links" in d and int(d["n_links"]) != model.n_links:
            raise ValueError(f"n_links={d['n_links']} does not match parameter length {model.n_links}")
        return model

    @classmethod
    def from_json(cls, path) -> "ManipulatorModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_model(n_links: int = 3) -> ManipulatorModel:
    """Desk arm: lengths (0.5, 0.4, 0.3) m, masses (4, 3, 2) kg, mid-link COMs, slender rods."""
    lengths = np.array([0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.1])[:n_links]
    masses = np.array([4.0, 3.0, 2.0, 1.5, 1.0, 0.8, 0.5])[:n_links]
    if n_links > 7:
        raise ValueError("default_model supports up to 7 links")
    return ManipulatorModel(
        masses=masses,
        lengths=lengths,
        com_offsets=lengths / 2,
        link_inertias=masses * lengths**2 / 12,
    )


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    dq: np.ndarray
    ddq: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "dq", np.asarray(self.dq, dtype=float))
        if self.q.shape != self.dq.shape:
            raise ValueError("q and dq must have the same shape")
        if self.ddq is not None:
            object.__setattr__(self, "ddq", np.asarray(self.ddq, dtype=float))
            if self.ddq.shape != self.q.shape:
                raise ValueError("ddq must match q")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.dq))):
            raise ValueError("joint state must be finite")


@dataclass(frozen=True)
class EnvironmentSpec:
    payload_mass: float = 0.0
    payload_offset: tuple[float, float] = (0.0, 0.0)
    id: str = "env"

    def __post_init__(self):
        if self.payload_mass < 0:
            raise ValueError("payload_mass must be nonnegative")
        object.__setattr__(self, "payload_offset", tuple(float(v) for v in self.payload_offset))
        if len(self.payload_offset) != 2:
            raise ValueError("payload_offset is a 2-vector in the end-effector frame")

    def to_dict(self):
        return {"payload_mass": self.payload_mass, "payload_offset": list(self.payload_offset), "id": self.id}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["payload_mass"]), tuple(d.get("payload_offset", (0.0, 0.0))), str(d.get("id", "env")))


def stack_models(models) -> ManipulatorModel:
    """Batch models with equal ``n_links`` and gravity along a leading axis."""
    g = {m.gravity for m in models}
    if len(g) != 1:
        raise ValueError("stacked models must share gravity")
    return ManipulatorModel(
        masses=np.stack([m.masses for m in models]),
        lengths=np.stack([m.lengths for m in models]),
        com_offsets=np.stack([m.com_offsets for m in models]),
        link_inertias=np.stack([m.link_inertias for m in models]),
        gravity=g.pop(),
        viscous_friction=np.stack([m.viscous_friction for m in models]),
        com_lateral=np.stack([m.com_lateral for m in models]),
    )


def apply_payload(model: ManipulatorModel, env: EnvironmentSpec) -> ManipulatorModel:
    """Rigidly attach a point mass to the last link at the tip plus an end-effector-frame offset."""
    mp = float(env.payload_mass)
    if mp == 0.0:
        return model
    n = model.n_links - 1
    m, l = model.masses[n], model.lengths[n]
    c = np.array([model.com_offsets[n], model.com_lateral[n]])
    p = np.array([l + env.payload_offset[0], env.payload_offset[1]])
    total = m + mp
    com = (m * c + mp * p) / total
    inertia = model.link_inertias[n] + m * np.sum((c - com) ** 2) + mp * np.sum((p - com) ** 2)

    def swap(arr, v):
        arr = arr.copy()
        arr[n] = v
        return arr

    return replace(
        model,
        masses=swap(model.masses, total),
        com_offsets=swap(model.com_offsets, com[0]),
        com_lateral=swap(model.com_lateral, com[1]),
        link_inertias=swap(model.link_inertias, inertia),
    )


def _check_q(model, q):
    if np.shape(ad.value(q))[-1] != model.n_links:
        raise ValueError(f"expected {model.n_links} joint values, got {np.shape(ad.value(q))[-1]}")


@lru_cache(maxsize=None)
def _tri(n):
    upper = np.triu(np.ones((n, n)))  # phi_i = sum_{j<=i} q_j  ->  phi = q @ upper
    strict = np.triu(np.ones((n, n)), 1)  # joint a sits at sum_{j<a} l_j u_j
    below = np.tril(np.ones((n, n)))  # mask[i, a] = i >= a
    rot = below[:, :, None] * below[:, None, :]
    idx = np.maximum.outer(np.arange(n), np.arange(n))
    return upper, strict, below, rot, idx


def _geometry(model, q):
    """Joint origins, COM positions and COM lever arms relative to every joint."""
    n = model.n_links
    upper, strict, below, rot, idx = _tri(n)
    phi = q @ upper
    c, s = ad.cos(phi), ad.sin(phi)
    lc, ls = c * model.lengths, s * model.lengths
    px, py = lc @ strict, ls @ strict
    cx = px + c * model.com_offsets - s * model.com_lateral
    cy = py + s * model.com_offsets + c * model.com_lateral
    ex, ey = lc.sum(-1), ls.sum(-1)
    # D[..., i, a] = COM of link i minus origin of joint a, zero when link i does not move with joint a
    dx = (cx[..., :, None] - px[..., None, :]) * below
    dy = (cy[..., :, None] - py[..., None, :]) * below
    return dict(px=px, py=py, cx=cx, cy=cy, ex=ex, ey=ey, dx=dx, dy=dy, rot=rot, idx=idx)


def mass_matrix(model: ManipulatorModel, q):
    _check_q(model, q)
    geo = _geometry(model, q)
    rot = geo["rot"]
    return (ad.einsum("...i,...ia,...ib->...ab", model.masses, geo["dx"], geo["dx"])
            + ad.einsum("...i,...ia,...ib->...ab", model.masses, geo["dy"], geo["dy"])
            + ad.einsum("...i,iab->...ab", model.link_inertias, rot))


def _mass_matrix_and_derivative(model, q):
    geo = _geometry(model, q)
    rot, idx = geo["rot"], geo["idx"]
    m, dx, dy = model.masses, geo["dx"], geo["dy"]
    H = (ad.einsum("...i,...ia,...ib->...ab", m, dx, dx)
         + ad.einsum("...i,...ia,...ib->...ab", m, dy, dy)
         + ad.einsum("...i,iab->...ab", model.link_inertias, rot))
    # d(d_ia)/dq_k = perp(d_{i,max(a,k)}); perp(u).v = cross(u, v)
    ex, ey = dx[..., :, idx], dy[..., :, idx]
    t1 = (ad.einsum("...i,...iak,...ib->...abk", m, ex, dy)
          - ad.einsum("...i,...iak,...ib->...abk", m, ey, dx))
    dH = t1 + ad.einsum("...abk->...bak", t1)
    return H, dH, geo


def mass_matrix_derivative(model: ManipulatorModel, q):
    """``dH[..., a, b, k] = dH_ab / dq_k``."""
    _check_q(model, q)
    _, dH, _ = _mass_matrix_and_derivative(model, q)
    return dH


def coriolis_matrix(model: ManipulatorModel, q, dq):
    """Christoffel-symbol Coriolis matrix, so that ``dq^T (dH/dt - 2C) dq = 0``."""
    _check_q(model, q)
    _check_q(model, dq)
    _, dH, _ = _mass_matrix_and_derivative(model, q)
    gamma = 0.5 * (dH + ad.einsum("...kij->...kji", dH) - ad.einsum("...ijk->...kji", dH))
    return ad.einsum("...kji,...i->...kj", gamma, dq)


def _coriolis_term(dH, dq):
    # C(q, dq) dq = dH/dt dq - 1/2 d/dq (dq^T H dq)
    hdot_dq = ad.einsum("...abk,...k,...b->...a", dH, dq, dq)
    quad = ad.einsum("...abk,...a,...b->...k", dH, dq, dq)
    return hdot_dq - 0.5 * quad


def gravity_vector(model: ManipulatorModel, q):
    _check_q(model, q)
    geo = _geometry(model, q)
    return model.gravity * ad.einsum("...i,...ik->...k", model.masses, geo["dx"])


def potential_energy(model: ManipulatorModel, q):
    geo = _geometry(model, q)
    return model.gravity * ad.einsum("...i,...i->...", model.masses, geo["cy"])


def kinetic_energy(model: ManipulatorModel, q, dq):
    H = mass_matrix(model, q)
    return 0.5 * ad.einsum("...a,...ab,...b->...", dq, H, dq)


def bias_torque(model: ManipulatorModel, q, dq):
    """``C(q, dq) dq + g(q) + friction(dq)`` and the mass matrix, sharing one geometry pass."""
    H, dH, geo = _mass_matrix_and_derivative(model, q)
    g = model.gravity * ad.einsum("...i,...ik->...k", model.masses, geo["dx"])
    return H, _coriolis_term(dH, dq) + g + dq * model.viscous_friction


def inverse_dynamics(model: ManipulatorModel, q, dq, ddq):
    _check_q(model, q)
    _check_q(model, dq)
    _check_q(model, ddq)
    H, bias = bias_torque(model, q, dq)
    return ad.einsum("...ab,...b->...a", H, ddq) + bias


def forward_dynamics(model: ManipulatorModel, q, dq, tau):
    _check_q(model, q)
    _check_q(model, dq)
    _check_q(model, tau)
    H, bias = bias_torque(model, q, dq)
    return ad.cho_solve(H, tau - bias)


def ee_kinematics(model: ManipulatorModel, q):
    """End-effector position ``p[..., 2]`` and Jacobian ``J[..., 2, n]``."""
    _check_q(model, q)
    geo = _geometry(model, q)
    rx = geo["ex"][..., None] - geo["px"]
    ry = geo["ey"][..., None] - geo["py"]
    p = ad.stack([geo["ex"], geo["ey"]], axis=-1)
    J = ad.stack([-ry, rx], axis=-2)
    return p, J


def ee_position(model: ManipulatorModel, q):
    return ee_kinematics(model, q)[0]
