"""Extended Kalman filter for a constant end-effector force acting on the nominal model."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from cadelac import autodiff as ad
from cadelac import rigid_body as rb
from cadelac.sim import rk4

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EkfConfig:
    """Diagonal noise settings; ``q_diag`` covers ``[q, dq, f]`` and ``r_diag`` covers ``[q, dq]``."""
    q_diag: np.ndarray
    r_diag: np.ndarray
    dt: float = 0.02
    substeps: int = 4
    force_prior_var: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "q_diag", np.asarray(self.q_diag, dtype=float))
        object.__setattr__(self, "r_diag", np.asarray(self.r_diag, dtype=float))
        if np.any(self.q_diag < 0) or np.any(self.r_diag <= 0):
            raise ValueError("process noise must be PSD and measurement noise PD")
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("invalid integration settings")

    @classmethod
    def default(cls, n, dt=0.02):
        return cls(np.concatenate([np.ones(n), 0.1 * np.ones(n), 100.0 * np.ones(2)]), 0.01 * np.ones(2 * n), dt)

    def to_dict(self):
        return {"q_diag": self.q_diag.tolist(), "r_diag": self.r_diag.tolist(), "dt": self.dt,
                "substeps": self.substeps, "force_prior_var": self.force_prior_var}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EkfState:
    x: np.ndarray  # [q, dq, f_ee]
    P: np.ndarray
    update_failed: bool = False

    def __post_init__(self):
        if self.P.shape != (len(self.x), len(self.x)):
            raise ValueError("covariance shape does not match state")

    @property
    def force(self):
        return self.x[-2:]


def augmented_rhs(nominal: rb.ManipulatorModel):
    """``d/dt [q, dq, f] = [dq, ddq, 0]`` with ``H ddq + C dq + g = tau + J^T f``."""
    n = nominal.n_links

    def f(x, tau):
        q, dq, force = x[..., :n], x[..., n:2 * n], x[..., 2 * n:]
        _, J = rb.ee_kinematics(nominal, q)
        tau_ext = ad.einsum("...ki,...k->...i", J, force)
        ddq = rb.forward_dynamics(nominal, q, dq, tau + tau_ext)
        return ad.concatenate([dq, ddq, force * 0.0], axis=-1)

    return f


def transition(nominal, x, tau, cfg: EkfConfig):
    f = augmented_rhs(nominal)
    h = cfg.dt / cfg.substeps
    for _ in range(cfg.substeps):
        x = rk4(f, x, tau, h)
    return x


def transition_jacobian(nominal, x, tau, cfg: EkfConfig):
    out = transition(nominal, ad.seed(x), np.asarray(tau, dtype=float), cfg)
    return out.val, out.tan


def ekf_predict(state: EkfState, tau, cfg: EkfConfig, nominal: rb.ManipulatorModel) -> EkfState:
    x, F = transition_jacobian(nominal, state.x, tau, cfg)
    P = F @ state.P @ F.T + np.diag(cfg.q_diag)
    return EkfState(x, 0.5 * (P + P.T))


def ekf_update(state: EkfState, y, cfg: EkfConfig) -> EkfState:
    """Kalman update for a direct measurement of ``[q, dq]`` with Joseph-form covariance."""
    y = np.asarray(y, dtype=float)
    m, nx = len(y), len(state.x)
    Hm = np.eye(m, nx)
    S = Hm @ state.P @ Hm.T + np.diag(cfg.r_diag)
    try:
        K = np.linalg.solve(S, Hm @ state.P).T
    except np.linalg.LinAlgError:
        log.warning("innovation covariance is singular; skipping update")
        return EkfState(state.x.copy(), state.P.copy(), update_failed=True)
    x = state.x + K @ (y - Hm @ state.x)
    IKH = np.eye(nx) - K @ Hm
    P = IKH @ state.P @ IKH.T + K @ np.diag(cfg.r_diag) @ K.T
    return EkfState(x, 0.5 * (P + P.T))


def ekf_external_torque(state: EkfState, nominal: rb.ManipulatorModel):
    n = nominal.n_links
    _, J = rb.ee_kinematics(nominal, state.x[:n])
    return J.T @ state.force


class ExternalForceEkf:
    """Stateful wrapper used inside the control loop."""

    def __init__(self, nominal: rb.ManipulatorModel, cfg: EkfConfig):
        self.nominal, self.cfg = nominal, cfg
        self.state = None

    def reset(self):
        self.state = None

    def initialize(self, q, dq):
        n = self.nominal.n_links
        x = np.concatenate([q, dq, np.zeros(2)])
        P = np.diag(np.concatenate([self.cfg.r_diag, np.full(2, self.cfg.force_prior_var)]))
        assert len(x) == 2 * n + 2
        self.state = EkfState(x, P)

    def observe(self, meas):
        """Predict with the torque applied over the last interval, correct with the new sample."""
        y = np.concatenate([meas.q, meas.dq])
        if self.state is None or meas.tau_last is None:
            self.initialize(meas.q, meas.dq)
        else:
            self.state = ekf_update(ekf_predict(self.state, meas.tau_last, self.cfg, self.nominal), y, self.cfg)
        return ekf_external_torque(self.state, self.nominal)
