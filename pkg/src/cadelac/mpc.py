"""Receding-horizon tracking MPC with real-time Gauss-Newton iterations over multiple shooting."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from cadelac import autodiff as ad
from cadelac import delan
from cadelac import rigid_body as rb
from cadelac.checkpoint import Checkpoint
from cadelac.encoder import HistoryWindow, LowPassState, lstm_forward
from cadelac.sim import rk4


# --- dynamics models handed to the optimizer -------------------------------------------

class NominalDynamics:
    """Rigid-body model with an optional constant external joint torque."""

    def __init__(self, model: rb.ManipulatorModel, tau_ext=None):
        self.model = model
        self.n = model.n_links
        self.tau_ext = np.zeros(self.n) if tau_ext is None else np.asarray(tau_ext, dtype=float)

    def forward(self, q, dq, tau):
        return rb.forward_dynamics(self.model, q, dq, tau + self.tau_ext)

    def inverse(self, q, dq, ddq):
        return rb.inverse_dynamics(self.model, q, dq, ddq) - self.tau_ext


class ResidualDynamics:
    """Nominal model plus the learned residual evaluated at a frozen latent context."""

    def __init__(self, nominal: rb.ManipulatorModel, params: delan.NetworkParams, z):
        self.nominal = nominal
        self.params = params
        self.z = np.array(z, dtype=float)
        self.z.setflags(write=False)
        self.n = nominal.n_links

    def forward(self, q, dq, tau):
        return delan.total_forward_dynamics(self.nominal, self.params, self.z, q, dq, tau)

    def inverse(self, q, dq, ddq):
        return delan.total_inverse_dynamics(self.nominal, self.params, self.z, q, dq, ddq)


def state_rhs(dyn):
    n = dyn.n

    def f(x, u):
        return ad.concatenate([x[..., n:], dyn.forward(x[..., :n], x[..., n:], u)], axis=-1)

    return f


def discrete_step(f, x, u, dt):
    return rk4(f, x, u, dt)


def linearize_dynamics(f, x, u, dt):
    """Exact sensitivities of one RK4 step of ``dx/dt = f(x, u)``.

    Returns ``(A, B, c, x_next)`` with ``x_next = A x + B u + c`` at the linearization point;
    leading batch axes of ``x`` and ``u`` are kept.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    nx, nu = x.shape[-1], u.shape[-1]
    xs = ad.seed(x, nx + nu, 0)
    us = ad.seed(u, nx + nu, nx)
    out = rk4(f, xs, us, dt)
    A, B = out.tan[..., :nx], out.tan[..., nx:]
    c = out.val - np.einsum("...ij,...j->...i", A, x) - np.einsum("...ij,...j->...i", B, u)
    return A, B, c, out.val


# --- box-constrained QP ------------------------------------------------------------------

def box_qp(Hm, g, lo, hi, x0=None, max_iter=50, tol=1e-12):
    """Minimize ``0.5 x^T H x + g^T x`` subject to ``lo <= x <= hi`` by projected Newton.

    Returns the minimizer and the boolean mask of free (unclamped) coordinates.
    """
    m = len(g)
    x = np.clip(np.zeros(m) if x0 is None else x0, lo, hi)
    obj = lambda v: 0.5 * v @ Hm @ v + g @ v
    free = np.ones(m, dtype=bool)
    for _ in range(max_iter):
        grad = g + Hm @ x
        clamped = ((x <= lo) & (grad > 0)) | ((x >= hi) & (grad < 0))
        free = ~clamped
        if not free.any():
            break
        step = np.zeros(m)
        step[free] = -np.linalg.solve(Hm[np.ix_(free, free)], grad[free])
        if np.max(np.abs(step)) <= tol * (1.0 + np.max(np.abs(x))):
            break
        f0, alpha = obj(x), 1.0
        while True:
            x_new = np.clip(x + alpha * step, lo, hi)
            if obj(x_new) <= f0 + 1e-4 * grad @ (x_new - x) or alpha < 1e-10:
                break
            alpha *= 0.5
        done = np.max(np.abs(x_new - x)) <= tol * (1.0 + np.max(np.abs(x)))
        x = x_new
        if done:
            break
    grad = g + Hm @ x
    free = ~(((x <= lo) & (grad > 0)) | ((x >= hi) & (grad < 0)))
    return x, free


# --- OCP --------------------------------------------------------------------------------

@dataclass
class MpcConfig:
    q_weight: np.ndarray
    dq_weight: np.ndarray
    r_weight: np.ndarray
    tau_max: np.ndarray
    tau_min: np.ndarray | None = None
    horizon: int = 12
    dt: float = 0.02
    control_cost: str = "feedforward"  # penalize u - u_ff (model inverse dynamics of the reference) or u itself
    max_iter: int = 1
    tol: float = 1e-8

    def __post_init__(self):
        for name in ("q_weight", "dq_weight", "r_weight", "tau_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.tau_min = -self.tau_max if self.tau_min is None else np.asarray(self.tau_min, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be at least one step")
        if np.any(self.q_weight < 0) or np.any(self.dq_weight < 0) or np.any(self.r_weight <= 0):
            raise ValueError("state weights must be nonnegative and control weights positive")
        if np.any(self.tau_min > self.tau_max):
            raise ValueError("tau_min exceeds tau_max")
        if self.control_cost not in ("feedforward", "absolute"):
            raise ValueError("control_cost must be 'feedforward' or 'absolute'")

    @property
    def Q(self):
        return np.diag(np.concatenate([self.q_weight, self.dq_weight]))

    @property
    def R(self):
        return np.diag(self.r_weight)

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MpcSolution:
    x: np.ndarray
    u: np.ndarray
    objective: float
    iterations: int
    status: str
    defect: float = 0.0
    solve_time: float = 0.0
    model_time: float = 0.0

    def shifted(self):
        """Warm start for the next step: drop the first stage and repeat the last."""
        return MpcSolution(np.concatenate([self.x[1:], self.x[-1:]]), np.concatenate([self.u[1:], self.u[-1:]]),
                           self.objective, 0, "warm")


@dataclass
class ReferenceWindow:
    """Desired states ``x_d`` of shape ``(N + 1, 2n)`` and accelerations ``ddq_d`` of shape ``(N + 1, n)``."""
    x_d: np.ndarray
    ddq_d: np.ndarray | None = None


def riccati_box_lq(A, B, d, Q, R, qx_lin, qu_lin, du_lo, du_hi, dx0, QN, qN_lin):
    """Solve the box-constrained time-varying LQ subproblem by a projected Riccati sweep.

    Minimizes ``sum_i 0.5 dx_i^T Q dx_i + qx_i^T dx_i + 0.5 du_i^T R du_i + qu_i^T du_i`` plus the
    terminal term, subject to ``dx_{i+1} = A_i dx_i + B_i du_i + d_i`` and the control boxes.
    Returns ``(dx, du, saturated)``.
    """
    N, nx = A.shape[0], A.shape[1]
    nu = B.shape[2]
    P, p = QN.copy(), qN_lin.copy()
    Ks, ks = np.zeros((N, nu, nx)), np.zeros((N, nu))
    for i in range(N - 1, -1, -1):
        At, Bt = A[i].T, B[i].T
        s = p + P @ d[i]
        Qxx = Q + At @ P @ A[i]
        Quu = R + Bt @ P @ B[i]
        Qux = Bt @ P @ A[i]
        qx = qx_lin[i] + At @ s
        qu = qu_lin[i] + Bt @ s
        Quu = 0.5 * (Quu + Quu.T)
        k, free = box_qp(Quu, qu, du_lo[i], du_hi[i], x0=ks[i + 1] if i + 1 < N else None)
        K = np.zeros((nu, nx))
        if free.any():
            K[free] = -np.linalg.solve(Quu[np.ix_(free, free)], Qux[free])
        Ks[i], ks[i] = K, k
        P = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
        P = 0.5 * (P + P.T)
        p = qx + K.T @ Quu @ k + K.T @ qu + Qux.T @ k
    dx = np.zeros((N + 1, nx))
    du = np.zeros((N, nu))
    dx[0] = dx0
    saturated = False
    for i in range(N):
        v = ks[i] + Ks[i] @ dx[i]
        clipped = np.clip(v, du_lo[i], du_hi[i])
        saturated |= bool(np.any(np.abs(clipped - v) > 0) or np.any(clipped <= du_lo[i]) or np.any(clipped >= du_hi[i]))
        du[i] = clipped
        dx[i + 1] = A[i] @ dx[i] + B[i] @ du[i] + d[i]
    return dx, du, saturated


def feedforward_controls(dyn, ref: ReferenceWindow, N):
    n = dyn.n
    ddq = np.zeros((N, n)) if ref.ddq_d is None else ref.ddq_d[:N]
    return dyn.inverse(ref.x_d[:N, :n], ref.x_d[:N, n:], ddq)


def objective(cfg: MpcConfig, x, u, ref: ReferenceWindow, u_ref):
    ex = x - ref.x_d
    eu = u - u_ref
    return float(np.einsum("ij,jk,ik->", ex, cfg.Q, ex) + np.einsum("ij,jk,ik->", eu, cfg.R, eu))


def solve_ocp(cfg: MpcConfig, dyn, x0, ref: ReferenceWindow, warm_start: MpcSolution | None = None,
              fallback=None, max_iter=None) -> MpcSolution:
    """Gauss-Newton SQP over the multiple-shooting transcription; one iteration by default (RTI)."""
    t_start = time.perf_counter()
    N, n = cfg.horizon, dyn.n
    x0 = np.asarray(x0, dtype=float)
    if ref.x_d.shape[0] != N + 1:
        raise ValueError(f"reference window must have {N + 1} states")
    max_iter = cfg.max_iter if max_iter is None else max_iter
    status = "ok"
    u_ref = feedforward_controls(dyn, ref, N) if cfg.control_cost == "feedforward" else np.zeros((N, n))
    if warm_start is None:
        xs = ref.x_d.copy()
        xs[0] = x0
        us = np.clip(feedforward_controls(dyn, ref, N), cfg.tau_min, cfg.tau_max)
    else:
        xs, us = warm_start.x.copy(), np.clip(warm_start.u, cfg.tau_min, cfg.tau_max)
    Q, R = cfg.Q, cfg.R
    model_time = 0.0
    it, saturated, defect = 0, False, 0.0

    def fall_back(what):
        if fallback is None:
            raise FloatingPointError(f"non-finite {what} and no fallback model")
        sol = solve_ocp(cfg, fallback, x0, ref, None, None, max_iter)
        sol.status = "fallback"
        return sol

    for it in range(1, max_iter + 1):
        t_model = time.perf_counter()
        A, B, _, x_next = linearize_dynamics(state_rhs(dyn), xs[:-1], us, cfg.dt)
        model_time += time.perf_counter() - t_model
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B)) and np.all(np.isfinite(x_next))):
            return fall_back("linearization")
        d = x_next - xs[1:]
        defect = float(np.max(np.abs(d)))
        with np.errstate(over="ignore", invalid="ignore"):
            dx, du, saturated = riccati_box_lq(
                A, B, d, Q, R, (xs[:-1] - ref.x_d[:-1]) @ Q, (us - u_ref) @ R,
                cfg.tau_min - us, cfg.tau_max - us, x0 - xs[0], Q, Q @ (xs[-1] - ref.x_d[-1]))
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(du))):
            return fall_back("QP step")
        xs, us = xs + dx, us + du
        us = np.clip(us, cfg.tau_min, cfg.tau_max)
        if max(np.max(np.abs(dx)), np.max(np.abs(du))) <= cfg.tol and it > 1:
            break
    if saturated:
        status = "saturated"
    return MpcSolution(xs, us, objective(cfg, xs, us, ref, u_ref), it, status, defect,
                       time.perf_counter() - t_start, model_time)


# --- inner loop ------------------------------------------------------------------------

@dataclass(frozen=True)
class InnerLoopGains:
    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kp", np.asarray(self.kp, dtype=float))
        object.__setattr__(self, "kd", np.asarray(self.kd, dtype=float))
        if np.any(self.kp < 0) or np.any(self.kd < 0):
            raise ValueError("gains must be nonnegative")


def inner_loop_torque(tau_mpc, q_d, dq_d, q, dq, gains: InnerLoopGains, nominal: rb.ManipulatorModel,
                      tau_min=None, tau_max=None):
    """Feedforward plus PD, minus the nominal gravity the robot adds internally.

    The bounds apply to the torque that reaches the joints (``tau_cmd + g_nominal``).
    """
    tau = tau_mpc + gains.kp * (q_d - q) + gains.kd * (dq_d - dq)
    if tau_min is not None or tau_max is not None:
        tau = np.clip(tau, tau_min, tau_max)
    return tau - rb.gravity_vector(nominal, q)


def robot_joint_torque(tau_cmd, q, nominal: rb.ManipulatorModel):
    """Torque applied at the joints when the robot adds its internal nominal gravity compensation."""
    return tau_cmd + rb.gravity_vector(nominal, q)


# --- controller ---------------------------------------------------------------------------

@dataclass
class Measurement:
    """Sampled joint state plus the mean joint torque applied over the preceding control interval."""
    t: float
    q: np.ndarray
    dq: np.ndarray
    tau_last: np.ndarray | None = None


@dataclass
class ControlOutput:
    tau: np.ndarray
    solution: MpcSolution
    z: np.ndarray | None
    tau_ext: np.ndarray | None
    solve_time: float
    status: str


@dataclass
class ContextEstimator:
    """Online residual-torque history, encoder and latent low-pass used by the learned controller."""
    checkpoint: Checkpoint
    nominal: rb.ManipulatorModel
    dt: float = 0.02
    cutoff_hz: float = 2.0
    filter_z: bool = True
    window: HistoryWindow = field(init=False)
    lowpass: LowPassState = field(init=False)
    _past: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.window = HistoryWindow(self.nominal.n_links, self.checkpoint.n_history)
        self.lowpass = LowPassState(self.cutoff_hz if self.filter_z else np.inf, self.dt)

    def reset(self):
        self.window.clear()
        self.lowpass.reset()
        self._past = []

    def observe(self, meas: Measurement):
        """Add the newest sample; once two earlier samples exist, push the residual of the middle one."""
        self._past.append(meas)
        self._past = self._past[-3:]
        if len(self._past) == 3 and self._past[1].tau_last is not None and self._past[2].tau_last is not None:
            prev2, prev, cur = self._past
            ddq = (cur.dq - prev2.dq) / (2 * self.dt)
            tau = 0.5 * (prev.tau_last + cur.tau_last)
            tau_res = tau - rb.inverse_dynamics(self.nominal, prev.q, prev.dq, ddq)
            self.window.push(prev.q, prev.dq, tau_res)

    def latent(self):
        if len(self.window) == 0:
            return None
        z_raw = lstm_forward(self.checkpoint.encoder, self.window.entries())
        return self.lowpass.update(z_raw)


class MpcController:
    """Tracking MPC whose prediction model is the nominal, learned-residual, EKF-augmented or true model."""

    KINDS = ("nominal", "cadelac", "ekf", "perfect")

    def __init__(self, cfg: MpcConfig, nominal: rb.ManipulatorModel, kind="nominal", checkpoint=None,
                 ekf=None, true_model=None, cutoff_hz=2.0, filter_z=True):
        if kind not in self.KINDS:
            raise ValueError(f"unknown controller kind {kind!r}")
        if kind == "cadelac" and checkpoint is None:
            raise ValueError("the learned controller needs a checkpoint")
        if kind == "ekf" and ekf is None:
            raise ValueError("the EKF controller needs a filter")
        if kind == "perfect" and true_model is None:
            raise ValueError("the perfect-model controller needs the true model")
        self.cfg, self.nominal, self.kind = cfg, nominal, kind
        self.checkpoint, self.ekf, self.true_model = checkpoint, ekf, true_model
        self.context = ContextEstimator(checkpoint, nominal, cfg.dt, cutoff_hz, filter_z) if kind == "cadelac" else None
        self.warm = None

    def reset(self):
        self.warm = None
        if self.context is not None:
            self.context.reset()
        if self.ekf is not None:
            self.ekf.reset()

    def dynamics(self, meas: Measurement):
        """Prediction model for this iteration, frozen over the horizon."""
        if self.kind == "perfect":
            return NominalDynamics(self.true_model), None, None
        if self.kind == "cadelac":
            self.context.observe(meas)
            z = self.context.latent()
            if z is None:
                return NominalDynamics(self.nominal), None, None
            return ResidualDynamics(self.nominal, self.checkpoint.delan, z), z, None
        if self.kind == "ekf":
            tau_ext = self.ekf.observe(meas)
            return NominalDynamics(self.nominal, tau_ext), None, tau_ext
        return NominalDynamics(self.nominal), None, None

    def control_step(self, meas: Measurement, ref: ReferenceWindow) -> ControlOutput:
        t0 = time.perf_counter()
        dyn, z, tau_ext = self.dynamics(meas)
        x0 = np.concatenate([meas.q, meas.dq])
        warm = self.warm.shifted() if self.warm is not None else None
        sol = solve_ocp(self.cfg, dyn, x0, ref, warm, fallback=NominalDynamics(self.nominal))
        self.warm = sol
        return ControlOutput(sol.u[0].copy(), sol, z, tau_ext, time.perf_counter() - t0, sol.status)
