"""Closed-loop simulation, excitation references and dataset recording."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.linalg

from cadelac import autodiff as ad
from cadelac import rigid_body as rb
from cadelac.rigid_body import EnvironmentSpec, JointState, ManipulatorModel

log = logging.getLogger(__name__)


class SimulationDiverged(RuntimeError):
    pass


def rk4(f, x, u, dt):
    """One classic Runge-Kutta step of ``dx/dt = f(x, u)`` with ``u`` held constant."""
    k1 = f(x, u)
    k2 = f(x + (0.5 * dt) * k1, u)
    k3 = f(x + (0.5 * dt) * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def state_derivative(model: ManipulatorModel):
    n = model.n_links

    def f(x, tau):
        q, dq = x[..., :n], x[..., n:]
        return ad.concatenate([dq, rb.forward_dynamics(model, q, dq, tau)], axis=-1)

    return f


def step(model: ManipulatorModel, state: JointState, tau, dt: float) -> JointState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.concatenate([state.q, state.dq], axis=-1)
    x = rk4(state_derivative(model), x, np.asarray(tau, dtype=float), dt)
    if not np.all(np.isfinite(x)):
        raise SimulationDiverged("non-finite state after integration step")
    n = model.n_links
    return JointState(x[..., :n], x[..., n:])


def simulate_interval(model, x, tau_fn, sim_dt, n_steps):
    """Integrate ``n_steps`` inner steps; ``tau_fn(x)`` gives the torque for each step.

    Returns the final state and the mean applied torque over the interval.
    """
    f = state_derivative(model)
    tau_sum = 0.0
    for _ in range(n_steps):
        tau = tau_fn(x)
        x = rk4(f, x, tau, sim_dt)
        tau_sum = tau_sum + tau
    return x, tau_sum / n_steps


# --- excitation references -------------------------------------------------

@dataclass(frozen=True)
class ChirpParams:
    a: np.ndarray  # (n_e, n) rad/s
    b: np.ndarray  # (n_e, n) rad/s
    omega: float
    q0: np.ndarray  # (n,)

    @property
    def period(self):
        return 2 * np.pi / self.omega

    def to_dict(self):
        return {"a": self.a.tolist(), "b": self.b.tolist(), "omega": self.omega, "q0": self.q0.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["a"], float), np.asarray(d["b"], float), float(d["omega"]), np.asarray(d["q0"], float))


def _chirp(a, b, omega, q0, t):
    t = np.asarray(t, dtype=float)[..., None, None]
    i = np.arange(1, a.shape[-2] + 1)[:, None]
    w = i * omega
    s, c = np.sin(w * t), np.cos(w * t)
    q = (a / w * s - b / w * c).sum(-2) + q0
    dq = (a * c + b * s).sum(-2)
    ddq = (w * (b * c - a * s)).sum(-2)
    return q, dq, ddq


def chirp_reference(params: ChirpParams, t):
    """Reference position and its analytic velocity for time(s) ``t``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")
    q, dq, _ = _chirp(params.a, params.b, params.omega, params.q0, t)
    return q, dq


def chirp_acceleration(params: ChirpParams, t):
    return _chirp(params.a, params.b, params.omega, params.q0, t)[2]


@dataclass(frozen=True)
class ChirpLimits:
    q_min: np.ndarray
    q_max: np.ndarray
    dq_min: np.ndarray
    dq_max: np.ndarray
    coef_range: np.ndarray
    q0_low: np.ndarray
    q0_high: np.ndarray
    n_harmonics: int = 5
    period: float = 10.0
    grid: int = 1000
    max_attempts: int = 20000

    def __post_init__(self):
        for name in ("q_min", "q_max", "dq_min", "dq_max", "coef_range", "q0_low", "q0_high"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.q_min >= self.q_max) or np.any(self.dq_min >= self.dq_max):
            raise ValueError("inconsistent limits")
        if np.any(self.q0_low < self.q_min) or np.any(self.q0_high > self.q_max) or np.any(self.q0_low > self.q0_high):
            raise ValueError("q0 sampling box must lie inside the position limits")
        if np.any(self.coef_range < 0):
            raise ValueError("coefficient range must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def chirp_bounds_ok(params: ChirpParams, limits: ChirpLimits, grid=None) -> bool:
    """Check the position/velocity bounds on a grid, shrunk by a bound on inter-sample motion.

    Between grid points the reference moves at most ``h/2 * max|derivative|``, and the
    derivative magnitude is bounded by the coefficient sums, so passing here implies the
    bounds hold on the continuous period.
    """
    grid = limits.grid if grid is None else grid
    h = params.period / grid
    t = np.arange(grid) * h
    q, dq, _ = _chirp(params.a, params.b, params.omega, params.q0, t)
    i = np.arange(1, params.a.shape[0] + 1)[:, None]
    vel_bound = (np.abs(params.a) + np.abs(params.b)).sum(0)
    acc_bound = (i * params.omega * (np.abs(params.a) + np.abs(params.b))).sum(0)
    mq, mdq = 0.5 * h * vel_bound, 0.5 * h * acc_bound
    return bool(np.all(q >= limits.q_min + mq) and np.all(q <= limits.q_max - mq)
                and np.all(dq >= limits.dq_min + mdq) and np.all(dq <= limits.dq_max - mdq))


def sample_chirp_params(rng: np.random.Generator, limits: ChirpLimits) -> ChirpParams:
    n = limits.q_min.shape[0]
    omega = 2 * np.pi / limits.period
    for _ in range(limits.max_attempts):
        a = rng.uniform(-1, 1, size=(limits.n_harmonics, n)) * limits.coef_range
        b = rng.uniform(-1, 1, size=(limits.n_harmonics, n)) * limits.coef_range
        q0 = rng.uniform(limits.q0_low, limits.q0_high)
        params = ChirpParams(a, b, omega, q0)
        if chirp_bounds_ok(params, limits):
            return params
    raise RuntimeError(f"no admissible chirp after {limits.max_attempts} attempts; limits too tight")


# --- data-collection controller ----------------------------------------------

def double_integrator_lqr(dt: float, q_pos: float, q_vel: float, r: float):
    """Discrete LQR for one joint modeled as a double integrator with zero-order-hold acceleration.

    Returns ``(K, P)`` with ``K`` shaped ``(1, 2)`` acting on ``[position error, velocity error]``.
    """
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    Q = np.diag([q_pos, q_vel])
    R = np.array([[r]])
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    # polish to the fixed point
    for _ in range(50):
        P_next = riccati_map(P, A, B, Q, R)
        if np.max(np.abs(P_next - P)) == 0.0:
            break
        P = P_next
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P


def riccati_map(P, A, B, Q, R):
    S = R + B.T @ P @ B
    P_next = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
    return 0.5 * (P_next + P_next.T)


@dataclass(frozen=True)
class TrackingGains:
    kp: np.ndarray
    kd: np.ndarray

    @classmethod
    def from_lqr(cls, n, dt, q_pos, q_vel, r):
        K, _ = double_integrator_lqr(dt, q_pos, q_vel, r)
        return cls(np.full(n, K[0, 0]), np.full(n, K[0, 1]))


def tracking_controller(nominal: ManipulatorModel, q_d, dq_d, q, dq, gains: TrackingGains,
                        ddq_d=None, tau_limit=None):
    """Computed-torque tracking on the nominal model with LQR-gain error feedback."""
    ddq_d = np.zeros_like(np.asarray(q_d, dtype=float)) if ddq_d is None else ddq_d
    ddq_cmd = ddq_d + gains.kp * (q_d - q) + gains.kd * (dq_d - dq)
    tau = rb.inverse_dynamics(nominal, q, dq, ddq_cmd)
    if tau_limit is not None:
        tau = np.clip(tau, -tau_limit, tau_limit)
    return tau


# --- records ----------------------------------------------------------------

@dataclass
class TrajectoryRecord:
    """One uniformly sampled trajectory.

    ``tau_applied[k]`` is the joint torque averaged over the central-difference window
    ``[t_{k-1}, t_{k+1}]`` (a single interval at the boundaries), which makes it
    consistent with the finite-difference acceleration ``ddq_fd``.
    """
    time: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    ddq_fd: np.ndarray
    tau_applied: np.ndarray
    tau_residual: np.ndarray
    env_id: str
    traj_id: int = 0
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(len(self.time), dtype=bool)

    def __len__(self):
        return len(self.time)

    @property
    def dt(self):
        return float(self.time[1] - self.time[0])

    def to_dict(self):
        return {
            "env_id": self.env_id, "traj_id": int(self.traj_id), "time": self.time.tolist(),
            "q": self.q.tolist(), "dq": self.dq.tolist(), "ddq_fd": self.ddq_fd.tolist(),
            "tau_applied": self.tau_applied.tolist(), "tau_residual": self.tau_residual.tolist(),
            "valid": self.valid.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: np.asarray(d[k], dtype=float)
        return cls(arr("time"), arr("q"), arr("dq"), arr("ddq_fd"), arr("tau_applied"), arr("tau_residual"),
                   str(d["env_id"]), int(d.get("traj_id", 0)), np.asarray(d["valid"], dtype=bool))


def finite_difference_acceleration(dq, dt):
    """Central differences; the two ends fall back to one-sided differences and are flagged."""
    dq = np.asarray(dq, dtype=float)
    ddq = np.empty_like(dq)
    ddq[1:-1] = (dq[2:] - dq[:-2]) / (2 * dt)
    ddq[0] = (dq[1] - dq[0]) / dt
    ddq[-1] = (dq[-1] - dq[-2]) / dt
    valid = np.ones(len(dq), dtype=bool)
    valid[[0, -1]] = False
    return ddq, valid


def window_torque(tau_interval):
    """Average interval torques over central-difference windows: row k uses intervals k-1 and k."""
    tau_interval = np.asarray(tau_interval, dtype=float)
    out = np.empty_like(tau_interval)
    out[1:] = 0.5 * (tau_interval[1:] + tau_interval[:-1])
    out[0] = tau_interval[0]
    return out


def residual_torque(nominal: ManipulatorModel, record: TrajectoryRecord):
    """``tau_applied - nominal inverse dynamics`` at the finite-difference acceleration."""
    if len(record) < 3:
        raise ValueError("need at least three samples for central differences")
    return record.tau_applied - rb.inverse_dynamics(nominal, record.q, record.dq, record.ddq_fd)


def build_record(nominal, time, q, dq, tau_interval, env_id, traj_id=0):
    """Assemble a record from ``T + 1`` sampled states and ``T`` interval-mean torques."""
    dt = float(time[1] - time[0])
    ddq_all, valid_all = finite_difference_acceleration(dq, dt)
    T = len(tau_interval)
    ddq, valid = ddq_all[:T], valid_all[:T].copy()
    valid[T - 1] = valid_all[T - 1] if T < len(dq) else False
    tau = window_torque(tau_interval)
    rec = TrajectoryRecord(np.asarray(time[:T], float), np.asarray(q[:T], float), np.asarray(dq[:T], float),
                           ddq, tau, np.zeros_like(tau), env_id, traj_id, valid)
    rec.tau_residual = residual_torque(nominal, rec)
    return rec


# --- noise ------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    var_dq: np.ndarray
    var_ddq: np.ndarray
    var_tau: np.ndarray
    var_tau_residual: np.ndarray

    def __post_init__(self):
        for name in ("var_dq", "var_ddq", "var_tau", "var_tau_residual"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)

    @classmethod
    def zero(cls, n):
        z = np.zeros(n)
        return cls(z, z, z, z)

    @classmethod
    def from_dict(cls, d):
        return cls(d["var_dq"], d["var_ddq"], d["var_tau"], d["var_tau_residual"])

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("var_dq", "var_ddq", "var_tau", "var_tau_residual")}


def inject_noise(record: TrajectoryRecord, spec: NoiseSpec, rng: np.random.Generator) -> TrajectoryRecord:
    """Additive zero-mean Gaussian noise on every channel except ``q``."""
    def noisy(x, var):
        return x + rng.standard_normal(x.shape) * np.sqrt(var)

    return TrajectoryRecord(
        record.time.copy(), record.q.copy(), noisy(record.dq, spec.var_dq), noisy(record.ddq_fd, spec.var_ddq),
        noisy(record.tau_applied, spec.var_tau), noisy(record.tau_residual, spec.var_tau_residual),
        record.env_id, record.traj_id, record.valid.copy())


# --- dataset collection ---------------------------------------------------------

@dataclass
class CollectConfig:
    nominal: ManipulatorModel
    limits: ChirpLimits
    tau_limit: np.ndarray
    control_dt: float = 0.02
    sim_dt: float = 0.001
    lqr_q_pos: float = 100.0
    lqr_q_vel: float = 100.0
    lqr_r: float = 0.05
    max_retries: int = 20
    divergence_speed: float = 50.0

    @property
    def substeps(self):
        k = int(round(self.control_dt / self.sim_dt))
        if not np.isclose(k * self.sim_dt, self.control_dt):
            raise ValueError("control_dt must be a multiple of sim_dt")
        return k

    def gains(self):
        return TrackingGains.from_lqr(self.nominal.n_links, self.control_dt, self.lqr_q_pos, self.lqr_q_vel, self.lqr_r)

    def to_dict(self):
        return {
            "nominal": self.nominal.to_dict(), "limits": self.limits.to_dict(), "tau_limit": list(map(float, self.tau_limit)),
            "control_dt": self.control_dt, "sim_dt": self.sim_dt, "lqr_q_pos": self.lqr_q_pos,
            "lqr_q_vel": self.lqr_q_vel, "lqr_r": self.lqr_r, "max_retries": self.max_retries,
            "divergence_speed": self.divergence_speed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["nominal"] = ManipulatorModel.from_dict(d["nominal"])
        d["limits"] = ChirpLimits.from_dict(d["limits"])
        d["tau_limit"] = np.asarray(d["tau_limit"], dtype=float)
        return cls(**d)


@dataclass
class Dataset:
    records: list
    environments: list
    manifest: dict = field(default_factory=dict)

    @property
    def n_rows(self):
        return sum(len(r) for r in self.records)

    def by_env(self):
        out = {}
        for r in self.records:
            out.setdefault(r.env_id, []).append(r)
        return out

    def subset(self, env_ids):
        env_ids = set(env_ids)
        return Dataset([r for r in self.records if r.env_id in env_ids],
                       [e for e in self.environments if e.id in env_ids], dict(self.manifest))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def rollout_tracking(cfg: CollectConfig, true_models, chirps, n_samples):
    """Track chirp references with the nominal computed-torque controller, batched over trajectories.

    Returns sampled times, states (B, n_samples + 1, n) and interval-mean torques (B, n_samples, n),
    plus a per-trajectory divergence flag.
    """
    n = cfg.nominal.n_links
    B = len(chirps)
    model = rb.stack_models(true_models)
    a = np.stack([c.a for c in chirps])
    b = np.stack([c.b for c in chirps])
    q0 = np.stack([c.q0 for c in chirps])
    omega = chirps[0].omega
    gains = cfg.gains()
    f = state_derivative(model)
    times = np.arange(n_samples + 1) * cfg.control_dt
    qd0, dqd0, _ = _chirp(a, b, omega, q0, np.zeros(B))
    x = np.concatenate([qd0, dqd0], axis=-1)
    qs = np.empty((B, n_samples + 1, n))
    dqs = np.empty((B, n_samples + 1, n))
    taus = np.empty((B, n_samples, n))
    bad = np.zeros(B, dtype=bool)
    qs[:, 0], dqs[:, 0] = x[:, :n], x[:, n:]
    for k in range(n_samples):
        qd, dqd, ddqd = _chirp(a, b, omega, q0, np.full(B, times[k]))
        tau = tracking_controller(cfg.nominal, qd, dqd, x[:, :n], x[:, n:], gains, ddqd, cfg.tau_limit)
        for _ in range(cfg.substeps):
            x = rk4(f, x, tau, cfg.sim_dt)
        broken = ~np.all(np.isfinite(x), axis=-1) | np.any(np.abs(x[:, n:]) > cfg.divergence_speed, axis=-1)
        if np.any(broken):
            bad |= broken
            x[broken] = np.concatenate([qd, dqd], axis=-1)[broken]
        taus[:, k] = tau
        qs[:, k + 1], dqs[:, k + 1] = x[:, :n], x[:, n:]
    return times, qs, dqs, taus, bad


def collect_dataset(env_specs, n_traj: int, duration: float, seed: int, cfg: CollectConfig) -> Dataset:
    """Record ``n_traj`` tracked chirp trajectories of ``duration`` seconds per environment."""
    if not env_specs:
        raise ValueError("need at least one environment")
    n_samples = int(round(duration / cfg.control_dt))
    env_seeds = np.random.SeedSequence(seed).spawn(len(env_specs))
    rngs = [np.random.default_rng(s) for s in env_seeds]
    true = [rb.apply_payload(cfg.nominal, e) for e in env_specs]
    chirps = {(e, j): sample_chirp_params(rngs[e], cfg.limits) for e in range(len(env_specs)) for j in range(n_traj)}
    done = {}
    pending = list(chirps)
    discarded = 0
    for _ in range(cfg.max_retries + 1):
        if not pending:
            break
        times, qs, dqs, taus, bad = rollout_tracking(cfg, [true[e] for e, _ in pending],
                                                     [chirps[key] for key in pending], n_samples)
        retry = []
        for i, key in enumerate(pending):
            if bad[i]:
                retry.append(key)
            else:
                done[key] = (qs[i], dqs[i], taus[i])
        for key in retry:
            chirps[key] = sample_chirp_params(rngs[key[0]], cfg.limits)
        discarded += len(retry)
        pending = retry
    if pending:
        raise SimulationDiverged(f"{len(pending)} trajectories kept diverging")
    if discarded:
        log.info("discarded and resampled %d unstable trajectories", discarded)

    records = []
    for (e, j) in sorted(done):
        q, dq, tau = done[(e, j)]
        records.append(build_record(cfg.nominal, times, q, dq, tau, env_specs[e].id, j))
    manifest = {
        "seed": int(seed), "n_traj": int(n_traj), "duration": float(duration), "discarded": int(discarded),
        "environments": [e.to_dict() for e in env_specs], "chirps": {f"{env_specs[e].id}/{j}": chirps[(e, j)].to_dict() for (e, j) in sorted(chirps)},
        "config": cfg.to_dict(),
    }
    manifest["config_hash"] = config_hash({k: manifest[k] for k in ("seed", "n_traj", "duration", "environments", "config")})
    return Dataset(records, list(env_specs), manifest)


def sample_environments(rng: np.random.Generator, n_envs: int, mass_range=(0.0, 2.0), offset_range=0.1,
                        include_unloaded=True, prefix="env"):
    envs = []
    if include_unloaded:
        envs.append(EnvironmentSpec(0.0, (0.0, 0.0), f"{prefix}000"))
    while len(envs) < n_envs:
        m = float(rng.uniform(*mass_range))
        off = rng.uniform(-offset_range, offset_range, size=2)
        envs.append(EnvironmentSpec(m, tuple(float(v) for v in off), f"{prefix}{len(envs):03d}"))
    return envs


# --- disk format ------------------------------------------------------------------

def csv_columns(n):
    cols = ["time"]
    for name in ("q", "dq", "ddq", "tau", "tau_res"):
        cols += [f"{name}_{i + 1}" for i in range(n)]
    return cols + ["env_id"]


def save_dataset(ds: Dataset, out_dir, csv_export=True):
    """Write ``records.jsonl`` (one trajectory per line), ``manifest.json`` and optionally ``records.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "records.jsonl"), "w") as fh:
        for r in ds.records:
            fh.write(json.dumps(r.to_dict()) + "\n")
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(ds.manifest, fh, indent=2)
    if csv_export and ds.records:
        n = ds.records[0].q.shape[1]
        with open(os.path.join(out_dir, "records.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(csv_columns(n))
            for r in ds.records:
                block = np.column_stack([r.time, r.q, r.dq, r.ddq_fd, r.tau_applied, r.tau_residual])
                for row in block:
                    w.writerow([repr(float(v)) for v in row] + [r.env_id])


def load_dataset(out_dir) -> Dataset:
    with open(os.path.join(out_dir, "records.jsonl")) as fh:
        records = [TrajectoryRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    envs = [EnvironmentSpec.from_dict(e) for e in manifest.get("environments", [])]
    return Dataset(records, envs, manifest)
