"""Closed-loop scenarios, reference generators, metrics and report export."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from cadelac import delan
from cadelac import rigid_body as rb
from cadelac.checkpoint import Checkpoint
from cadelac.ekf import EkfConfig, ExternalForceEkf
from cadelac.mpc import (InnerLoopGains, Measurement, MpcConfig, MpcController, ReferenceWindow,
                         inner_loop_torque, robot_joint_torque)
from cadelac.rigid_body import EnvironmentSpec, ManipulatorModel
from cadelac.sim import ChirpLimits, _chirp, rk4, sample_chirp_params, state_derivative

log = logging.getLogger(__name__)


# --- references -------------------------------------------------------------------------

@dataclass(frozen=True)
class LemniscateParams:
    a1: float = 0.40
    a2: float = 0.15
    f: float = 0.7
    q_start: tuple = (0.0, 0.0, 0.0)

    @property
    def omega(self):
        return 2 * np.pi * self.f

    def to_dict(self):
        return {"a1": self.a1, "a2": self.a2, "f": self.f, "q_start": list(self.q_start)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["q_start"] = tuple(d["q_start"])
        return cls(**d)


def lemniscate_reference(params: LemniscateParams, t, p0):
    """Planar figure-eight around ``p0``: ``(a2 sin wt, a1 sin wt cos wt)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    s, c = np.sin(params.omega * t), np.cos(params.omega * t)
    return np.asarray(p0, dtype=float) + np.stack([params.a2 * s, params.a1 * s * c], axis=-1)


def ik_solve(model: ManipulatorModel, target, q_init, damping=1e-3, tol=1e-10, max_iter=200):
    """Damped least-squares inverse kinematics from ``q_init``; returns ``(q, position error)``."""
    q = np.array(q_init, dtype=float)
    for _ in range(max_iter):
        p, J = rb.ee_kinematics(model, q)
        e = target - p
        if np.linalg.norm(e) < tol:
            break
        q = q + J.T @ np.linalg.solve(J @ J.T + damping ** 2 * np.eye(2), e)
    return q, float(np.linalg.norm(target - rb.ee_position(model, q)))


def ik_joint_reference(model: ManipulatorModel, p_ref, q_init, dt, tol=1e-6):
    """Track sampled targets by warm-started IK; velocities and accelerations by central differences."""
    p_ref = np.asarray(p_ref, dtype=float)
    qs = np.empty((len(p_ref), model.n_links))
    q = np.asarray(q_init, dtype=float)
    worst = 0.0
    for k, p in enumerate(p_ref):
        q, err = ik_solve(model, p, q)
        worst = max(worst, err)
        qs[k] = q
    if worst > tol:
        raise ValueError(f"unreachable targets along the path (worst residual {worst:.2e} m); scale the reference")
    return qs, np.gradient(qs, dt, axis=0, edge_order=2)


class Reference:
    """Joint reference queried at arbitrary times; holds the final point past its end."""

    def __init__(self, fn, duration):
        self._fn = fn
        self.duration = duration

    def __call__(self, t):
        return self._fn(np.minimum(np.asarray(t, dtype=float), self.duration))

    def window(self, t0, horizon, dt):
        q, dq, ddq = self(t0 + dt * np.arange(horizon + 1))
        return ReferenceWindow(np.concatenate([q, dq], axis=-1), ddq)

    @classmethod
    def chirp(cls, params, duration):
        return cls(lambda t: _chirp(params.a, params.b, params.omega, params.q0, t), duration)

    @classmethod
    def hold(cls, q, duration):
        q = np.asarray(q, dtype=float)

        def fn(t):
            shape = np.shape(t) + q.shape
            return np.broadcast_to(q, shape).copy(), np.zeros(shape), np.zeros(shape)

        return cls(fn, duration)

    @classmethod
    def sampled(cls, times, q, dq, duration):
        """Linear interpolation of sampled positions/velocities; accelerations by differencing ``dq``."""
        ddq = np.gradient(dq, times, axis=0, edge_order=2)

        def fn(t):
            return tuple(np.stack([np.interp(t, times, a[:, j]) for j in range(a.shape[1])], axis=-1)
                         for a in (q, dq, ddq))

        return _ScalarAware(fn, duration)

    @classmethod
    def lemniscate(cls, model, params: LemniscateParams, duration, dt):
        q_start = np.asarray(params.q_start, dtype=float)
        p0 = rb.ee_position(model, q_start)
        times = np.arange(int(round(duration / dt)) + 1) * dt
        q, dq = ik_joint_reference(model, lemniscate_reference(params, times, p0), q_start, dt)
        return cls.sampled(times, q, dq, duration)


class _ScalarAware(Reference):
    def __call__(self, t):
        scalar = np.ndim(t) == 0
        out = super().__call__(np.atleast_1d(t))
        return tuple(o[0] for o in out) if scalar else out


# --- configuration ------------------------------------------------------------------------

@dataclass
class HarnessConfig:
    """Settings shared by every scenario of an experiment."""
    nominal: ManipulatorModel
    mpc: MpcConfig
    ekf: EkfConfig
    gains: InnerLoopGains
    chirp_limits: ChirpLimits
    lemniscate: LemniscateParams = field(default_factory=LemniscateParams)
    control_dt: float = 0.02
    sim_dt: float = 0.001
    cutoff_hz: float = 2.0
    filter_z: bool = True
    divergence_speed: float = 50.0

    @property
    def substeps(self):
        return int(round(self.control_dt / self.sim_dt))

    def to_dict(self):
        return {"nominal": self.nominal.to_dict(), "mpc": self.mpc.to_dict(), "ekf": self.ekf.to_dict(),
                "gains": {"kp": self.gains.kp.tolist(), "kd": self.gains.kd.tolist()},
                "chirp_limits": self.chirp_limits.to_dict(), "lemniscate": self.lemniscate.to_dict(),
                "control_dt": self.control_dt, "sim_dt": self.sim_dt, "cutoff_hz": self.cutoff_hz,
                "filter_z": self.filter_z, "divergence_speed": self.divergence_speed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["nominal"] = ManipulatorModel.from_dict(d["nominal"])
        d["mpc"] = MpcConfig.from_dict(d["mpc"])
        d["ekf"] = EkfConfig.from_dict(d["ekf"])
        d["gains"] = InnerLoopGains(**d["gains"])
        d["chirp_limits"] = ChirpLimits.from_dict(d["chirp_limits"])
        d["lemniscate"] = LemniscateParams.from_dict(d["lemniscate"])
        return cls(**d)


@dataclass
class ScenarioConfig:
    """One closed-loop rollout.  ``schedule`` lists ``(t_switch, env)`` after the initial ``env``."""
    controller: str
    env: EnvironmentSpec
    reference: str = "chirp"
    duration: float = 10.0
    seed: int = 0
    inner_loop: bool = False
    schedule: list = field(default_factory=list)
    q_start: tuple | None = None
    var_dq: float | tuple = 0.0  # velocity measurement noise, scalar or per joint
    name: str = ""

    def __post_init__(self):
        if self.controller not in MpcController.KINDS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.reference not in ("chirp", "lemniscate", "hold"):
            raise ValueError(f"unknown reference {self.reference!r}")
        if not self.name:
            self.name = f"{self.controller}-{self.env.id}-{self.reference}-s{self.seed}"

    @property
    def pair_key(self):
        """Scenarios that differ only in the controller share this key."""
        return (self.env.id, self.reference, self.seed, self.duration, self.inner_loop,
                tuple((t, e.id) for t, e in self.schedule))

    def env_at(self, t):
        env = self.env
        for t_s, e in self.schedule:
            if t >= t_s - 1e-12:
                env = e
        return env

    def to_dict(self):
        return {"controller": self.controller, "env": self.env.to_dict(), "reference": self.reference,
                "duration": self.duration, "seed": self.seed, "inner_loop": self.inner_loop,
                "schedule": [[t, e.to_dict()] for t, e in self.schedule],
                "q_start": list(self.q_start) if self.q_start is not None else None,
                "var_dq": np.asarray(self.var_dq, dtype=float).tolist(),
                "name": self.name}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["env"] = EnvironmentSpec.from_dict(d["env"])
        d["schedule"] = [(float(t), EnvironmentSpec.from_dict(e)) for t, e in d.get("schedule", [])]
        if d.get("q_start") is not None:
            d["q_start"] = tuple(d["q_start"])
        return cls(**d)


def build_reference(hcfg: HarnessConfig, sc: ScenarioConfig) -> Reference:
    horizon_time = sc.duration + (hcfg.mpc.horizon + 1) * hcfg.control_dt
    if sc.reference == "chirp":
        params = sample_chirp_params(np.random.default_rng([sc.seed, 1]), hcfg.chirp_limits)
        return Reference.chirp(params, horizon_time)
    if sc.reference == "hold":
        q = sc.q_start if sc.q_start is not None else np.zeros(hcfg.nominal.n_links)
        return Reference.hold(q, horizon_time)
    lem = hcfg.lemniscate if sc.q_start is None else LemniscateParams(
        hcfg.lemniscate.a1, hcfg.lemniscate.a2, hcfg.lemniscate.f, tuple(sc.q_start))
    return Reference.lemniscate(hcfg.nominal, lem, horizon_time, hcfg.control_dt)


def build_controller(hcfg: HarnessConfig, sc: ScenarioConfig, checkpoint: Checkpoint | None):
    kw = {}
    if sc.controller == "cadelac":
        kw["checkpoint"] = checkpoint
    elif sc.controller == "ekf":
        kw["ekf"] = ExternalForceEkf(hcfg.nominal, hcfg.ekf)
    elif sc.controller == "perfect":
        kw["true_model"] = rb.apply_payload(hcfg.nominal, sc.env)
    return MpcController(hcfg.mpc, hcfg.nominal, sc.controller, cutoff_hz=hcfg.cutoff_hz, filter_z=hcfg.filter_z, **kw)


# --- rollouts --------------------------------------------------------------------------------

@dataclass
class RolloutLog:
    scenario: ScenarioConfig
    time: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    q_d: np.ndarray
    dq_d: np.ndarray
    tau_mpc: np.ndarray
    tau_cmd: np.ndarray
    tau_applied: np.ndarray  # mean joint torque over the interval starting at each sample
    z: np.ndarray
    force: np.ndarray
    solve_time_ms: np.ndarray
    model_time_ms: np.ndarray
    status: list
    diverged: bool = False

    @property
    def n(self):
        return self.q.shape[1]


def run_scenarios(hcfg: HarnessConfig, scenarios, checkpoint: Checkpoint | None = None):
    """Run rollouts in lockstep so the plant integration is batched; returns one log per scenario."""
    if not scenarios:
        return []
    durations = {sc.duration for sc in scenarios}
    if len(durations) != 1:
        raise ValueError("lockstep rollouts need a common duration")
    n, B = hcfg.nominal.n_links, len(scenarios)
    K = int(round(scenarios[0].duration / hcfg.control_dt))
    dz = checkpoint.delan.cfg.latent_dim if checkpoint is not None else 0
    refs = [build_reference(hcfg, sc) for sc in scenarios]
    ctrls = [build_controller(hcfg, sc, checkpoint) for sc in scenarios]
    rngs = [np.random.default_rng([sc.seed, 2]) for sc in scenarios]
    x = np.stack([np.concatenate(ref(0.0)[:2]) for ref in refs])
    logs = {k: np.full((B, K + 1, n), np.nan) for k in ("q", "dq", "q_d", "dq_d", "tau_mpc", "tau_cmd", "tau_applied")}
    z_log = np.full((B, K + 1, dz), np.nan)
    f_log = np.full((B, K + 1, 2), np.nan)
    solve_ms = np.full((B, K + 1), np.nan)
    model_ms = np.full((B, K + 1), np.nan)
    status = [[""] * (K + 1) for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    tau_last = [None] * B
    sub = hcfg.substeps
    h = hcfg.sim_dt

    def plant(t):
        return rb.stack_models([rb.apply_payload(hcfg.nominal, sc.env_at(t)) for sc in scenarios])

    for k in range(K + 1):
        t = k * hcfg.control_dt
        true = plant(t)
        f = state_derivative(true)
        tau_mpc = np.zeros((B, n))
        for b in range(B):
            q_d, dq_d, _ = refs[b](t)
            logs["q"][b, k], logs["dq"][b, k] = x[b, :n], x[b, n:]
            logs["q_d"][b, k], logs["dq_d"][b, k] = q_d, dq_d
            if not alive[b]:
                continue
            var = np.asarray(scenarios[b].var_dq, dtype=float)
            dq_meas = x[b, n:] + (rngs[b].standard_normal(n) * np.sqrt(var) if np.any(var) else 0.0)
            meas = Measurement(t, x[b, :n].copy(), dq_meas, tau_last[b])
            out = ctrls[b].control_step(meas, refs[b].window(t, hcfg.mpc.horizon, hcfg.control_dt))
            tau_mpc[b] = out.tau
            logs["tau_mpc"][b, k] = out.tau
            if out.z is not None:
                z_log[b, k] = out.z
            if out.tau_ext is not None:
                f_log[b, k] = ctrls[b].ekf.state.force
            solve_ms[b, k] = 1e3 * out.solve_time
            model_ms[b, k] = 1e3 * out.solution.model_time
            status[b][k] = out.status
        if k == K:
            break
        # integrate one control interval on the fine grid
        inner = np.array([sc.inner_loop for sc in scenarios])
        tau_sum = np.zeros((B, n))
        cmd_first = None
        for j in range(sub):
            tj = t + j * h
            tau = tau_mpc.copy()
            if inner.any():
                cmd = np.zeros((B, n))
                for b in np.flatnonzero(inner):
                    q_d, dq_d, _ = refs[b](tj)
                    cmd[b] = inner_loop_torque(tau_mpc[b], q_d, dq_d, x[b, :n], x[b, n:], hcfg.gains, hcfg.nominal,
                                               hcfg.mpc.tau_min, hcfg.mpc.tau_max)
                    tau[b] = robot_joint_torque(cmd[b], x[b, :n], hcfg.nominal)
                if cmd_first is None:
                    cmd_first = cmd
            x = rk4(f, x, tau, h)
            tau_sum += tau
        logs["tau_cmd"][:, k] = np.where(inner[:, None], cmd_first if cmd_first is not None else 0.0, tau_mpc)
        mean_tau = tau_sum / sub
        logs["tau_applied"][:, k] = mean_tau
        bad = ~np.all(np.isfinite(x), axis=1) | np.any(np.abs(x[:, n:]) > hcfg.divergence_speed, axis=1)
        for b in np.flatnonzero(bad & alive):
            log.warning("rollout %s diverged at t=%.2f s", scenarios[b].name, t)
            alive[b] = False
        x[~alive] = np.where(np.isfinite(x[~alive]), x[~alive], 0.0)
        tau_last = [mean_tau[b].copy() for b in range(B)]

    times = np.arange(K + 1) * hcfg.control_dt
    return [RolloutLog(sc, times, logs["q"][b], logs["dq"][b], logs["q_d"][b], logs["dq_d"][b], logs["tau_mpc"][b],
                       logs["tau_cmd"][b], logs["tau_applied"][b], z_log[b], f_log[b], solve_ms[b], model_ms[b],
                       status[b], diverged=not alive[b])
            for b, sc in enumerate(scenarios)]


# --- metrics --------------------------------------------------------------------------------

def measured_residuals(nominal: ManipulatorModel, lg: RolloutLog, dt):
    """Residual torque at rows ``1..K-1`` from central differences, as in the dataset."""
    ddq = (lg.dq[2:] - lg.dq[:-2]) / (2 * dt)
    tau = 0.5 * (lg.tau_applied[:-2] + lg.tau_applied[1:-1])
    return tau - rb.inverse_dynamics(nominal, lg.q[1:-1], lg.dq[1:-1], ddq), ddq


def inferred_residuals(nominal, lg: RolloutLog, dt, checkpoint: Checkpoint | None):
    """Residual torque each controller's model attributes to the plant at rows ``1..K-1``."""
    kind = lg.scenario.controller
    _, ddq = measured_residuals(nominal, lg, dt)
    rows = slice(1, -1)
    if kind == "cadelac":
        z = lg.z[rows]
        ok = np.all(np.isfinite(z), axis=1)
        pred = np.zeros_like(ddq)
        if ok.any():
            pred[ok] = delan.residual_inverse_dynamics(checkpoint.delan, lg.q[rows][ok], lg.dq[rows][ok], ddq[ok], z[ok])
        return pred
    if kind == "ekf":
        f = np.nan_to_num(lg.force[rows])
        _, J = rb.ee_kinematics(nominal, lg.q[rows])
        # the filter models tau + J^T f, so its residual is -J^T f
        return -np.einsum("tki,tk->ti", J, f)
    if kind == "perfect":
        true = rb.apply_payload(nominal, lg.scenario.env)
        return (rb.inverse_dynamics(true, lg.q[rows], lg.dq[rows], ddq)
                - rb.inverse_dynamics(nominal, lg.q[rows], lg.dq[rows], ddq))
    return np.zeros_like(ddq)


def _rmse(e, axis=0):
    return np.sqrt(np.mean(np.asarray(e) ** 2, axis=axis))


def ee_error(nominal, lg: RolloutLog, rows=slice(None)):
    p = rb.ee_position(nominal, lg.q[rows])
    p_d = rb.ee_position(nominal, lg.q_d[rows])
    return np.linalg.norm(p - p_d, axis=-1)


def metrics_from_log(nominal, lg: RolloutLog, dt, checkpoint=None):
    if lg.diverged:
        return {"name": lg.scenario.name, "controller": lg.scenario.controller, "pair_key": list(map(str, lg.scenario.pair_key)),
                "diverged": True}
    res, _ = measured_residuals(nominal, lg, dt)
    pred = inferred_residuals(nominal, lg, dt, checkpoint)
    st = np.array(lg.solve_time_ms)
    mt = np.array(lg.model_time_ms)
    return {
        "name": lg.scenario.name,
        "controller": lg.scenario.controller,
        "env": lg.scenario.env.id,
        "pair_key": list(map(str, lg.scenario.pair_key)),
        "diverged": False,
        "rmse_q": _rmse(lg.q - lg.q_d).tolist(),
        "rmse_dq": _rmse(lg.dq - lg.dq_d).tolist(),
        "rmse_ee": float(_rmse(ee_error(nominal, lg))),
        "rmse_residual": _rmse(res - pred).tolist(),
        "rmse_residual_nominal": _rmse(res).tolist(),
        "solve_ms_mean": float(np.nanmean(st)),
        "solve_ms_std": float(np.nanstd(st)),
        "model_ms_mean": float(np.nanmean(mt)),
        "saturated_steps": int(sum(s == "saturated" for s in lg.status)),
        "fallback_steps": int(sum(s == "fallback" for s in lg.status)),
    }


def window_rmse_ee(nominal, lg: RolloutLog, t0, t1):
    rows = (lg.time >= t0 - 1e-12) & (lg.time < t1 - 1e-12)
    return float(_rmse(ee_error(nominal, lg, rows)))


def latent_departure(lg: RolloutLog, t_switch, dt, band_time=1.0, rel_margin=0.05):
    """Control steps after ``t_switch`` until some latent coordinate leaves its pre-switch band.

    The band is the min/max over ``band_time`` seconds before the switch, widened by ``rel_margin``
    of the overall latent spread.  Returns ``None`` if the trace never departs.
    """
    k_s = int(round(t_switch / dt))
    k_b = max(0, k_s - int(round(band_time / dt)))
    pre = lg.z[k_b:k_s]
    pre = pre[np.all(np.isfinite(pre), axis=1)]
    if len(pre) == 0:
        return None
    lo, hi = pre.min(0), pre.max(0)
    margin = rel_margin * np.maximum(np.nanmax(lg.z, 0) - np.nanmin(lg.z, 0), 1e-12)
    for k in range(k_s, len(lg.z)):
        if np.any((lg.z[k] < lo - margin) | (lg.z[k] > hi + margin)):
            return k - k_s
    return None


# --- scenarios ---------------------------------------------------------------------------------

def run_scenario(hcfg: HarnessConfig, sc: ScenarioConfig, checkpoint=None):
    lg = run_scenarios(hcfg, [sc], checkpoint)[0]
    return metrics_from_log(hcfg.nominal, lg, hcfg.control_dt, checkpoint), lg


def context_switch_scenario(hcfg: HarnessConfig, sc: ScenarioConfig, checkpoint=None, window=2.0):
    """Rollout with mid-run payload swaps; adds post-switch tracking windows and latent departures."""
    if not sc.schedule:
        raise ValueError("context switching needs a schedule")
    lg = run_scenarios(hcfg, [sc], checkpoint)[0]
    return context_switch_metrics(hcfg, lg, checkpoint, window), lg


def context_switch_metrics(hcfg, lg: RolloutLog, checkpoint=None, window=2.0):
    report = metrics_from_log(hcfg.nominal, lg, hcfg.control_dt, checkpoint)
    if lg.diverged:
        return report
    report["switches"] = []
    for t_s, env in lg.scenario.schedule:
        entry = {"t": t_s, "env": env.id, "rmse_ee_post": window_rmse_ee(hcfg.nominal, lg, t_s, t_s + window)}
        if lg.scenario.controller == "cadelac":
            entry["latent_departure_steps"] = latent_departure(lg, t_s, hcfg.control_dt)
        report["switches"].append(entry)
    return report


# --- export ------------------------------------------------------------------------------------

def log_columns(n, dz):
    cols = ["time"]
    for name in ("q", "dq", "q_d", "dq_d", "tau_mpc", "tau_cmd", "tau_applied"):
        cols += [f"{name}_{i + 1}" for i in range(n)]
    cols += [f"z_{i + 1}" for i in range(dz)] + ["f_x", "f_y", "solve_time_ms", "model_time_ms", "status"]
    return cols


def write_log_csv(lg: RolloutLog, path):
    n, dz = lg.n, lg.z.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(log_columns(n, dz))
        for k in range(len(lg.time)):
            row = [lg.time[k]]
            for arr in (lg.q, lg.dq, lg.q_d, lg.dq_d, lg.tau_mpc, lg.tau_cmd, lg.tau_applied, lg.z, lg.force):
                row += list(arr[k])
            row += [lg.solve_time_ms[k], lg.model_time_ms[k]]
            w.writerow([repr(float(v)) for v in row] + [lg.status[k]])


def read_log_csv(path, scenario: ScenarioConfig, diverged=False) -> RolloutLog:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(c.startswith("q_") and not c.startswith("q_d") for c in header)
    dz = sum(c.startswith("z_") for c in header)
    data = np.array([[float(v) for v in r[:-1]] for r in body])
    status = [r[-1] for r in body]
    col = 1
    parts = []
    for width in (n, n, n, n, n, n, n, dz, 2):
        parts.append(data[:, col:col + width])
        col += width
    return RolloutLog(scenario, data[:, 0], *parts, data[:, col], data[:, col + 1], status, diverged)


TIMING_KEYS = ("solve_ms_mean", "solve_ms_std", "model_ms_mean")


def _mean_list(vals):
    return np.mean(np.array(vals, dtype=float), axis=0).tolist()


def aggregate(reports):
    """Per-controller means, paired relative reductions versus the nominal controller, and timings."""
    if not reports:
        raise ValueError("need at least one report")
    by_ctrl = {}
    for r in reports:
        by_ctrl.setdefault(r["controller"], []).append(r)
    table = {}
    for ctrl, rs in sorted(by_ctrl.items()):
        ok = [r for r in rs if not r.get("diverged")]
        row = {"runs": len(rs), "diverged": len(rs) - len(ok)}
        if ok:
            for key in ("rmse_q", "rmse_dq", "rmse_residual", "rmse_residual_nominal"):
                row[key] = _mean_list([r[key] for r in ok])
            for key in ("rmse_ee",) + TIMING_KEYS:
                if all(key in r for r in ok):
                    row[key] = float(np.mean([r[key] for r in ok]))
            by_env = {}
            for r in ok:
                by_env.setdefault(r["env"], []).append(r["rmse_ee"])
            row["rmse_ee_env_mean"] = float(np.mean([np.mean(v) for v in by_env.values()]))
        table[ctrl] = row
    reductions = {}
    nominal = {tuple(r["pair_key"]): r for r in by_ctrl.get("nominal", []) if not r.get("diverged")}
    for ctrl, rs in by_ctrl.items():
        if ctrl == "nominal":
            continue
        pairs = [(nominal[tuple(r["pair_key"])], r) for r in rs
                 if not r.get("diverged") and tuple(r["pair_key"]) in nominal]
        if pairs:
            base = np.mean([a["rmse_ee"] for a, _ in pairs])
            new = np.mean([b["rmse_ee"] for _, b in pairs])
            reductions[ctrl] = {"pairs": len(pairs), "rmse_ee_nominal": float(base), "rmse_ee": float(new),
                                "reduction": float(1.0 - new / base)}
    return {"controllers": table, "reductions": reductions}


def aggregate_and_export(reports, out_dir):
    """Write per-run and aggregate tables as JSON and CSV; returns the aggregate."""
    os.makedirs(out_dir, exist_ok=True)
    agg = aggregate(reports)

    def strip(d):
        return {k: v for k, v in d.items() if k not in TIMING_KEYS}

    # wall-clock numbers vary between reruns, so they live apart from the metric files
    with open(os.path.join(out_dir, "runs.json"), "w") as fh:
        json.dump([strip(r) for r in reports], fh, indent=2)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump({"controllers": {c: strip(row) for c, row in agg["controllers"].items()},
                   "reductions": agg["reductions"]}, fh, indent=2)
    with open(os.path.join(out_dir, "timing.json"), "w") as fh:
        json.dump({c: {k: row[k] for k in TIMING_KEYS if k in row} for c, row in agg["controllers"].items()},
                  fh, indent=2)
    n = max((len(r["rmse_q"]) for r in reports if "rmse_q" in r), default=0)
    with open(os.path.join(out_dir, "tracking.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "runs", "rmse_ee", "rmse_ee_env_mean"] + [f"rmse_q_{i + 1}" for i in range(n)]
                   + [f"rmse_dq_{i + 1}" for i in range(n)])
        for ctrl, row in agg["controllers"].items():
            if "rmse_q" in row:
                w.writerow([ctrl, row["runs"], repr(row["rmse_ee"]), repr(row["rmse_ee_env_mean"])]
                           + [repr(v) for v in row["rmse_q"]] + [repr(v) for v in row["rmse_dq"]])
    with open(os.path.join(out_dir, "residual.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller"] + [f"rmse_res_{i + 1}" for i in range(n)])
        for ctrl, row in agg["controllers"].items():
            if "rmse_residual" in row:
                w.writerow([ctrl] + [repr(v) for v in row["rmse_residual"]])
    with open(os.path.join(out_dir, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "total_ms_mean", "total_ms_std", "model_ms_mean"])
        for ctrl, row in agg["controllers"].items():
            if "solve_ms_mean" in row:
                w.writerow([ctrl, repr(row["solve_ms_mean"]), repr(row["solve_ms_std"]), repr(row["model_ms_mean"])])
    return agg
