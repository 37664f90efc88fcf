"""Joint training of the history encoder and the residual Lagrangian networks."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cadelac import delan
from cadelac.checkpoint import Checkpoint
from cadelac.delan import DelanConfig, MlpParams, NetworkParams
from cadelac.encoder import LstmParams, lstm_forward
from cadelac.sim import Dataset, NoiseSpec, config_hash

log = logging.getLogger(__name__)


def _torch_einsum(subscripts, *operands):
    ref = next(o for o in operands if isinstance(o, torch.Tensor))
    ops = [torch.as_tensor(o, dtype=ref.dtype) if not isinstance(o, torch.Tensor) else o for o in operands]
    return torch.einsum(subscripts, *ops)


# array namespace handed to the shared DeLaN code
TORCH_OPS = SimpleNamespace(
    einsum=_torch_einsum, tanh=torch.tanh, sin=torch.sin, cos=torch.cos, sigmoid=torch.sigmoid,
    softplus=lambda x: F.softplus(x, threshold=30.0), zeros_like=torch.zeros_like,
    concatenate=lambda xs, axis=-1: torch.cat(xs, dim=axis),
)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 1024
    rows_per_window: int = 8
    epochs: int = 300
    window: int = 15
    noise: NoiseSpec | None = None
    seed: int = 0
    heldout_fraction: float = 0.2
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    delan: DelanConfig = field(default_factory=DelanConfig)
    lstm_hidden: int = 10
    lstm_layers: int = 5

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.rows_per_window < 1 or self.window < 1:
            raise ValueError("invalid training configuration")
        if self.batch_size % self.rows_per_window:
            raise ValueError("batch_size must be a multiple of rows_per_window")

    def to_dict(self):
        return {
            "lr": self.lr, "batch_size": self.batch_size, "rows_per_window": self.rows_per_window,
            "epochs": self.epochs, "window": self.window, "noise": self.noise.to_dict() if self.noise else None,
            "seed": self.seed, "heldout_fraction": self.heldout_fraction, "grad_clip": self.grad_clip,
            "checkpoint_every": self.checkpoint_every, "delan": self.delan.to_dict(),
            "lstm_hidden": self.lstm_hidden, "lstm_layers": self.lstm_layers,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("noise") is not None:
            d["noise"] = NoiseSpec.from_dict(d["noise"])
        if "delan" in d:
            d["delan"] = DelanConfig.from_dict(d["delan"])
        return cls(**d)


@dataclass
class TrainReport:
    loss_curve: list
    rmse_train: list
    rmse_heldout: list
    rmse_nominal_heldout: list
    train_envs: list
    heldout_envs: list
    wall_time: float
    config_hash: str

    def to_dict(self):
        return dict(self.__dict__)

    def save(self, path):
        """Metrics only; the wall time is left out so reruns produce identical files."""
        d = self.to_dict()
        d.pop("wall_time")
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2)

    def save_loss_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(self.loss_curve):
                w.writerow([i + 1, repr(v)])


# --- model -----------------------------------------------------------------------

class CadelacNet(nn.Module):
    """Torch mirror of the numpy checkpoint: encoder + residual inertia and potential networks."""

    def __init__(self, delan_params: NetworkParams, encoder: LstmParams, dtype=torch.float32):
        super().__init__()
        self.n = delan_params.n
        self.cfg = delan_params.cfg
        t = lambda a: nn.Parameter(torch.as_tensor(np.asarray(a), dtype=dtype).clone())
        self.H_w = nn.ParameterList([t(W) for W in delan_params.theta_H.weights])
        self.H_b = nn.ParameterList([t(b) for b in delan_params.theta_H.biases])
        self.P_w = nn.ParameterList([t(W) for W in delan_params.theta_P.weights])
        self.P_b = nn.ParameterList([t(b) for b in delan_params.theta_P.biases])
        self.lstm = nn.LSTM(encoder.input_dim, encoder.hidden, len(encoder.layers), batch_first=True, dtype=dtype)
        with torch.no_grad():
            for k, (W_ih, W_hh, b_ih, b_hh) in enumerate(encoder.layers):
                for name, arr in zip(("weight_ih", "weight_hh", "bias_ih", "bias_hh"), (W_ih, W_hh, b_ih, b_hh)):
                    getattr(self.lstm, f"{name}_l{k}").copy_(torch.as_tensor(arr, dtype=dtype))
        self.head = nn.Linear(encoder.hidden, encoder.latent_dim, dtype=dtype)
        with torch.no_grad():
            self.head.weight.copy_(torch.as_tensor(encoder.head_W, dtype=dtype))
            self.head.bias.copy_(torch.as_tensor(encoder.head_b, dtype=dtype))
        self.register_buffer("mean", torch.as_tensor(encoder.mean, dtype=dtype).clone())
        self.register_buffer("std", torch.as_tensor(encoder.std, dtype=dtype).clone())

    def network_params(self):
        return NetworkParams(MlpParams(list(self.H_w), list(self.H_b)), MlpParams(list(self.P_w), list(self.P_b)),
                             self.n, self.cfg)

    def encode(self, seqs, lengths):
        """Latent context for right-padded sequences ``(B, T, 3n)`` with true ``lengths``."""
        x = (seqs - self.mean) / self.std
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.lstm(packed)
        return self.head(h_n[-1])

    def residual(self, q, dq, ddq, z):
        return delan.residual_inverse_dynamics(self.network_params(), q, dq, ddq, z, xp=TORCH_OPS)

    def forward(self, batch):
        z = self.encode(batch.seqs, batch.lengths)[batch.seq_index]
        return self.residual(batch.q, batch.dq, batch.ddq, z)

    def to_numpy(self):
        a = lambda p: p.detach().cpu().double().numpy().copy()
        net = NetworkParams(MlpParams([a(W) for W in self.H_w], [a(b) for b in self.H_b]),
                            MlpParams([a(W) for W in self.P_w], [a(b) for b in self.P_b]), self.n, self.cfg)
        layers = [tuple(a(getattr(self.lstm, f"{name}_l{k}")) for name in ("weight_ih", "weight_hh", "bias_ih", "bias_hh"))
                  for k in range(self.lstm.num_layers)]
        enc = LstmParams(layers, a(self.head.weight), a(self.head.bias), a(self.mean), a(self.std))
        return net, enc


def init_model(n, cfg: TrainConfig, rng: np.random.Generator, mean=None, std=None, dtype=torch.float32):
    net = NetworkParams.init(n, cfg.delan, rng)
    enc = LstmParams.init(3 * n, rng, cfg.lstm_hidden, cfg.lstm_layers, cfg.delan.latent_dim)
    if mean is not None:
        enc.mean, enc.std = np.asarray(mean, float), np.asarray(std, float)
    return CadelacNet(net, enc, dtype)


# --- batches --------------------------------------------------------------------

@dataclass
class Batch:
    """Encoder windows plus the rows they predict; ``seq_index[r]`` names the window of row ``r``."""
    seqs: torch.Tensor
    lengths: torch.Tensor
    seq_index: torch.Tensor
    q: torch.Tensor
    dq: torch.Tensor
    ddq: torch.Tensor
    tau: torch.Tensor

    @property
    def n_rows(self):
        return self.q.shape[0]


@dataclass
class TrajectoryArrays:
    """Records stacked to ``(n_traj, T, n)``; history entries are ``[q, dq, tau_res]``."""
    q: np.ndarray
    dq: np.ndarray
    ddq: np.ndarray
    tau: np.ndarray
    valid: np.ndarray
    env: list

    @classmethod
    def from_records(cls, records):
        lengths = {len(r) for r in records}
        if len(lengths) != 1:
            raise ValueError("records must share one length")
        st = lambda k: np.stack([getattr(r, k) for r in records])
        return cls(st("q"), st("dq"), st("ddq_fd"), st("tau_residual"), st("valid"), [r.env_id for r in records])

    @property
    def history(self):
        return np.concatenate([self.q, self.dq, self.tau], axis=-1)

    def with_noise(self, spec: NoiseSpec, rng):
        if spec is None:
            return self
        noisy = lambda x, v: x + rng.standard_normal(x.shape) * np.sqrt(v)
        return TrajectoryArrays(self.q, noisy(self.dq, spec.var_dq), noisy(self.ddq, spec.var_ddq),
                                noisy(self.tau, spec.var_tau_residual), self.valid, self.env)


def first_row(arrays: TrajectoryArrays):
    """First row that has at least one valid history entry before it."""
    first_valid = int(np.argmax(arrays.valid.all(axis=0)))
    return first_valid + 1


def epoch_blocks(arrays: TrajectoryArrays, rows_per_window, rng):
    """``(traj, start)`` blocks covering every predictable row once, with a random phase per trajectory."""
    T = arrays.q.shape[1]
    start = first_row(arrays)
    blocks = []
    for i in range(arrays.q.shape[0]):
        phase = int(rng.integers(rows_per_window))
        s = start - phase
        while s < T:
            blocks.append((i, max(s, start), min(s + rows_per_window, T)))
            s += rows_per_window
    return blocks


def make_batch(arrays: TrajectoryArrays, blocks, window, dtype=torch.float32):
    hist = arrays.history
    h0 = first_row(arrays) - 1
    n_in = hist.shape[-1]
    seqs = np.zeros((len(blocks), window, n_in))
    lengths = np.empty(len(blocks), dtype=np.int64)
    seq_index, rows = [], []
    for b, (i, s, e) in enumerate(blocks):
        lo = max(h0, s - window)
        seqs[b, : s - lo] = hist[i, lo:s]
        lengths[b] = s - lo
        seq_index.extend([b] * (e - s))
        rows.extend((i, t) for t in range(s, e))
    ti, tt = np.array(rows).T
    t = lambda x: torch.as_tensor(x, dtype=dtype)
    return Batch(t(seqs), torch.as_tensor(lengths), torch.as_tensor(np.array(seq_index)),
                 t(arrays.q[ti, tt]), t(arrays.dq[ti, tt]), t(arrays.ddq[ti, tt]), t(arrays.tau[ti, tt]))


def loss(model: CadelacNet, batch: Batch):
    """Mean over rows of the squared residual-torque error."""
    err = batch.tau - model(batch)
    return (err * err).sum(-1).mean()


def gradients(model: CadelacNet, batch: Batch):
    model.zero_grad()
    value = loss(model, batch)
    value.backward()
    # parameters the torque does not depend on (the potential's output bias) get no grad
    return value.item(), {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                          for name, p in model.named_parameters()}


# --- training ---------------------------------------------------------------------

def split_environments(env_ids, heldout_fraction, seed):
    env_ids = sorted(set(env_ids))
    if len(env_ids) < 2:
        raise ValueError("need at least two environments for an environment-level split")
    order = np.random.default_rng(seed).permutation(len(env_ids))
    n_held = min(len(env_ids) - 1, max(1, int(round(heldout_fraction * len(env_ids)))))
    held = sorted(env_ids[i] for i in order[:n_held])
    return [e for e in env_ids if e not in held], held


def normalization(arrays: TrajectoryArrays):
    h = arrays.history[arrays.valid]
    std = h.std(axis=0)
    return h.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def train(dataset: Dataset, cfg: TrainConfig, checkpoint_path=None):
    """Fit encoder and residual networks; returns ``(Checkpoint, TrainReport)``."""
    t_start = time.time()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train_envs, held_envs = split_environments([r.env_id for r in dataset.records], cfg.heldout_fraction, cfg.seed)
    train_set = dataset.subset(train_envs)
    arrays = TrajectoryArrays.from_records(train_set.records)
    n = arrays.q.shape[-1]
    mean, std = normalization(arrays)
    model = init_model(n, cfg, rng, mean, std)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    per_batch = cfg.batch_size // cfg.rows_per_window
    manifest = {"dataset_hash": dataset.manifest.get("config_hash"), "train_config": cfg.to_dict(),
                "train_envs": train_envs, "heldout_envs": held_envs}
    manifest["hash"] = config_hash(manifest)
    curve = []
    for epoch in range(cfg.epochs):
        noisy = arrays.with_noise(cfg.noise, rng)
        blocks = epoch_blocks(arrays, cfg.rows_per_window, rng)
        order = rng.permutation(len(blocks))
        total, rows = 0.0, 0
        for k in range(0, len(order), per_batch):
            batch = make_batch(noisy, [blocks[j] for j in order[k:k + per_batch]], cfg.window)
            opt.zero_grad()
            value = loss(model, batch)
            if not torch.isfinite(value):
                raise RuntimeError(f"loss became non-finite at epoch {epoch + 1}, batch {k // per_batch}")
            value.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += value.item() * batch.n_rows
            rows += batch.n_rows
        curve.append(total / rows)
        log.info("epoch %d loss %.5g", epoch + 1, curve[-1])
        if checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _checkpoint(model, cfg, manifest).save(checkpoint_path)
    ckpt = _checkpoint(model, cfg, manifest)
    if checkpoint_path:
        ckpt.save(checkpoint_path)
    rmse_train = evaluate_model(ckpt, train_set)
    held = evaluate_model(ckpt, dataset.subset(held_envs))
    report = TrainReport(curve, rmse_train["model"], held["model"], held["nominal"], train_envs, held_envs,
                         time.time() - t_start, manifest["hash"])
    return ckpt, report


def _checkpoint(model, cfg, manifest):
    net, enc = model.to_numpy()
    return Checkpoint(net, enc, cfg.window, dict(manifest))


# --- evaluation ---------------------------------------------------------------------

def causal_latents(encoder: LstmParams, arrays: TrajectoryArrays, window):
    """Latent context for every predictable row, encoding the preceding window as the controller does."""
    hist = arrays.history
    n_traj, T, _ = hist.shape
    h0 = first_row(arrays) - 1
    start = h0 + 1
    z = np.full((n_traj, T, encoder.latent_dim), np.nan)
    # rows with a full window share one batched pass; shorter startup windows go by length
    for t0 in range(start, min(start + window, T)):
        length = t0 - h0
        if length >= window:
            break
        z[:, t0] = lstm_forward(encoder, hist[:, h0:t0])
    full = np.arange(max(start, h0 + window), T)
    if len(full):
        idx = full[:, None] + np.arange(-window, 0)[None, :]
        z[:, full] = lstm_forward(encoder, hist[:, idx])
    return z, start


def predict_residuals(ckpt: Checkpoint, records):
    arrays = TrajectoryArrays.from_records(records)
    z, start = causal_latents(ckpt.encoder, arrays, ckpt.n_history)
    pred = np.full_like(arrays.tau, np.nan)
    pred[:, start:] = delan.residual_inverse_dynamics(ckpt.delan, arrays.q[:, start:], arrays.dq[:, start:],
                                                      arrays.ddq[:, start:], z[:, start:])
    return arrays, pred, start


def evaluate_model(ckpt: Checkpoint, dataset: Dataset):
    """Per-joint residual-torque RMSE of the model and of the zero predictor on the same rows."""
    arrays, pred, start = predict_residuals(ckpt, dataset.records)
    mask = arrays.valid.copy()
    mask[:, :start] = False
    target = arrays.tau[mask]
    return {
        "model": np.sqrt(((target - pred[mask]) ** 2).mean(axis=0)).tolist(),
        "nominal": np.sqrt((target ** 2).mean(axis=0)).tolist(),
        "rows": int(mask.sum()),
    }


def evaluate_by_env(ckpt: Checkpoint, dataset: Dataset):
    return {env: evaluate_model(ckpt, Dataset(recs, [])) for env, recs in sorted(dataset.by_env().items())}
