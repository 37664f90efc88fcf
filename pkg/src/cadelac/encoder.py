"""History encoder: stacked LSTM over recent ``[q, dq, tau_res]`` entries, ring buffer and low-pass filter."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from cadelac import autodiff as ad


@dataclass
class LstmParams:
    """Stacked LSTM with torch's layout: gate rows ordered (input, forget, cell, output).

    ``layers[i] = (W_ih, W_hh, b_ih, b_hh)`` with ``W_ih`` shaped ``(4h, in)``.
    ``mean``/``std`` standardize each input dimension before the first layer.
    """
    layers: list
    head_W: np.ndarray  # (d_z, h)
    head_b: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def input_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def hidden(self):
        return self.layers[0][1].shape[1]

    @property
    def latent_dim(self):
        return self.head_W.shape[0]

    @classmethod
    def init(cls, input_dim, rng: np.random.Generator, hidden=10, n_layers=5, latent_dim=10):
        # same distribution torch uses for nn.LSTM / nn.Linear
        k = 1.0 / np.sqrt(hidden)
        layers = []
        for i in range(n_layers):
            d_in = input_dim if i == 0 else hidden
            layers.append(tuple(rng.uniform(-k, k, size=s) for s in
                                [(4 * hidden, d_in), (4 * hidden, hidden), (4 * hidden,), (4 * hidden,)]))
        return cls(layers, rng.uniform(-k, k, size=(latent_dim, hidden)), rng.uniform(-k, k, size=latent_dim),
                   np.zeros(input_dim), np.ones(input_dim))

    @classmethod
    def zeros(cls, input_dim, hidden=10, n_layers=5, latent_dim=10):
        p = cls.init(input_dim, np.random.default_rng(0), hidden, n_layers, latent_dim)
        return p.map(np.zeros_like, keep_norm=True)

    def map(self, fn, keep_norm=True):
        return LstmParams([tuple(fn(a) for a in layer) for layer in self.layers], fn(self.head_W), fn(self.head_b),
                          self.mean if keep_norm else fn(self.mean), self.std if keep_norm else fn(self.std))

    def to_dict(self):
        return {
            "layers": [[np.asarray(a).tolist() for a in layer] for layer in self.layers],
            "head_W": np.asarray(self.head_W).tolist(), "head_b": np.asarray(self.head_b).tolist(),
            "mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda x: np.asarray(x, dtype=float)
        return cls([tuple(arr(a) for a in layer) for layer in d["layers"]], arr(d["head_W"]), arr(d["head_b"]),
                   arr(d["mean"]), arr(d["std"]))


def _sigmoid(x):
    return ad.sigmoid_np(np.asarray(x, dtype=float))


def lstm_forward(params: LstmParams, sequence):
    """Encode ``sequence`` (``(..., T, 3n)``, oldest first) to the latent context of the last step."""
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim < 2 or seq.shape[-2] < 1:
        raise ValueError("need a sequence of at least one entry")
    if seq.shape[-1] != params.input_dim:
        raise ValueError(f"entry size {seq.shape[-1]} != encoder input {params.input_dim}")
    x = (seq - params.mean) / params.std
    batch = x.shape[:-2]
    for W_ih, W_hh, b_ih, b_hh in params.layers:
        hid = W_hh.shape[1]
        h = np.zeros(batch + (hid,))
        c = np.zeros(batch + (hid,))
        pre = x @ W_ih.T + (b_ih + b_hh)  # input contributions for all steps at once
        outs = []
        for t in range(x.shape[-2]):
            gates = pre[..., t, :] + h @ W_hh.T
            i, f, g, o = np.split(gates, 4, axis=-1)
            c = _sigmoid(f) * c + _sigmoid(i) * np.tanh(g)
            h = _sigmoid(o) * np.tanh(c)
            outs.append(h)
        x = np.stack(outs, axis=-2)
    return x[..., -1, :] @ params.head_W.T + params.head_b


class HistoryWindow:
    """Fixed-capacity buffer of entries ``[q, dq, tau_res]``, oldest first."""

    def __init__(self, n_joints: int, capacity: int = 15):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.n = n_joints
        self.capacity = capacity
        self._buf = deque(maxlen=capacity)

    def push(self, q, dq, tau_res):
        entry = np.concatenate([np.asarray(q, float), np.asarray(dq, float), np.asarray(tau_res, float)])
        if entry.shape != (3 * self.n,):
            raise ValueError(f"expected three vectors of length {self.n}")
        self._buf.append(entry)
        return self

    def __len__(self):
        return len(self._buf)

    @property
    def full(self):
        return len(self._buf) == self.capacity

    def entries(self):
        if not self._buf:
            return np.zeros((0, 3 * self.n))
        return np.stack(self._buf)

    def clear(self):
        self._buf.clear()


def push_history(window: HistoryWindow, q, dq, tau_res) -> HistoryWindow:
    return window.push(q, dq, tau_res)


def lowpass_alpha(cutoff_hz: float, dt: float) -> float:
    if np.isinf(cutoff_hz):
        return 1.0
    return dt / (dt + 1.0 / (2 * np.pi * cutoff_hz))


class LowPassState:
    """First-order exponential smoother; the first sample initializes the state."""

    def __init__(self, cutoff_hz: float = 2.0, dt: float = 0.02):
        self.alpha = lowpass_alpha(cutoff_hz, dt)
        self.z = None

    def update(self, z_raw):
        z_raw = np.asarray(z_raw, dtype=float)
        if self.z is None:
            self.z = z_raw.copy()
        else:
            self.z = self.z + self.alpha * (z_raw - self.z)
        return self.z

    def reset(self):
        self.z = None


def lowpass_update(state: LowPassState, z_raw):
    return state.update(z_raw)
