import numpy as np
import pytest
import torch

from cadelac import encoder as enc
from cadelac.delan import NetworkParams, DelanConfig
from cadelac.trainer import CadelacNet


def scalar_lstm_oracle(params, seq):
    """Unbatched, unvectorized recurrence from the gate equations."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    x = [(s - params.mean) / params.std for s in seq]
    for W_ih, W_hh, b_ih, b_hh in params.layers:
        H = W_hh.shape[1]
        h, c, out = np.zeros(H), np.zeros(H), []
        for xt in x:
            a = W_ih @ xt + W_hh @ h + b_ih + b_hh
            i, f, g, o = sig(a[:H]), sig(a[H:2 * H]), np.tanh(a[2 * H:3 * H]), sig(a[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            out.append(h)
        x = out
    return params.head_W @ x[-1] + params.head_b


@pytest.fixture
def lstm(rng):
    p = enc.LstmParams.init(9, rng)
    p.mean, p.std = rng.normal(size=9), rng.uniform(0.5, 2.0, 9)
    return p


def test_forward_matches_scalar_oracle(lstm, rng):
    seq = rng.normal(size=(15, 9))
    np.testing.assert_allclose(enc.lstm_forward(lstm, seq), scalar_lstm_oracle(lstm, seq), atol=1e-12)


def test_forward_matches_torch_lstm(lstm, rng):
    net = CadelacNet(NetworkParams.zeros(3, DelanConfig()), lstm, dtype=torch.float64)
    seqs = rng.normal(size=(4, 15, 9))
    lengths = np.array([15, 7, 1, 12])
    padded = seqs.copy()
    for b, L in enumerate(lengths):
        padded[b, L:] = 0.0
    with torch.no_grad():
        z_t = net.encode(torch.as_tensor(padded), torch.as_tensor(lengths)).numpy()
    for b, L in enumerate(lengths):
        np.testing.assert_allclose(z_t[b], enc.lstm_forward(lstm, seqs[b, :L]), atol=1e-12)


def test_batched_forward_equals_loop(lstm, rng):
    seqs = rng.normal(size=(3, 5, 9))
    out = enc.lstm_forward(lstm, seqs)
    for b in range(3):
        np.testing.assert_allclose(out[b], enc.lstm_forward(lstm, seqs[b]), atol=1e-14)


def test_forward_validates_input(lstm):
    with pytest.raises(ValueError):
        enc.lstm_forward(lstm, np.zeros((0, 9)))
    with pytest.raises(ValueError):
        enc.lstm_forward(lstm, np.zeros((4, 8)))


def test_params_dict_round_trip(lstm):
    back = enc.LstmParams.from_dict(lstm.to_dict())
    seq = np.ones((3, 9))
    np.testing.assert_array_equal(enc.lstm_forward(back, seq), enc.lstm_forward(lstm, seq))


def test_zero_params_give_zero_latent(rng):
    p = enc.LstmParams.zeros(9)
    assert np.all(enc.lstm_forward(p, rng.normal(size=(15, 9))) == 0.0)


def test_history_window_keeps_latest_entries():
    w = enc.HistoryWindow(2, capacity=3)
    assert len(w) == 0 and w.entries().shape == (0, 6)
    for k in range(5):
        enc.push_history(w, [k, k], [0, 0], [0, 0])
    assert w.full and len(w) == 3
    np.testing.assert_array_equal(w.entries()[:, 0], [2, 3, 4])
    with pytest.raises(ValueError):
        w.push([1.0], [0, 0], [0, 0])
    w.clear()
    assert len(w) == 0


def test_lowpass_step_response():
    dt, fc = 0.02, 2.0
    alpha = enc.lowpass_alpha(fc, dt)
    assert alpha == pytest.approx(dt / (dt + 1 / (2 * np.pi * fc)))
    lp = enc.LowPassState(fc, dt)
    np.testing.assert_array_equal(enc.lowpass_update(lp, [0.0, 0.0]), [0.0, 0.0])
    for k in range(1, 30):
        y = lp.update([1.0, -2.0])
        np.testing.assert_allclose(y, (1 - (1 - alpha) ** k) * np.array([1.0, -2.0]), atol=1e-14)
    lp.reset()
    np.testing.assert_array_equal(lp.update([5.0, 5.0]), [5.0, 5.0])


def test_lowpass_passes_constant_and_infinite_cutoff_is_identity():
    lp = enc.LowPassState(2.0, 0.02)
    for _ in range(10):
        out = lp.update([3.0])
    assert out[0] == 3.0
    raw = enc.LowPassState(np.inf, 0.02)
    raw.update([0.0])
    assert raw.update([7.0])[0] == 7.0
