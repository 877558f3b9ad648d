import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.signal import correlate

from traffic_s2s.autodiff import finite_diff_gradient, max_relative_error
from traffic_s2s.convlstm import (CellState, ConvLSTMCellParams, ConvLSTMForecaster, S2SConfig,
                                  cell_step, init_params, receptive_radius)
from traffic_s2s.errors import ContractError, DimensionError
from traffic_s2s.training import AdamState, adam_step


def conv_ref(x, k, b):
    out = np.zeros((k.shape[0],) + x.shape[1:])
    for o in range(k.shape[0]):
        for i in range(k.shape[1]):
            out[o] += correlate(x[i], k[o, i], mode="same")
        out[o] += b[o]
    return out


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_step(p, x, h, c):
    """The five peephole-LSTM equations on plain floats."""
    i = sig(p["wx_input"] * x + p["wh_input"] * h + p["peep_input"] * c + p["b_input"])
    f = sig(p["wx_forget"] * x + p["wh_forget"] * h + p["peep_forget"] * c + p["b_forget"])
    c_new = f * c + i * math.tanh(p["wx_cell"] * x + p["wh_cell"] * h + p["b_cell"])
    o = sig(p["wx_output"] * x + p["wh_output"] * h + p["peep_output"] * c_new + p["b_output"])
    return o * math.tanh(c_new), c_new


def scalar_params(values: dict) -> ConvLSTMCellParams:
    arr = {}
    for name, v in values.items():
        if name.startswith(("wx_", "wh_")):
            arr[name] = np.full((1, 1, 1, 1), v)
        elif name.startswith("peep_"):
            arr[name] = np.full((1, 1, 1), v)
        else:
            arr[name] = np.full(1, v)
    return ConvLSTMCellParams(**arr)


NAMES = [f.name for f in __import__("dataclasses").fields(ConvLSTMCellParams)]


def cell_params(rng, c_in, hid, hw, k=3, scale=0.5, zero=False):
    vals = {}
    for name in NAMES:
        if name.startswith("wx_"):
            shape = (hid, c_in, k, k)
        elif name.startswith("wh_"):
            shape = (hid, hid, k, k)
        elif name.startswith("peep_"):
            shape = (hid,) + hw
        else:
            shape = (hid,)
        vals[name] = np.zeros(shape) if zero else rng.normal(0, scale, shape)
    return ConvLSTMCellParams(**vals)


def test_zero_parameter_fixed_point(rng):
    p = cell_params(rng, 2, 3, (4, 4), zero=True)
    zero = np.zeros((3, 4, 4))
    out = cell_step(p, rng.normal(size=(2, 4, 4)), CellState(zero, zero))
    assert np.all(out.c == 0) and np.all(out.h == 0)


def test_large_forget_bias_remembers(rng):
    p = cell_params(rng, 1, 2, (3, 3), zero=True)
    p.b_forget[:] = 100.0
    c = rng.normal(size=(2, 3, 3))
    out = cell_step(p, rng.normal(size=(1, 3, 3)), CellState(np.zeros_like(c), c))
    assert np.max(np.abs(out.c - c)) < 1e-8


def test_scalar_equations_hand_case():
    vals = {name: 0.1 * (i + 1) * (-1) ** i for i, name in enumerate(NAMES)}
    out = cell_step(scalar_params(vals), np.ones((1, 1, 1)), CellState(np.full((1, 1, 1), 0.5), np.full((1, 1, 1), 0.5)))
    h, c = scalar_step(vals, 1.0, 0.5, 0.5)
    assert abs(out.h.item() - h) < 1e-12 and abs(out.c.item() - c) < 1e-12


@given(st.integers(0, 2**31 - 1))
def test_gate_and_hidden_ranges(seed):
    r = np.random.default_rng(seed)
    p = cell_params(r, 2, 2, (3, 3), scale=2.0)
    s = CellState(r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 3)) * 3)
    out = cell_step(p, r.normal(size=(2, 3, 3)) * 3, s)
    assert out.h.shape == out.c.shape
    assert np.all(np.abs(out.h) < 1)


def test_cell_step_shape_errors(rng):
    p = cell_params(rng, 2, 3, (4, 4))
    with pytest.raises(DimensionError):
        cell_step(p, np.zeros((2, 4, 4)), CellState(np.zeros((3, 4, 4)), np.zeros((3, 5, 5))))
    with pytest.raises(DimensionError):
        cell_step(p, np.zeros((2, 4, 4)), CellState(np.zeros((2, 4, 4)), np.zeros((2, 4, 4))))


def small_model(seed=0, **kw):
    cfg = dict(grid_shape=(4, 4), n_services=2, embed_channels=3, hidden_channels=(2, 2),
               t_in=3, horizon=2, seed=seed)
    cfg.update(kw)
    model = ConvLSTMForecaster(S2SConfig(**cfg))
    r = np.random.default_rng(seed + 1)
    model.params = {k: r.normal(0, 0.4, v.shape) for k, v in model.params.items()}
    return model


def manual_encode(model, x):
    p, cfg = model.params, model.config
    states = [CellState(np.zeros((h,) + cfg.grid_shape), np.zeros((h,) + cfg.grid_shape))
              for h in cfg.hidden_channels]
    for t in range(len(x)):
        z = np.tanh(conv_ref(x[t], p["enc_embed.kernel"], p["enc_embed.bias"]))
        for layer in range(len(states)):
            states[layer] = cell_step(ConvLSTMCellParams.from_params(p, f"enc.{layer}"), z, states[layer])
            z = states[layer].h
    return states


def manual_decode(model, states, first, horizon, targets=None):
    p = model.params
    states = list(states)
    preds = []
    x = first
    for k in range(horizon):
        if k > 0:
            x = targets[k - 1] if targets is not None else preds[-1]
        z = np.tanh(conv_ref(x, p["dec_embed.kernel"], p["dec_embed.bias"]))
        for layer in range(len(states)):
            states[layer] = cell_step(ConvLSTMCellParams.from_params(p, f"dec.{layer}"), z, states[layer])
            z = states[layer].h
        preds.append(conv_ref(z, p["out.kernel"], p["out.bias"]))
    return np.stack(preds)


def test_encode_matches_stepwise_oracle(rng):
    model = small_model()
    snap = rng.normal(size=(2, 4, 4))
    x = np.repeat(snap[None], 3, axis=0)
    for got, want in zip(model.encode(x), manual_encode(model, x)):
        np.testing.assert_allclose(got.h, want.h, atol=1e-12)
        np.testing.assert_allclose(got.c, want.c, atol=1e-12)


def test_encode_zero_params_t1():
    model = ConvLSTMForecaster(S2SConfig(grid_shape=(3, 3), n_services=2, embed_channels=2,
                                         hidden_channels=(2,), t_in=1, horizon=1))
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    for s in model.encode(np.ones((1, 2, 3, 3))):
        assert np.all(s.h == 0) and np.all(s.c == 0)


def test_encode_wrong_length_raises(rng):
    with pytest.raises(ContractError):
        small_model().encode(rng.normal(size=(5, 2, 4, 4)))


def test_service_permutation_symmetry(rng):
    model = small_model()
    x = rng.normal(size=(3, 2, 4, 4))
    perm = [1, 0]
    other = small_model()
    other.params = dict(model.params)
    other.params["enc_embed.kernel"] = model.params["enc_embed.kernel"][:, perm]
    for a, b in zip(model.encode(x), other.encode(x[:, perm])):
        np.testing.assert_allclose(a.h, b.h, atol=1e-13)


def test_decode_teacher_forcing_and_autoregressive(rng):
    model = small_model(horizon=3)
    x = rng.normal(size=(3, 2, 4, 4))
    tgt = rng.normal(size=(3, 2, 4, 4))
    states = model.encode(x)
    forced = model.decode(states, x[-1], 3, targets=tgt, tf_prob=1.0)
    np.testing.assert_allclose(forced, manual_decode(model, states, x[-1], 3, tgt), atol=1e-12)
    free = model.decode(states, x[-1], 3)
    np.testing.assert_allclose(free, manual_decode(model, states, x[-1], 3), atol=1e-12)
    assert np.array_equal(free, model.decode(states, x[-1], 3))


def test_decode_k1_shape_and_tf_errors(rng):
    model = small_model()
    states = model.encode(rng.normal(size=(3, 2, 4, 4)))
    assert model.decode(states, np.zeros((2, 4, 4)), 1).shape == (1, 2, 4, 4)
    with pytest.raises(ContractError):
        model.decode(states, np.zeros((2, 4, 4)), 2, tf_prob=0.5)


def test_forecast_composition_and_zero_network(rng):
    model = small_model()
    x = rng.normal(size=(3, 2, 4, 4))
    out = model.forecast(x)
    assert out.shape == (2, 2, 4, 4)
    assert np.array_equal(out, model.decode(model.encode(x), x[-1], 2))
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    model.params["out.bias"] = np.array([1.5, -2.0])
    out = model.forecast(x)
    assert np.all(out[:, 0] == 1.5) and np.all(out[:, 1] == -2.0)


def test_init_params_contract():
    cfg = S2SConfig(grid_shape=(3, 3), n_services=2, embed_channels=4, hidden_channels=(3, 2), seed=5)
    a, b = init_params(cfg), init_params(cfg)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.all(a["enc.0.b_forget"] == 1.0) and np.all(a["dec.1.b_forget"] == 1.0)
    w = a["enc.1.wx_input"]
    fan_in, fan_out = 3 * 9, 2 * 9
    assert np.all(np.abs(w) <= math.sqrt(6 / (fan_in + fan_out)))


def test_config_validation():
    with pytest.raises(ContractError):
        S2SConfig(t_in=0)
    with pytest.raises(ContractError):
        S2SConfig(hidden_channels=())
    with pytest.raises(ContractError):
        S2SConfig(kernel_size=2)


@given(st.integers(0, 10_000), st.integers(0, 1))
def test_decoder_causality(seed, k):
    r = np.random.default_rng(seed)
    model = small_model(seed % 7, horizon=3)
    x = r.normal(size=(1, 3, 2, 4, 4))
    tgt = r.normal(size=(1, 3, 2, 4, 4))
    base = model.decode(model.encode(x), x[:, -1], 3, targets=tgt, tf_prob=1.0)
    bumped = tgt.copy()
    bumped[:, k:] += r.normal(size=bumped[:, k:].shape)
    again = model.decode(model.encode(x), x[:, -1], 3, targets=bumped, tf_prob=1.0)
    assert np.array_equal(base[:, :k + 1], again[:, :k + 1])


def test_spatial_locality(rng):
    cfg = S2SConfig(grid_shape=(11, 11), n_services=1, embed_channels=2, hidden_channels=(2,),
                    t_in=1, horizon=1, seed=3)
    model = ConvLSTMForecaster(cfg)
    model.params = {k: rng.normal(0, 0.5, v.shape) for k, v in model.params.items()}
    radius = receptive_radius(cfg)
    x = rng.normal(size=(1, 1, 11, 11))
    y = x.copy()
    y[0, 0, 5, 5] += 1.0
    diff = np.abs(model.forecast(x) - model.forecast(y))[0, 0]
    rows, cols = np.nonzero(diff > 0)
    assert len(rows) > 0
    assert max(np.max(np.abs(rows - 5)), np.max(np.abs(cols - 5))) <= radius
    with pytest.raises(ContractError):
        receptive_radius(S2SConfig(hidden_channels=(2, 2), t_in=1, horizon=1))


def test_full_model_gradient_check():
    model = small_model(grid_shape=(3, 3), embed_channels=2)
    r = np.random.default_rng(9)
    x, y = r.normal(size=(2, 3, 2, 3, 3)), r.normal(size=(2, 2, 2, 3, 3))
    _, grads = model.loss_and_grads(x, y, tf_prob=1.0)

    def f(p):
        old, model.params = model.params, p
        try:
            return model.loss(x, y, tf_prob=1.0)
        finally:
            model.params = old

    assert max_relative_error(grads, finite_diff_gradient(f, model.params, 1e-4)) < 1e-4


def test_training_smoke_halves_loss():
    model = ConvLSTMForecaster(S2SConfig(grid_shape=(3, 3), n_services=1, embed_channels=3,
                                         hidden_channels=(3,), t_in=2, horizon=2, seed=0))
    r = np.random.default_rng(0)
    base = r.normal(size=(1, 1, 3, 3))
    x = np.stack([np.concatenate([base * a, base * a * 1.1]) for a in (0.5, 1.0, -0.7, 0.2)])
    y = x * 1.2
    state = AdamState.create(model.params, lr=1e-2)
    first = model.loss(x, y)
    for _ in range(300):
        _, g = model.loss_and_grads(x, y)
        model.params, state = adam_step(model.params, g, state)
    assert model.loss(x, y) <= 0.5 * first
