"""Comparison forecasters: MLP, CNN, 3D CNN, dense-LSTM S2S and persistence.

All share the forecast contract of :class:`~traffic_s2s.model.ForecastModel`.
MLP, CNN and 3D CNN emit all K steps at once through a fully-connected head;
the LSTM baseline reuses the encoder/decoder loop of the ConvLSTM model with
dense layers in place of convolutions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .convlstm import (GATES, PEEPHOLE_GATES, ConvLSTMForecaster, S2SConfig, cell_forward,
                       decoder_pass, encoder_pass)
from .errors import ContractError
from .model import ForecastModel, glorot_uniform

KINDS = ("convlstm", "mlp", "cnn", "cnn3d", "lstm", "persistence")
BN_MOMENTUM = 0.1


@dataclass
class BaselineConfig:
    kind: str = "mlp"
    depth: int = 4
    width: int = 64
    kernel_size: int = 3
    t_in: int = 12
    horizon: int = 12
    grid_shape: tuple[int, int] = (6, 6)
    n_services: int = 8
    seed: int = 0
    activation: str = "tanh"
    batchnorm: bool = True
    # 1x1 channel reduction before the dense head; None keeps all channels
    head_channels: int | None = None
    tf_prob: float = 0.5

    def __post_init__(self):
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        if self.kind not in KINDS or self.kind == "convlstm":
            raise ContractError(f"unknown baseline kind {self.kind!r}")
        if self.kind != "persistence" and (self.depth < 1 or self.width < 1):
            raise ContractError("depth and width must be positive")
        if self.t_in < 1 or self.horizon < 1:
            raise ContractError("t_in and horizon must be >= 1")
        if self.activation not in ("tanh", "linear"):
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def snapshot_size(self) -> int:
        return self.n_services * self.grid_shape[0] * self.grid_shape[1]


def _act(tape: Tape, cfg: BaselineConfig, x: Node) -> Node:
    return tape.tanh(x) if cfg.activation == "tanh" else x


def _dense_init(rng, params, name, n_in, n_out):
    params[f"{name}.weight"] = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
    params[f"{name}.bias"] = np.zeros(n_out)


def _head(tape: Tape, p, feats: Node, cfg: BaselineConfig) -> Node:
    n = feats.value.shape[0]
    flat = tape.reshape(feats, (n, -1))
    out = tape.linear(flat, p["head.weight"], p["head.bias"])
    return tape.reshape(out, (n, cfg.horizon, cfg.n_services) + cfg.grid_shape)


class MLPForecaster(ForecastModel):
    kind = "mlp"

    def init_params(self, cfg):
        rng = np.random.default_rng(cfg.seed)
        params = {}
        n_in = cfg.t_in * cfg.snapshot_size
        for layer in range(cfg.depth):
            _dense_init(rng, params, f"hidden.{layer}", n_in, cfg.width)
            n_in = cfg.width
        _dense_init(rng, params, "head", n_in, cfg.horizon * cfg.snapshot_size)
        return params

    def forward(self, tape, p, inputs, targets=None, tf_prob=0.0, rng=None, training=False):
        cfg = self.config
        n = inputs.shape[0]
        z = tape.const(inputs.reshape(n, -1))
        for layer in range(cfg.depth):
            z = _act(tape, cfg, tape.linear(z, p[f"hidden.{layer}.weight"], p[f"hidden.{layer}.bias"]))
        return _head(tape, p, z, cfg)


class _ConvStack(ForecastModel):
    """Conv -> batch norm -> activation, repeated, then a dense head."""

    ndim = 2

    def _in_channels(self, cfg):
        raise NotImplementedError

    def _head_inputs(self, cfg):
        raise NotImplementedError

    def _kernel_shape(self, cfg, c_out, c_in):
        return (c_out, c_in) + (cfg.kernel_size,) * self.ndim

    def init_params(self, cfg):
        rng = np.random.default_rng(cfg.seed)
        params = {}
        c_in = self._in_channels(cfg)
        vol = cfg.kernel_size ** self.ndim
        for layer in range(cfg.depth):
            shape = self._kernel_shape(cfg, cfg.width, c_in)
            params[f"conv.{layer}.kernel"] = glorot_uniform(rng, shape, c_in * vol, cfg.width * vol)
            if cfg.batchnorm:
                # the batch-norm shift replaces the (redundant) conv bias
                params[f"bn.{layer}.scale"] = np.ones(cfg.width)
                params[f"bn.{layer}.shift"] = np.zeros(cfg.width)
            else:
                params[f"conv.{layer}.bias"] = np.zeros(cfg.width)
            c_in = cfg.width
        if cfg.head_channels is not None:
            shape = (cfg.head_channels, c_in) + (1,) * self.ndim
            params["reduce.kernel"] = glorot_uniform(rng, shape, c_in, cfg.head_channels)
            params["reduce.bias"] = np.zeros(cfg.head_channels)
        _dense_init(rng, params, "head", self._head_inputs(cfg), cfg.horizon * cfg.snapshot_size)
        return params

    def init_buffers(self, cfg):
        if not cfg.batchnorm:
            return {}
        buffers = {}
        for layer in range(cfg.depth):
            buffers[f"bn.{layer}.mean"] = np.zeros(cfg.width)
            buffers[f"bn.{layer}.var"] = np.ones(cfg.width)
        return buffers

    def _conv(self, tape, x, k, b):
        return tape.conv2d(x, k, b) if self.ndim == 2 else tape.conv3d(x, k, b)

    def _prepare(self, inputs):
        raise NotImplementedError

    def forward(self, tape, p, inputs, targets=None, tf_prob=0.0, rng=None, training=False):
        cfg = self.config
        z = tape.const(self._prepare(inputs))
        batch_stats = training and inputs.shape[0] > 1
        for layer in range(cfg.depth):
            z = self._conv(tape, z, p[f"conv.{layer}.kernel"], p.get(f"conv.{layer}.bias"))
            if cfg.batchnorm:
                scale, shift = p[f"bn.{layer}.scale"], p[f"bn.{layer}.shift"]
                mean_key, var_key = f"bn.{layer}.mean", f"bn.{layer}.var"
                if batch_stats:
                    z = tape.batchnorm(z, scale, shift)
                    axes = (0,) + tuple(range(2, z.value.ndim))
                    # running statistics of the pre-normalization activations
                    pre = z.inputs[0].value
                    self.buffers[mean_key] = ((1 - BN_MOMENTUM) * self.buffers[mean_key]
                                              + BN_MOMENTUM * pre.mean(axis=axes))
                    self.buffers[var_key] = ((1 - BN_MOMENTUM) * self.buffers[var_key]
                                             + BN_MOMENTUM * pre.var(axis=axes))
                else:
                    z = tape.batchnorm(z, scale, shift, self.buffers[mean_key], self.buffers[var_key])
            z = _act(tape, cfg, z)
        if cfg.head_channels is not None:
            z = self._conv(tape, z, p["reduce.kernel"], p["reduce.bias"])
        return _head(tape, p, z, cfg)


class CNNForecaster(_ConvStack):
    """Input snapshots stacked along channels: [N, T*S, H, W]."""

    kind = "cnn"
    ndim = 2

    def _in_channels(self, cfg):
        return cfg.t_in * cfg.n_services

    def _head_inputs(self, cfg):
        c = cfg.width if cfg.head_channels is None else cfg.head_channels
        return c * cfg.grid_shape[0] * cfg.grid_shape[1]

    def _prepare(self, inputs):
        n, t, s, h, w = inputs.shape
        return inputs.reshape(n, t * s, h, w)


class CNN3DForecaster(_ConvStack):
    """Services as channels, convolution over (time, height, width)."""

    kind = "cnn3d"
    ndim = 3

    def _in_channels(self, cfg):
        return cfg.n_services

    def _head_inputs(self, cfg):
        c = cfg.width if cfg.head_channels is None else cfg.head_channels
        return c * cfg.t_in * cfg.grid_shape[0] * cfg.grid_shape[1]

    def _prepare(self, inputs):
        return np.ascontiguousarray(inputs.transpose(0, 2, 1, 3, 4))


class LSTMForecaster(ForecastModel):
    """Encoder-decoder with dense peephole LSTM cells on flattened snapshots."""

    kind = "lstm"
    sequential = True

    def init_params(self, cfg):
        rng = np.random.default_rng(cfg.seed)
        params = {}
        d, w = cfg.snapshot_size, cfg.width
        for side in ("enc", "dec"):
            _dense_init(rng, params, f"{side}_embed", d, w)
            for layer in range(cfg.depth):
                prefix = f"{side}.{layer}"
                for gate in GATES:
                    params[f"{prefix}.wx_{gate}"] = glorot_uniform(rng, (w, w), w, w)
                    params[f"{prefix}.wh_{gate}"] = glorot_uniform(rng, (w, w), w, w)
                    params[f"{prefix}.b_{gate}"] = np.zeros(w)
                for gate in PEEPHOLE_GATES:
                    params[f"{prefix}.peep_{gate}"] = np.zeros(w)
                params[f"{prefix}.b_forget"] = np.ones(w)
        _dense_init(rng, params, "out", w, d)
        return params

    def _cells(self, tape, p, side, batch):
        cells = []
        for layer in range(self.config.depth):
            prefix = f"{side}.{layer}"
            kernel = tape.concat([tape.concat((p[f"{prefix}.wx_{g}"], p[f"{prefix}.wh_{g}"]), axis=0)
                                  for g in GATES], axis=1)
            bias = tape.concat([p[f"{prefix}.b_{g}"] for g in GATES], axis=0)
            nodes = {"kernel": kernel, "bias": bias}
            for g in PEEPHOLE_GATES:
                nodes["peep_" + g] = tape.tile(p[f"{prefix}.peep_{g}"], batch)
            cells.append(lambda x, st, nodes=nodes: cell_forward(tape, nodes, x, st[0], st[1],
                                                                 mix=tape.linear))
        return cells

    def forward(self, tape, p, inputs, targets=None, tf_prob=0.0, rng=None, training=False):
        cfg = self.config
        n = inputs.shape[0]
        flat_in = inputs.reshape(n, cfg.t_in, -1)

        def embedding(side):
            return lambda x: tape.tanh(tape.linear(x, p[f"{side}_embed.weight"], p[f"{side}_embed.bias"]))

        def readout(h):
            return tape.linear(h, p["out.weight"], p["out.bias"])

        zero = tape.const(np.zeros((n, cfg.width)))
        xs = [tape.const(flat_in[:, t]) for t in range(cfg.t_in)]
        states = encoder_pass(tape, xs, embedding("enc"), self._cells(tape, p, "enc", n),
                              [(zero, zero)] * cfg.depth)
        tgt = None
        if targets is not None:
            flat_t = targets.reshape(n, targets.shape[1], -1)
            tgt = [tape.const(flat_t[:, k]) for k in range(flat_t.shape[1])]
        preds = decoder_pass(tape, states, xs[-1], cfg.horizon, embedding("dec"),
                             self._cells(tape, p, "dec", n), readout, tgt, tf_prob, rng)
        out = tape.stack(preds, axis=1)
        return tape.reshape(out, (n, cfg.horizon, cfg.n_services) + cfg.grid_shape)


class PersistenceForecaster(ForecastModel):
    """Repeats the last observed snapshot for every future step."""

    kind = "persistence"
    trainable = False

    def forward(self, tape, p, inputs, targets=None, tf_prob=0.0, rng=None, training=False):
        last = inputs[:, -1:]
        return tape.const(np.repeat(last, self.config.horizon, axis=1))


def persistence_forecast(window_input, horizon: int) -> np.ndarray:
    """Last observed snapshot repeated ``horizon`` times ([T, S, H, W] -> [K, S, H, W])."""
    x = np.asarray(window_input, dtype=np.float64)
    if x.ndim < 1 or x.shape[0] < 1:
        raise ContractError("persistence needs at least one observed snapshot")
    return np.repeat(x[-1:], horizon, axis=0)


MODEL_CLASSES = {
    "convlstm": ConvLSTMForecaster,
    "mlp": MLPForecaster,
    "cnn": CNNForecaster,
    "cnn3d": CNN3DForecaster,
    "lstm": LSTMForecaster,
    "persistence": PersistenceForecaster,
}

# Per-kind architecture knobs. "desk" runs the full benchmark on a laptop CPU;
# "full" holds the published benchmark sizes; "tiny" is for gradient checks.
PRESETS = {
    "desk": {
        "convlstm": {"embed_channels": 32, "hidden_channels": (32, 32)},
        "mlp": {"depth": 4, "width": 64},
        "cnn": {"depth": 4, "width": 32},
        "cnn3d": {"depth": 4, "width": 32, "head_channels": 4},
        "lstm": {"depth": 2, "width": 64},
        "persistence": {},
    },
    "fast": {
        "convlstm": {"embed_channels": 16, "hidden_channels": (16, 16)},
        "mlp": {"depth": 4, "width": 64},
        "cnn": {"depth": 4, "width": 32},
        "cnn3d": {"depth": 4, "width": 16, "head_channels": 4},
        "lstm": {"depth": 2, "width": 64},
        "persistence": {},
    },
    "full": {
        "convlstm": {"embed_channels": 32, "hidden_channels": (32, 32)},
        "mlp": {"depth": 5, "width": 500},
        "cnn": {"depth": 11, "width": 128},
        "cnn3d": {"depth": 11, "width": 128},
        "lstm": {"depth": 2, "width": 500},
        "persistence": {},
    },
    "tiny": {
        "convlstm": {"embed_channels": 2, "hidden_channels": (2, 2)},
        "mlp": {"depth": 2, "width": 5},
        "cnn": {"depth": 2, "width": 3},
        "cnn3d": {"depth": 2, "width": 2, "head_channels": 1},
        "lstm": {"depth": 2, "width": 3},
        "persistence": {},
    },
}


def make_config(kind: str, preset: str = "desk", **dims):
    """Config for ``kind`` from a preset plus shared dims (t_in, horizon, grid_shape, ...)."""
    if kind not in MODEL_CLASSES:
        raise ContractError(f"unknown model kind {kind!r}; choose from {', '.join(KINDS)}")
    if preset not in PRESETS:
        raise ContractError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    knobs = dict(PRESETS[preset][kind])
    knobs.update(dims)
    if kind == "convlstm":
        return S2SConfig(**knobs)
    return BaselineConfig(kind=kind, **knobs)


def config_from_dict(kind: str, data: dict):
    # JSON turns tuples into lists
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    if kind == "convlstm":
        return S2SConfig(**data)
    data.pop("kind", None)
    return BaselineConfig(kind=kind, **data)


def build_model(kind: str, config=None, params=None, buffers=None, preset: str = "desk",
                **dims) -> ForecastModel:
    if config is None:
        config = make_config(kind, preset, **dims)
    return MODEL_CLASSES[kind](config, params=params, buffers=buffers)
