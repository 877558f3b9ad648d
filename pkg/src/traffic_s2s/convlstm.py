"""Peephole ConvLSTM cells stacked into a sequence-to-sequence forecaster.

Snapshots of the different services are treated as input channels. The
encoder embeds each observed snapshot with a convolution followed by tanh,
runs it through the stacked ConvLSTM layers, and hands the final per-layer
states to the decoder. The decoder has its own embedding and ConvLSTM stack;
each step's top hidden state is mapped back to service channels by a linear
output convolution.

Cell update, per gate (all convolutions 'same', peephole terms elementwise):

    i = sigmoid(Wx_i * x + Wh_i * h + P_i . c + b_i)
    f = sigmoid(Wx_f * x + Wh_f * h + P_f . c + b_f)
    c' = f . c + i . tanh(Wx_c * x + Wh_c * h + b_c)
    o = sigmoid(Wx_o * x + Wh_o * h + P_o . c' + b_o)
    h' = o . tanh(c')
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .autodiff import Node, Tape
from .errors import ContractError, DimensionError
from .model import ForecastModel, glorot_uniform

GATES = ("input", "forget", "cell", "output")
PEEPHOLE_GATES = ("input", "forget", "output")


@dataclass
class S2SConfig:
    grid_shape: tuple[int, int] = (6, 6)
    n_services: int = 8
    embed_channels: int = 32
    hidden_channels: tuple[int, ...] = (32, 32)
    kernel_size: int = 3
    t_in: int = 12
    horizon: int = 12
    tf_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        self.hidden_channels = tuple(int(v) for v in self.hidden_channels)
        if self.t_in < 1 or self.horizon < 1:
            raise ContractError("t_in and horizon must be >= 1")
        if not self.hidden_channels:
            raise ContractError("at least one ConvLSTM layer is required")
        if self.kernel_size % 2 == 0:
            raise ContractError("kernel_size must be odd")
        if not 0.0 <= self.tf_prob <= 1.0:
            raise ContractError("tf_prob must lie in [0, 1]")


@dataclass
class ConvLSTMCellParams:
    wx_input: np.ndarray
    wh_input: np.ndarray
    peep_input: np.ndarray
    b_input: np.ndarray
    wx_forget: np.ndarray
    wh_forget: np.ndarray
    peep_forget: np.ndarray
    b_forget: np.ndarray
    wx_cell: np.ndarray
    wh_cell: np.ndarray
    b_cell: np.ndarray
    wx_output: np.ndarray
    wh_output: np.ndarray
    peep_output: np.ndarray
    b_output: np.ndarray

    @classmethod
    def from_params(cls, params: dict, prefix: str) -> "ConvLSTMCellParams":
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})

    def as_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        dot = f"{prefix}." if prefix else ""
        return {f"{dot}{f.name}": getattr(self, f.name) for f in fields(self)}

    @property
    def hidden(self) -> int:
        return self.wx_input.shape[0]


class CellState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


# -- tape-level building blocks ---------------------------------------------------

def cell_forward(tape: Tape, p: dict[str, Node], x: Node, h: Node, c: Node, mix=None):
    """One peephole LSTM step on batched nodes.

    ``p`` holds the fused gate kernel/bias from :func:`fuse_cell` and the
    peephole nodes already tiled to the batch size. ``mix`` maps the
    channel-concatenated (x, h) to the stacked gate pre-activations; it is
    the convolution by default and a dense layer for the vanilla LSTM.
    """
    hid = c.value.shape[1]
    mix = tape.conv2d if mix is None else mix
    z = mix(tape.concat((x, h), axis=1), p["kernel"], p["bias"])
    zi, zf, zc, zo = (tape.slice(z, 1, g * hid, (g + 1) * hid) for g in range(4))
    i = tape.sigmoid(tape.add(zi, tape.mul(p["peep_input"], c)))
    f = tape.sigmoid(tape.add(zf, tape.mul(p["peep_forget"], c)))
    c_new = tape.add(tape.mul(f, c), tape.mul(i, tape.tanh(zc)))
    o = tape.sigmoid(tape.add(zo, tape.mul(p["peep_output"], c_new)))
    h_new = tape.mul(o, tape.tanh(c_new))
    return h_new, c_new


def fuse_cell(tape: Tape, nodes: dict[str, Node], batch: int) -> dict[str, Node]:
    """Stack the eight gate kernels into one [4*hid, c_in+hid, k, k] kernel.

    Input and recurrent convolutions of all four gates then run as a single
    convolution over the channel-concatenated (x, h); gradients flow back to
    the individual kernels through the concat nodes.
    """
    kernel = tape.concat([tape.concat((nodes["wx_" + g], nodes["wh_" + g]), axis=1)
                          for g in GATES], axis=0)
    bias = tape.concat([nodes["b_" + g] for g in GATES], axis=0)
    out = {"kernel": kernel, "bias": bias}
    for g in PEEPHOLE_GATES:
        out["peep_" + g] = tape.tile(nodes["peep_" + g], batch)
    return out


def _cell_nodes(tape: Tape, p: dict[str, Node], prefix: str, batch: int) -> dict[str, Node]:
    nodes = {f.name: p[f"{prefix}.{f.name}"] for f in fields(ConvLSTMCellParams)}
    return fuse_cell(tape, nodes, batch)


def encoder_pass(tape: Tape, inputs: Sequence[Node], embed: Callable, cells: Sequence[Callable],
                 zero_states: Sequence[tuple[Node, Node]]):
    states = list(zero_states)
    for x in inputs:
        z = embed(x)
        for layer, cell in enumerate(cells):
            states[layer] = cell(z, states[layer])
            z = states[layer][0]
    return states


def decoder_pass(tape: Tape, init_states, first_input: Node, horizon: int, embed: Callable,
                 cells: Sequence[Callable], readout: Callable, targets=None,
                 tf_prob: float = 0.0, rng=None) -> list[Node]:
    """Autoregressive decoding with optional teacher forcing.

    Step 1 consumes ``first_input``. Step k > 1 consumes ground truth for step
    k-1 with probability ``tf_prob``, otherwise the previous prediction. One
    coin is flipped per step (shared across the batch) only when
    0 < tf_prob < 1.
    """
    if tf_prob > 0 and targets is None:
        raise ContractError("teacher forcing requires targets")
    if 0 < tf_prob < 1 and rng is None:
        raise ContractError("teacher forcing with 0 < tf_prob < 1 requires an rng")
    states = list(init_states)
    preds: list[Node] = []
    x = first_input
    for k in range(horizon):
        if k > 0:
            use_truth = tf_prob >= 1.0 or (tf_prob > 0.0 and rng.random() < tf_prob)
            x = targets[k - 1] if use_truth else preds[-1]
        z = embed(x)
        for layer, cell in enumerate(cells):
            states[layer] = cell(z, states[layer])
            z = states[layer][0]
        preds.append(readout(z))
    return preds


# -- parameters ---------------------------------------------------------------------

def init_cell_params(rng: np.random.Generator, c_in: int, hidden: int, k: int,
                     grid_shape: tuple[int, int]) -> ConvLSTMCellParams:
    kw = {}
    for gate in GATES:
        kw["wx_" + gate] = glorot_uniform(rng, (hidden, c_in, k, k), c_in * k * k, hidden * k * k)
        kw["wh_" + gate] = glorot_uniform(rng, (hidden, hidden, k, k), hidden * k * k, hidden * k * k)
        kw["b_" + gate] = np.zeros(hidden)
    for gate in PEEPHOLE_GATES:
        kw["peep_" + gate] = np.zeros((hidden,) + tuple(grid_shape))
    kw["b_forget"] = np.ones(hidden)
    return ConvLSTMCellParams(**kw)


def init_params(config: S2SConfig) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero peepholes and biases, forget bias 1.0."""
    rng = np.random.default_rng(config.seed)
    k, s, e = config.kernel_size, config.n_services, config.embed_channels
    params: dict[str, np.ndarray] = {}
    for side in ("enc", "dec"):
        params[f"{side}_embed.kernel"] = glorot_uniform(rng, (e, s, k, k), s * k * k, e * k * k)
        params[f"{side}_embed.bias"] = np.zeros(e)
        c_in = e
        for layer, hidden in enumerate(config.hidden_channels):
            cell = init_cell_params(rng, c_in, hidden, k, config.grid_shape)
            params.update(cell.as_dict(f"{side}.{layer}"))
            c_in = hidden
    top = config.hidden_channels[-1]
    params["out.kernel"] = glorot_uniform(rng, (s, top, k, k), top * k * k, s * k * k)
    params["out.bias"] = np.zeros(s)
    return params


# -- model ---------------------------------------------------------------------------

class ConvLSTMForecaster(ForecastModel):
    kind = "convlstm"
    sequential = True

    def init_params(self, config):
        return init_params(config)

    def _blocks(self, tape: Tape, p: dict[str, Node], batch: int):
        cfg = self.config

        def embedding(side):
            def embed(x):
                return tape.tanh(tape.conv2d(x, p[f"{side}_embed.kernel"], p[f"{side}_embed.bias"]))
            return embed

        def cells(side):
            out = []
            for layer in range(len(cfg.hidden_channels)):
                nodes = _cell_nodes(tape, p, f"{side}.{layer}", batch)
                out.append(lambda x, st, nodes=nodes: cell_forward(tape, nodes, x, st[0], st[1]))
            return out

        def readout(h):
            return tape.conv2d(h, p["out.kernel"], p["out.bias"])

        return embedding("enc"), cells("enc"), embedding("dec"), cells("dec"), readout

    def _zero_states(self, tape: Tape, batch: int):
        hw = tuple(self.config.grid_shape)
        states = []
        for hidden in self.config.hidden_channels:
            z = tape.const(np.zeros((batch, hidden) + hw))
            states.append((z, z))
        return states

    def forward(self, tape, p, inputs, targets=None, tf_prob=0.0, rng=None, training=False):
        n = inputs.shape[0]
        enc_embed, enc_cells, dec_embed, dec_cells, readout = self._blocks(tape, p, n)
        xs = [tape.const(inputs[:, t]) for t in range(inputs.shape[1])]
        states = encoder_pass(tape, xs, enc_embed, enc_cells, self._zero_states(tape, n))
        tgt = None if targets is None else [tape.const(targets[:, k]) for k in range(targets.shape[1])]
        preds = decoder_pass(tape, states, xs[-1], self.config.horizon, dec_embed, dec_cells,
                             readout, tgt, tf_prob, rng)
        return tape.stack(preds, axis=1)

    # -- functional views over numpy arrays ------------------------------------------

    def encode(self, inputs) -> list[CellState]:
        """Final (h, c) of every encoder layer for one window or a batch."""
        inputs = np.asarray(inputs, dtype=np.float64)
        single = inputs.ndim == 4
        batch = self.check_inputs(inputs[None] if single else inputs)
        tape = Tape()
        p = tape.params_from(self.params)
        enc_embed, enc_cells, *_ = self._blocks(tape, p, len(batch))
        xs = [tape.const(batch[:, t]) for t in range(batch.shape[1])]
        states = encoder_pass(tape, xs, enc_embed, enc_cells, self._zero_states(tape, len(batch)))
        return [CellState(h.value[0] if single else h.value, c.value[0] if single else c.value)
                for h, c in states]

    def decode(self, init_states: Sequence[CellState], first_input, horizon: int,
               targets=None, tf_prob: float = 0.0, rng=None) -> np.ndarray:
        first_input = np.asarray(first_input, dtype=np.float64)
        single = first_input.ndim == 3
        add = (lambda a: np.asarray(a, dtype=np.float64)[None]) if single else np.asarray
        if horizon < 1:
            raise ContractError("horizon must be >= 1")
        batch = 1 if single else first_input.shape[0]
        tape = Tape()
        p = tape.params_from(self.params)
        _, _, dec_embed, dec_cells, readout = self._blocks(tape, p, batch)
        states = [(tape.const(add(s.h)), tape.const(add(s.c))) for s in init_states]
        tgt = None
        if targets is not None:
            t = add(targets)
            tgt = [tape.const(t[:, k]) for k in range(t.shape[1])]
        preds = decoder_pass(tape, states, tape.const(add(first_input)), horizon, dec_embed,
                             dec_cells, readout, tgt, tf_prob, rng)
        out = np.stack([q.value for q in preds], axis=1)
        return out[0] if single else out

    def forecast(self, window_input) -> np.ndarray:
        """Encode then decode without teacher forcing; normalized units."""
        return self.predict(window_input)


def cell_step(params: ConvLSTMCellParams, d_t, state: CellState) -> CellState:
    """Single ConvLSTM update on arrays ([C, H, W] or batched [N, C, H, W])."""
    d_t = np.asarray(d_t, dtype=np.float64)
    h = np.asarray(state.h, dtype=np.float64)
    c = np.asarray(state.c, dtype=np.float64)
    if h.shape != c.shape:
        raise DimensionError(f"hidden {h.shape} and cell {c.shape} shapes differ")
    single = d_t.ndim == 3
    if single:
        d_t, h, c = d_t[None], h[None], c[None]
    if params.peep_input.shape != h.shape[1:]:
        raise DimensionError(f"state {h.shape[1:]} does not match peephole {params.peep_input.shape}")
    if params.wh_input.shape[1] != h.shape[1]:
        raise DimensionError("state channels do not match the recurrent kernels")
    tape = Tape()
    nodes = fuse_cell(tape, {k: tape.const(v) for k, v in params.as_dict().items()}, len(d_t))
    h_new, c_new = cell_forward(tape, nodes, tape.const(d_t), tape.const(h), tape.const(c))
    if single:
        return CellState(h_new.value[0], c_new.value[0])
    return CellState(h_new.value, c_new.value)


def receptive_radius(config: S2SConfig) -> int:
    """Chebyshev radius of output influence for T_in = K = 1 and a single layer."""
    if len(config.hidden_channels) != 1 or config.t_in != 1 or config.horizon != 1:
        raise ContractError("receptive_radius is only defined for 1 layer, T_in = K = 1")
    # encoder embed + encoder cell + decoder recurrent conv + output conv
    return 4 * (config.kernel_size // 2)
