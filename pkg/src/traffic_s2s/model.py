"""Common forecast contract shared by the ConvLSTM model and all baselines.

Every model maps an input block ``[T_in, S, H, W]`` (or a batch
``[N, T_in, S, H, W]``) of normalized snapshots to ``[K, S, H, W]`` (or
``[N, K, S, H, W]``) predictions.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np

from .autodiff import Tape, backward
from .errors import ContractError, DimensionError


def config_hash(config) -> str:
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ForecastModel:
    kind: str = ""
    trainable = True
    sequential = False

    def __init__(self, config, params=None, buffers=None):
        self.config = config
        self.params = self.init_params(config) if params is None else params
        self.buffers = self.init_buffers(config) if buffers is None else buffers

    # subclasses override -------------------------------------------------------

    def init_params(self, config) -> dict[str, np.ndarray]:
        return {}

    def init_buffers(self, config) -> dict[str, np.ndarray]:
        return {}

    def forward(self, tape: Tape, p: dict, inputs: np.ndarray, targets=None,
                tf_prob: float = 0.0, rng=None, training: bool = False):
        raise NotImplementedError

    # shared -----------------------------------------------------------------------

    @property
    def io_shape(self) -> tuple[int, int, tuple[int, int]]:
        c = self.config
        return c.t_in, c.horizon, (c.n_services,) + tuple(c.grid_shape)

    def check_inputs(self, inputs: np.ndarray) -> np.ndarray:
        t_in, _, snap = self.io_shape
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 5 or inputs.shape[2:] != snap:
            raise DimensionError(f"{self.kind}: expected [N, T, {snap}] input, got {inputs.shape}")
        if inputs.shape[1] != t_in:
            raise ContractError(f"{self.kind}: expected {t_in} input snapshots, got {inputs.shape[1]}")
        return inputs

    def predict(self, inputs, batch_size: int = 128) -> np.ndarray:
        """Forecast in normalized units; accepts one window or a batch."""
        inputs = np.asarray(inputs, dtype=np.float64)
        single = inputs.ndim == 4
        if single:
            inputs = inputs[None]
        inputs = self.check_inputs(inputs)
        outs = []
        for i in range(0, len(inputs), batch_size):
            tape = Tape()
            p = tape.params_from(self.params)
            outs.append(self.forward(tape, p, inputs[i:i + batch_size]).value)
        out = np.concatenate(outs, axis=0)
        return out[0] if single else out

    def loss_node(self, tape, inputs, targets, tf_prob=0.0, rng=None, training=True):
        inputs = self.check_inputs(inputs)
        p = tape.params_from(self.params)
        pred = self.forward(tape, p, inputs, targets, tf_prob, rng, training)
        return tape.mse_loss(pred, tape.const(targets))

    def loss_and_grads(self, inputs, targets, tf_prob=0.0, rng=None, training=True):
        tape = Tape()
        loss = self.loss_node(tape, inputs, targets, tf_prob, rng, training)
        return float(loss.value), backward(tape, loss)

    def loss(self, inputs, targets, tf_prob=0.0, rng=None, training=True) -> float:
        tape = Tape()
        return float(self.loss_node(tape, inputs, targets, tf_prob, rng, training).value)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def describe(self) -> dict:
        return {"kind": self.kind, "config": dataclasses.asdict(self.config),
                "config_hash": config_hash(self.config)}
