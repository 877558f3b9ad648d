"""Adam training loop and the binary checkpoint container."""
from __future__ import annotations

import dataclasses
import json
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import build_model, config_from_dict
from .data import NormalizationStats, stack_windows
from .errors import CheckpointError, ContractError, DivergenceError
from .model import ForecastModel, config_hash


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params, lr=1e-4, **hyper) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)

    def copy(self) -> "AdamState":
        return dataclasses.replace(self, m={k: a.copy() for k, a in self.m.items()},
                                   v={k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters: {missing[:5]}")
    new = state.copy()
    new.step += 1
    b1, b2 = new.beta1, new.beta2
    c1 = 1.0 - b1 ** new.step
    c2 = 1.0 - b2 ** new.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = new.m.get(k, np.zeros_like(p))
        v = new.v.get(k, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        new.m[k], new.v[k] = m, v
        out[k] = p - new.lr * (m / c1) / (np.sqrt(v / c2) + new.eps)
    return out, new


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    tf_prob: float = 0.5
    seed: int = 0
    patience: int | None = None     # epochs without val improvement before stopping
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ContractError("lr must be nonnegative")
        if not 0.0 <= self.tf_prob <= 1.0:
            raise ContractError("tf_prob must lie in [0, 1]")
        if self.patience is not None and self.patience < 1:
            raise ContractError("patience must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    model: ForecastModel
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool = False

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r}" for r in self.history]
        return "\n".join(lines) + "\n"


def _as_arrays(windows):
    if isinstance(windows, tuple):
        return windows
    return stack_windows(windows)


def train(model: ForecastModel, train_windows, config: TrainConfig, val_windows=None,
          checkpoint_meta: dict | None = None, log=None) -> TrainResult:
    """Mini-batch Adam on the normalized MSE.

    ``train_windows``/``val_windows`` are lists of ForecastWindow or (X, Y)
    array pairs. The params with the lowest validation loss (training loss when
    no validation set is given) are kept and, if configured, checkpointed.
    """
    if not model.trainable:
        raise ContractError(f"model {model.kind!r} is not trainable")
    x_tr, y_tr = _as_arrays(train_windows)
    if len(x_tr) == 0:
        raise ContractError("no training windows")
    x_va, y_va = _as_arrays(val_windows) if val_windows is not None else (None, None)
    if x_va is not None and len(x_va) == 0:
        x_va = y_va = None

    rng = np.random.default_rng(config.seed)
    state = AdamState.create(model.params, lr=config.lr)
    history: list[EpochRecord] = []
    best = (np.inf, 0, None, None)
    stale = 0
    stopped = False
    n = len(x_tr)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b in range(0, n, config.batch_size):
            idx = np.sort(order[b:b + config.batch_size])
            loss, grads = model.loss_and_grads(x_tr[idx], y_tr[idx], config.tf_prob, rng, training=True)
            if not np.isfinite(loss):
                raise DivergenceError(f"{model.kind}: loss became {loss} at epoch {epoch}, "
                                      f"batch {b // config.batch_size + 1} (lr={config.lr})")
            total += loss * len(idx)
            model.params, state = adam_step(model.params, grads, state)
        train_loss = total / n
        val_loss = model.loss(x_va, y_va, training=False) if x_va is not None else train_loss
        if not np.isfinite(val_loss):
            raise DivergenceError(f"{model.kind}: validation loss became {val_loss} at epoch {epoch}")
        history.append(EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0))
        if log is not None:
            log(f"{model.kind} epoch {epoch}/{config.epochs} train {train_loss:.5f} val {val_loss:.5f} "
                f"({history[-1].seconds:.1f}s)")
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: v.copy() for k, v in model.params.items()},
                    {k: v.copy() for k, v in model.buffers.items()})
            stale = 0
            if config.checkpoint_path:
                save_model(model, config.checkpoint_path, checkpoint_meta)
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                stopped = True
                break
    model.params, model.buffers = best[2], best[3]
    return TrainResult(model, history, best[1], stopped)


# -- checkpoints ------------------------------------------------------------------------

MAGIC = b"TS2SCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")    # magic, version, header length


@dataclass
class Checkpoint:
    kind: str
    config: object
    params: dict
    buffers: dict
    meta: dict

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def checkpoint_save(path, kind: str, config, params: dict, buffers: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write a versioned container: prefix, JSON header, raw float64 LE values, CRC32."""
    buffers = buffers or {}
    arrays = [("param", k, np.asarray(v, dtype="<f8")) for k, v in params.items()]
    arrays += [("buffer", k, np.asarray(v, dtype="<f8")) for k, v in buffers.items()]
    header = {
        "kind": kind,
        "config": dataclasses.asdict(config),
        "config_hash": config_hash(config),
        "arrays": [[group, name, list(a.shape)] for group, name, a in arrays],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, default=list).encode()
    body = b"".join(np.ascontiguousarray(a).tobytes() for _, _, a in arrays)
    blob = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + body
    blob += struct.pack("<I", zlib.crc32(blob))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def checkpoint_load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if len(blob) < _PREFIX.size + 4:
        raise CheckpointError("file too short to be a checkpoint (truncated?)")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + head_len])
    except ValueError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    offset = start + head_len
    groups = {"param": {}, "buffer": {}}
    for group, name, shape in header["arrays"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob) - 4:
            raise CheckpointError("payload shorter than the header declares")
        groups[group][name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob) - 4:
        raise CheckpointError("payload longer than the header declares")
    config = config_from_dict(header["kind"], header["config"])
    if config_hash(config) != header["config_hash"]:
        raise CheckpointError("config hash does not match the stored config")
    return Checkpoint(header["kind"], config, groups["param"], groups["buffer"], header["meta"])


def save_model(model: ForecastModel, path, meta: dict | None = None) -> None:
    checkpoint_save(path, model.kind, model.config, model.params, model.buffers, meta)


def load_model(path) -> tuple[ForecastModel, dict]:
    ck = checkpoint_load(path)
    model = build_model(ck.kind, ck.config, params=ck.params, buffers=ck.buffers or None)
    return model, ck.meta


def stats_to_meta(stats: NormalizationStats) -> dict:
    return {"mean": [float(x).hex() for x in stats.mean], "std": [float(x).hex() for x in stats.std]}


def stats_from_meta(meta: dict) -> NormalizationStats:
    return NormalizationStats(np.array([float.fromhex(x) for x in meta["mean"]]),
                              np.array([float.fromhex(x) for x in meta["std"]]))
