"""End-to-end experiment flow shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .baselines import build_model
from .data import (NormalizationStats, TrafficSeries, chronological_split, compute_stats,
                   filter_active_antennas, window_dataset)
from .gridmap import AntennaGrid, map_antennas_to_grid
from .metrics import EvalReport, evaluate
from .synthetic import SyntheticConfig, synthesize_traffic
from .training import TrainConfig, TrainResult, train

ALL_KINDS = ("convlstm", "mlp", "cnn", "cnn3d", "lstm", "persistence")


@dataclass
class Prepared:
    stats: NormalizationStats
    train: list
    val: list
    test: list


def prepare_windows(series: TrafficSeries, grid: AntennaGrid, t_in: int, horizon: int,
                    train_frac: float = 0.8, val_frac: float = 0.1, train_stride: int = 1,
                    eval_stride: int = 1, val_stride: int | None = None) -> Prepared:
    """Chronological train/val/test windows; stats from the training portion only.

    Validation is the tail ``val_frac`` of the training portion.
    """
    train_part, test_part = chronological_split(series, train_frac, t_in, horizon)
    stats = compute_stats(train_part.volumes)
    fit_part, val_part = chronological_split(train_part, 1.0 - val_frac, t_in, horizon)
    return Prepared(
        stats,
        window_dataset(fit_part, grid, stats, t_in, horizon, train_stride),
        window_dataset(val_part, grid, stats, t_in, horizon, val_stride or eval_stride),
        window_dataset(test_part, grid, stats, t_in, horizon, eval_stride),
    )


@dataclass
class StudyConfig:
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(seed=7))
    grid_shape: tuple = (6, 6)
    t_in: int = 12
    horizon: int = 12
    train_frac: float = 0.8
    val_frac: float = 0.1
    train_stride: int = 6
    eval_stride: int = 1
    val_stride: int = 6
    active_threshold: float = 0.9
    preset: str = "desk"
    kinds: tuple = ALL_KINDS
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, batch_size=16, lr=1e-3))


@dataclass
class StudyResult:
    grid: AntennaGrid
    prepared: Prepared
    reports: dict[str, EvalReport]
    training: dict[str, TrainResult]


def run_study(cfg: StudyConfig, series: TrafficSeries | None = None, log=None) -> StudyResult:
    """Synthesize (unless given), map, train every kind and evaluate on the test split."""
    if series is None:
        series = synthesize_traffic(cfg.synthetic)
    series = filter_active_antennas(series, cfg.active_threshold)
    grid = map_antennas_to_grid(series.antennas, *cfg.grid_shape)
    prepared = prepare_windows(series, grid, cfg.t_in, cfg.horizon, cfg.train_frac, cfg.val_frac,
                               cfg.train_stride, cfg.eval_stride, cfg.val_stride)
    dims = dict(t_in=cfg.t_in, horizon=cfg.horizon, grid_shape=tuple(grid.shape),
                n_services=len(series.services), seed=cfg.train.seed)
    reports, training = {}, {}
    for kind in cfg.kinds:
        model = build_model(kind, preset=cfg.preset, **dims)
        if model.trainable:
            training[kind] = train(model, prepared.train, dataclasses.replace(cfg.train), prepared.val, log=log)
        reports[kind] = evaluate(model, prepared.test, prepared.stats, grid, series.services)
        if log is not None:
            log(f"{kind}: test MAE {reports[kind].mae:.6g}")
    return StudyResult(grid, prepared, reports, training)
