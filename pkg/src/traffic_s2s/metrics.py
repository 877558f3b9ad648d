"""Forecast accuracy metrics on denormalized volumes.

Metric inputs use the antenna layout ``[..., K, S, A]`` (windows, steps,
services, antennas): masked grid cells are dropped before anything is
computed, see :func:`grid_to_antennas`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import BIN_SECONDS, CATEGORIES, NormalizationStats, stack_windows
from .errors import ContractError, DimensionError
from .gridmap import AntennaGrid

MSE_FLOOR = 1e-12
SPAN_FLOOR = 1e-9
SSIM_K1, SSIM_K2, SSIM_RANGE = 0.1, 0.3, 2.0


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def grid_to_antennas(x, grid: AntennaGrid) -> np.ndarray:
    """[..., H, W] -> [..., A] keeping only assigned cells, in grid antenna order."""
    rows, cols = grid.index_arrays(grid.antenna_ids)
    return np.asarray(x)[..., rows, cols]


def mae(pred, truth) -> tuple[np.ndarray, float]:
    """Per-step MAE and its mean over steps. Step axis is -3 of [..., K, S, A]."""
    pred, truth = _pair(pred, truth)
    if pred.ndim < 3:
        raise DimensionError("mae expects [..., K, S, A]")
    err = np.abs(pred - truth)
    lead = tuple(range(pred.ndim - 3))
    per_step = err.mean(axis=lead + (pred.ndim - 2, pred.ndim - 1))
    return per_step, float(per_step.mean())


def psnr(pred, truth, d_max: float) -> float:
    """Mean over snapshots of 20 log10(d_max) - 10 log10(MSE); MSE is taken over
    the last two axes [S, A] and floored so a perfect forecast is capped."""
    pred, truth = _pair(pred, truth)
    if not d_max > 0:
        raise ContractError("d_max must be positive")
    mse = ((pred - truth) ** 2).mean(axis=(-2, -1))
    values = 20 * np.log10(d_max) - 10 * np.log10(np.maximum(mse, MSE_FLOOR))
    return float(np.mean(values))


def ssim(pred, truth, c1: float | None = None, c2: float | None = None):
    """Standard SSIM along the last axis (cells of one snapshot).

    Inputs are expected on a [-1, 1] scale. Leading axes are batched and the
    result has their shape.
    """
    pred, truth = _pair(pred, truth)
    if pred.shape[-1] < 2:
        raise ContractError("SSIM needs at least 2 unmasked cells")
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2 if c1 is None else c1
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2 if c2 is None else c2
    mx = pred.mean(axis=-1, keepdims=True)
    my = truth.mean(axis=-1, keepdims=True)
    dx, dy = pred - mx, truth - my
    vx = (dx * dx).mean(axis=-1)
    vy = (dy * dy).mean(axis=-1)
    cov = (dx * dy).mean(axis=-1)
    mx, my = mx[..., 0], my[..., 0]
    out = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(out) if out.ndim == 0 else out


def to_unit_range(x, lo: float, hi: float) -> np.ndarray:
    """Affine map of [lo, hi] onto [-1, 1]."""
    span = hi - lo if hi > lo else 1.0
    return 2.0 * (np.asarray(x, dtype=np.float64) - lo) / span - 1.0


def mean_ssim(pred, truth, lo: float, hi: float) -> float:
    """SSIM per snapshot and service after scaling to [-1, 1], then averaged."""
    return float(np.mean(ssim(to_unit_range(pred, lo, hi), to_unit_range(truth, lo, hi))))


@dataclass
class NMAEResult:
    labels: list[str]
    values: np.ndarray      # NaN where every term was excluded
    excluded: np.ndarray    # (window, antenna) terms dropped for zero span
    total_terms: int

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.values.tolist()))


def _nmae(pred, truth, labels) -> NMAEResult:
    """pred/truth [N, K, S, A]."""
    pred, truth = _pair(pred, truth)
    if pred.ndim != 4:
        raise DimensionError("nmae expects [N, K, S, A]")
    span = truth.max(axis=1) - truth.min(axis=1)                # [N, S, A]
    err = np.abs(pred - truth).mean(axis=1)                     # mean over the horizon
    keep = span >= SPAN_FLOOR
    if not keep.any():
        raise ContractError("NMAE undefined: every (antenna, window) has zero demand span")
    ratio = np.where(keep, err / np.where(keep, span, 1.0), 0.0)
    counts = keep.sum(axis=(0, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        values = ratio.sum(axis=(0, 2)) / counts
    excluded = (~keep).sum(axis=(0, 2))
    return NMAEResult(list(labels), values, excluded, int(span.shape[0] * span.shape[2]))


def nmae_per_service(pred, truth, service_ids=None) -> NMAEResult:
    """Per-service mean of |error| / span, span being the truth range over each
    window's horizon at each antenna."""
    pred, truth = _pair(pred, truth)
    labels = service_ids if service_ids is not None else [str(i) for i in range(pred.shape[2])]
    return _nmae(pred, truth, labels)


def category_groups(services) -> tuple[list[str], np.ndarray]:
    """Categories present (canonical order) and a [C, S] 0/1 membership matrix."""
    for s in services:
        if s.category not in CATEGORIES:
            raise ContractError(f"unknown category {s.category!r} for service {s.id!r}")
    present = [c for c in CATEGORIES if any(s.category == c for s in services)]
    member = np.array([[1.0 if s.category == c else 0.0 for s in services] for c in present])
    return present, member


def nmae_per_category(pred, truth, services) -> NMAEResult:
    """Services are summed within each category (pred and truth alike) first."""
    pred, truth = _pair(pred, truth)
    if len(services) != pred.shape[2]:
        raise DimensionError("catalog size does not match the service axis")
    labels, member = category_groups(services)
    group = lambda x: np.einsum("cs,nksa->nkca", member, x)
    return _nmae(group(pred), group(truth), labels)


@dataclass
class EvalReport:
    kind: str
    config_hash: str
    data_hash: str
    n_windows: int
    mae_steps: np.ndarray
    mae: float
    psnr: float
    ssim: float
    nmae_service: NMAEResult
    nmae_category: NMAEResult
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.mae_steps)

    def rows(self) -> list[tuple[str, str, str, float]]:
        """(metric, scope, step, value) rows; step is '' for aggregates."""
        out = [("mae", "all", "", self.mae),
               ("mae_bytes_per_s", "all", "", self.mae / BIN_SECONDS),
               ("psnr", "all", "", self.psnr),
               ("ssim", "all", "", self.ssim)]
        out += [("mae", "all", str(k + 1), float(v)) for k, v in enumerate(self.mae_steps)]
        for name, res in (("nmae_service", self.nmae_service), ("nmae_category", self.nmae_category)):
            out += [(name, lab, "", float(v)) for lab, v in zip(res.labels, res.values)]
            out += [(name + "_excluded", lab, "", float(e)) for lab, e in zip(res.labels, res.excluded)]
        return out

    def to_csv(self) -> str:
        lines = ["metric,scope,step,value"]
        lines += [f"{m},{s},{k},{float(v)!r}" for m, s, k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [
            f"model          {self.kind}",
            f"config hash    {self.config_hash}",
            f"data hash      {self.data_hash}",
            f"test windows   {self.n_windows}",
            f"MAE            {self.mae:.6g} bytes/bin ({self.mae / BIN_SECONDS:.6g} bytes/s)",
            f"PSNR           {self.psnr:.4f} dB",
            f"SSIM           {self.ssim:.6f}",
            "MAE by step    " + " ".join(f"{v:.4g}" for v in self.mae_steps),
            "NMAE by service:",
        ]
        for res in (self.nmae_service, self.nmae_category):
            if res is self.nmae_category:
                lines.append("NMAE by category:")
            for lab, v, e in zip(res.labels, res.values, res.excluded):
                lines.append(f"  {lab:<16} {v:.6f}" + (f"  ({e} zero-span terms excluded)" if e else ""))
        lines.append(f"  mean service {np.nanmean(self.nmae_service.values):.6f}"
                     f"  mean category {np.nanmean(self.nmae_category.values):.6f}")
        return "\n".join(lines) + "\n"


def forecast_volumes(model, windows, stats: NormalizationStats, grid: AntennaGrid,
                     batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Denormalized (clamped) predictions and truths as [N, K, S, A]."""
    if len(windows) == 0:
        raise ContractError("empty test set")
    x, y = stack_windows(windows) if not isinstance(windows, tuple) else windows
    pred = grid_to_antennas(model.predict(x, batch_size=batch_size), grid)
    truth = grid_to_antennas(y, grid)
    pred = np.maximum(stats.denormalize(pred, axis=2), 0.0)
    truth = stats.denormalize(truth, axis=2)
    return pred, truth


def _safe_nmae(fn, *args, labels):
    try:
        return fn(*args)
    except ContractError:
        n = len(labels)
        return NMAEResult(list(labels), np.full(n, np.nan), np.zeros(n, dtype=int), 0)


def evaluate(model, windows, stats: NormalizationStats, grid: AntennaGrid, services,
             data_hash: str = "", batch_size: int = 128) -> EvalReport:
    pred, truth = forecast_volumes(model, windows, stats, grid, batch_size)
    return report_from_volumes(model, pred, truth, services, data_hash)


def report_from_volumes(model, pred, truth, services, data_hash: str = "") -> EvalReport:
    mae_steps, mae_all = mae(pred, truth)
    d_max = float(truth.max())
    lo, hi = float(truth.min()), d_max
    ids = [s.id for s in services]
    cats, _ = category_groups(services)
    desc = model.describe()
    return EvalReport(
        kind=model.kind,
        config_hash=desc["config_hash"],
        data_hash=data_hash,
        n_windows=len(pred),
        mae_steps=mae_steps,
        mae=mae_all,
        psnr=psnr(pred, truth, d_max) if d_max > 0 else float("nan"),
        ssim=mean_ssim(pred, truth, lo, hi),
        nmae_service=_safe_nmae(nmae_per_service, pred, truth, ids, labels=ids),
        nmae_category=_safe_nmae(nmae_per_category, pred, truth, services, labels=cats),
    )
