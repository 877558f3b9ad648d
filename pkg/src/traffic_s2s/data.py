"""Measurement ingest and preprocessing into normalized forecast windows.

Record format (one row per bin, antenna and service)::

    timestamp_utc,antenna_id,lon,lat,service_id,bytes_up,bytes_down

Uplink and downlink are summed per bin. Bins are 5 minutes wide and must be
contiguous; missing (antenna, service) rows inside a present bin count as
zero traffic.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ContractError, GapError, ParseError
from .gridmap import AntennaGrid, AntennaSite, project_lonlat

BIN_SECONDS = 300
BINS_PER_DAY = 86400 // BIN_SECONDS
RECORD_COLUMNS = ["timestamp_utc", "antenna_id", "lon", "lat", "service_id", "bytes_up", "bytes_down"]
CATALOG_COLUMNS = ["service_id", "service_name", "category"]
CATEGORIES = ("streaming", "social media", "web", "chat", "cloud", "gaming", "miscellaneous")
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Service:
    id: str
    name: str
    category: str


@dataclass
class TrafficSeries:
    timestamps: np.ndarray      # datetime64[s], UTC, 5-minute step
    antennas: list[AntennaSite]
    services: list[Service]
    volumes: np.ndarray         # [time, service, antenna] bytes per bin

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.volumes = np.asarray(self.volumes, dtype=np.float64)
        t, s, a = len(self.timestamps), len(self.services), len(self.antennas)
        if self.volumes.shape != (t, s, a):
            raise ContractError(f"volumes shape {self.volumes.shape} != ({t}, {s}, {a})")
        if not np.all(np.isfinite(self.volumes)) or np.any(self.volumes < 0):
            raise ContractError("volumes must be finite and nonnegative")
        if t > 1:
            steps = np.diff(self.timestamps).astype(np.int64)
            if np.any(steps != BIN_SECONDS):
                raise GapError("timestamps are not spaced by exactly 5 minutes")

    def __len__(self):
        return len(self.timestamps)

    @property
    def antenna_ids(self) -> list[str]:
        return [a.id for a in self.antennas]

    @property
    def service_ids(self) -> list[str]:
        return [s.id for s in self.services]

    def time_slice(self, start: int, stop: int) -> "TrafficSeries":
        return TrafficSeries(self.timestamps[start:stop], list(self.antennas), list(self.services),
                             self.volumes[start:stop])

    def select_antennas(self, ids) -> "TrafficSeries":
        index = {a: i for i, a in enumerate(self.antenna_ids)}
        missing = [a for a in ids if a not in index]
        if missing:
            raise ContractError(f"unknown antennas: {missing[:5]}")
        cols = [index[a] for a in ids]
        return TrafficSeries(self.timestamps, [self.antennas[i] for i in cols], list(self.services),
                             self.volumes[:, :, cols])


# -- ingest ---------------------------------------------------------------------------

def read_catalog(path) -> list[Service]:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError("empty service catalog", 1)
    if [c.strip() for c in rows[0]] != CATALOG_COLUMNS:
        raise ParseError(f"catalog header must be {','.join(CATALOG_COLUMNS)}", 1)
    services, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError("expected 3 fields", lineno)
        sid, name, category = (v.strip() for v in row)
        if category not in CATEGORIES:
            raise ParseError(f"unknown category {category!r}", lineno)
        if sid in seen:
            raise ParseError(f"duplicate service id {sid!r}", lineno)
        seen.add(sid)
        services.append(Service(sid, name, category))
    return services


def write_catalog(services, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CATALOG_COLUMNS)
    for s in services:
        writer.writerow([s.id, s.name, s.category])
    Path(path).write_text(buf.getvalue())


def _bad_line(mask: np.ndarray) -> int:
    # header is line 1
    return int(np.flatnonzero(mask)[0]) + 2


_NUMERIC = ("lon", "lat", "bytes_up", "bytes_down")


def _read_records(path) -> pd.DataFrame:
    typed = {c: (np.float64 if c in _NUMERIC else str) for c in RECORD_COLUMNS}
    try:
        return pd.read_csv(path, dtype=typed, keep_default_na=False)
    except ValueError:
        pass
    # slow path: keep text so the offending line can be reported
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        raise ParseError(f"malformed row: {exc}") from exc
    for col in _NUMERIC:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna().to_numpy()
        if bad.any():
            raise ParseError(f"bad {col} value {df[col].iloc[int(np.flatnonzero(bad)[0])]!r}", _bad_line(bad))
        df[col] = vals.astype(np.float64)
    return df


def ingest_csv(path, catalog: list[Service] | None = None) -> TrafficSeries:
    """Parse a record CSV into a sorted, gap-checked series (up + down merged)."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
    if not header.strip():
        raise ParseError("empty file", 1)
    if [c.strip() for c in header.strip().split(",")] != RECORD_COLUMNS:
        raise ParseError(f"header must be {','.join(RECORD_COLUMNS)}", 1)
    try:
        df = _read_records(path)
    except pd.errors.ParserError as exc:
        raise ParseError(f"malformed row: {exc}") from exc
    if df.empty:
        raise ParseError("no data rows", 2)

    for col in _NUMERIC:
        bad = ~np.isfinite(df[col].to_numpy())
        if bad.any():
            raise ParseError(f"bad {col} value", _bad_line(bad))
    bad = ((df["bytes_up"] < 0) | (df["bytes_down"] < 0)).to_numpy()
    if bad.any():
        raise ParseError("negative byte count", _bad_line(bad))
    for col in ("antenna_id", "service_id"):
        bad = (df[col].str.strip() == "").to_numpy()
        if bad.any():
            raise ParseError(f"empty {col}", _bad_line(bad))

    # parse each distinct timestamp string once
    ts_code, ts_text = pd.factorize(df["timestamp_utc"])
    parsed = pd.to_datetime(pd.Series(ts_text), utc=True, format="ISO8601", errors="coerce")
    bad_text = parsed.isna().to_numpy()
    if bad_text.any():
        raise ParseError("unparseable timestamp", _bad_line(bad_text[ts_code]))
    text_secs = parsed.dt.tz_convert(None).to_numpy().astype("datetime64[s]").astype(np.int64)
    bad_text = text_secs % BIN_SECONDS != 0
    if bad_text.any():
        raise ParseError("timestamp not on a 5-minute boundary", _bad_line(bad_text[ts_code]))
    secs = text_secs[ts_code]

    bins = np.unique(text_secs)
    expected = np.arange(bins[0], bins[-1] + BIN_SECONDS, BIN_SECONDS)
    if len(expected) != len(bins):
        missing = np.setdiff1d(expected, bins)
        listed = [format_timestamp(m) for m in missing]
        raise GapError(f"{len(missing)} missing 5-minute bins: {', '.join(listed[:10])}"
                       + (" ..." if len(listed) > 10 else ""), listed)

    antenna_ids = sorted(df["antenna_id"].unique())
    if catalog is None:
        services = [Service(s, s, "miscellaneous") for s in sorted(df["service_id"].unique())]
    else:
        services = list(catalog)
        known = {s.id for s in services}
        unknown = sorted(set(df["service_id"].unique()) - known)
        if unknown:
            raise ContractError(f"services missing from catalog: {unknown[:5]}")
    a_index = {a: i for i, a in enumerate(antenna_ids)}
    s_index = {s.id: i for i, s in enumerate(services)}
    t_idx = (secs - bins[0]) // BIN_SECONDS
    a_idx = df["antenna_id"].map(a_index).to_numpy()
    s_idx = df["service_id"].map(s_index).to_numpy()
    n_t, n_s, n_a = len(bins), len(services), len(antenna_ids)
    flat = (t_idx * n_s + s_idx) * n_a + a_idx
    order = np.argsort(flat, kind="stable")
    dup = np.zeros(len(flat), dtype=bool)
    dup[order[1:][np.diff(flat[order]) == 0]] = True
    if dup.any():
        raise ParseError("duplicate (timestamp, antenna, service) row", _bad_line(dup))
    volumes = np.zeros(n_t * n_s * n_a)
    volumes[flat] = df["bytes_up"].to_numpy() + df["bytes_down"].to_numpy()

    first = df.drop_duplicates("antenna_id").set_index("antenna_id").loc[antenna_ids]
    lon = first["lon"].to_numpy(dtype=np.float64)
    lat = first["lat"].to_numpy(dtype=np.float64)
    x, y = project_lonlat(lon, lat)
    antennas = [AntennaSite(aid, float(x[i]), float(y[i]), float(lon[i]), float(lat[i]))
                for i, aid in enumerate(antenna_ids)]
    return TrafficSeries(bins.astype("datetime64[s]"), antennas, services, volumes.reshape(n_t, n_s, n_a))


def format_timestamp(ts) -> str:
    if isinstance(ts, (int, np.integer)):
        ts = np.datetime64(int(ts), "s")
    return str(np.datetime64(ts, "s")) + "Z"


def write_csv(series: TrafficSeries, path) -> None:
    """Write a series in the record format; volumes rounded to whole bytes.

    Downlink carries 85% of each rounded volume (integer arithmetic), uplink
    the rest, so re-ingesting reproduces the rounded volumes exactly.
    """
    t, s, a = series.volumes.shape
    total = np.rint(series.volumes).astype(np.int64)
    down = total * 17 // 20
    up = total - down
    ts = np.array([format_timestamp(v) for v in series.timestamps], dtype=object)
    ant = np.array(series.antenna_ids, dtype=object)
    svc = np.array(series.service_ids, dtype=object)
    lon = np.array([f"{x.lon:.6f}" for x in series.antennas], dtype=object)
    lat = np.array([f"{x.lat:.6f}" for x in series.antennas], dtype=object)
    # row order: time, antenna, service
    ti, ai, si = np.meshgrid(np.arange(t), np.arange(a), np.arange(s), indexing="ij")
    ti, ai, si = ti.ravel(), ai.ravel(), si.ravel()
    df = pd.DataFrame({
        "timestamp_utc": ts[ti],
        "antenna_id": ant[ai],
        "lon": lon[ai],
        "lat": lat[ai],
        "service_id": svc[si],
        "bytes_up": up[ti, si, ai],
        "bytes_down": down[ti, si, ai],
    })
    df.to_csv(path, index=False, lineterminator="\n")


# -- preprocessing ---------------------------------------------------------------------

def filter_active_antennas(series: TrafficSeries, threshold: float = 0.9) -> TrafficSeries:
    """Keep antennas carrying traffic in at least ``threshold`` of the bins."""
    if not 0.0 < threshold <= 1.0:
        raise ContractError("threshold must lie in (0, 1]")
    active = (series.volumes.sum(axis=1) > 0).mean(axis=0)
    keep = [aid for aid, frac in zip(series.antenna_ids, active) if frac >= threshold]
    if not keep:
        raise ContractError(f"no antenna is active in >= {threshold:.0%} of the bins")
    return series.select_antennas(keep)


@dataclass
class NormalizationStats:
    mean: np.ndarray   # [S]
    std: np.ndarray    # [S], floored

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)

    def _shape(self, x, axis):
        shape = [1] * x.ndim
        shape[axis] = -1
        return self.mean.reshape(shape), self.std.reshape(shape)

    def normalize(self, x, axis: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mu, sd = self._shape(x, axis)
        return (x - mu) / sd

    def denormalize(self, x, axis: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mu, sd = self._shape(x, axis)
        return x * sd + mu


def compute_stats(volumes) -> NormalizationStats:
    """Per-service mean and population std over time and antennas of [T, S, A]."""
    v = np.asarray(volumes, dtype=np.float64)
    return NormalizationStats(v.mean(axis=(0, 2)), v.std(axis=(0, 2)))


def normalize(x, stats: NormalizationStats, axis: int = -2) -> np.ndarray:
    """Per-service z-score; ``axis`` is the service axis (default fits [T, S, A])."""
    return stats.normalize(x, axis)


def denormalize(x, stats: NormalizationStats, axis: int = -2) -> np.ndarray:
    return stats.denormalize(x, axis)


@dataclass
class ForecastWindow:
    input: np.ndarray    # [T_in, S, H, W], normalized
    target: np.ndarray   # [K, S, H, W], normalized
    start: np.datetime64


def to_grid(series: TrafficSeries, grid: AntennaGrid, stats: NormalizationStats | None = None):
    """[T, S, A] volumes (normalized when ``stats`` given) scattered to [T, S, H, W]."""
    values = series.volumes if stats is None else stats.normalize(series.volumes, axis=1)
    return grid.scatter(values, series.antenna_ids)


def window_dataset(series: TrafficSeries, grid: AntennaGrid, stats: NormalizationStats,
                   t_in: int, horizon: int, stride: int = 1) -> list[ForecastWindow]:
    """Sliding (input, target) windows; arrays are views of one shared grid tensor."""
    if stride < 1:
        raise ContractError("stride must be >= 1")
    n = len(series)
    if n < t_in + horizon:
        raise ContractError(f"series of {n} bins is shorter than T_in + K = {t_in + horizon}")
    cube = to_grid(series, grid, stats)
    cube.setflags(write=False)
    return [ForecastWindow(cube[i:i + t_in], cube[i + t_in:i + t_in + horizon], series.timestamps[i])
            for i in range(0, n - t_in - horizon + 1, stride)]


def stack_windows(windows) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([w.input for w in windows]), np.stack([w.target for w in windows]))


def chronological_split(series: TrafficSeries, train_frac: float = 0.8, t_in: int = 1,
                        horizon: int = 0) -> tuple[TrafficSeries, TrafficSeries]:
    """Contiguous prefix/suffix split; both parts must hold at least one window."""
    if not 0.0 < train_frac < 1.0:
        raise ContractError("train_frac must lie in (0, 1)")
    n = len(series)
    cut = int(n * train_frac + 1e-9)
    need = t_in + horizon
    if cut < need or n - cut < need:
        raise ContractError(f"split at {cut}/{n} leaves a side shorter than T_in + K = {need}")
    return series.time_slice(0, cut), series.time_slice(cut, n)
