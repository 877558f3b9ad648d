"""Synthetic city traffic with power-law service shares and diurnal cycles.

volume[t, s, a] = total * share[s] * weight[s, a] * profile[s, t] * noise[t, s, a]

share follows rank^-alpha, weight comes from Gaussian hotspots (normalized
per service), profile is a daily sinusoid with mean one, and noise is a
mean-one lognormal factor whose log is a mix of slow AR(1) drift (partly
city-wide) and white measurement noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .data import BIN_SECONDS, BINS_PER_DAY, CATEGORIES, Service, TrafficSeries
from .errors import ContractError
from .gridmap import EARTH_RADIUS_M, AntennaSite

DEFAULT_MIX = (("streaming", 0.5), ("web", 0.25), ("social media", 0.25))
CATEGORY_PHASE = {
    "streaming": 0.0, "social media": 0.5, "web": -0.6, "chat": 0.9,
    "cloud": -1.2, "gaming": 1.6, "miscellaneous": 0.3,
}


@dataclass
class SyntheticConfig:
    n_services: int = 8
    n_antennas: int = 36
    days: float = 28
    category_mix: tuple = DEFAULT_MIX
    exponent: float = 1.0
    top_share: float | None = None     # overrides exponent when set
    period: int = BINS_PER_DAY
    amplitude: float = 0.6
    second_harmonic: float = 0.2
    phase_jitter: float = 0.3
    n_hotspots: int = 3
    hotspot_width: float = 1500.0      # metres
    extent: float = 8000.0             # side of the square city, metres
    noise_scale: float = 0.35          # std of log-noise
    white_frac: float = 0.5            # share of log-noise variance that is white
    drift_corr: float = 0.95           # AR(1) coefficient per bin
    shared_frac: float = 0.5           # share of drift that is city-wide
    mean_antenna_bytes: float = 2e7    # mean total bytes per antenna per bin
    n_sporadic: int = 0                # extra antennas active about half the time
    start: str = "2026-01-05T00:00:00"
    center_lonlat: tuple = (9.19, 45.46)
    seed: int = 0

    def __post_init__(self):
        if self.n_services < 1 or self.n_antennas < 1:
            raise ContractError("need at least one service and one antenna")
        if self.days <= 0 or int(round(self.days * BINS_PER_DAY)) < 1:
            raise ContractError("days must be positive")
        for name in ("period", "hotspot_width", "extent", "mean_antenna_bytes"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        for name in ("amplitude", "second_harmonic", "phase_jitter", "noise_scale", "exponent"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if self.amplitude + self.second_harmonic >= 1:
            raise ContractError("amplitude + second_harmonic must stay below 1")
        for name in ("white_frac", "shared_frac"):
            if not 0 <= getattr(self, name) <= 1:
                raise ContractError(f"{name} must lie in [0, 1]")
        if not 0 <= self.drift_corr < 1:
            raise ContractError("drift_corr must lie in [0, 1)")
        if not self.category_mix:
            raise ContractError("category_mix is empty")
        self.category_mix = tuple((str(c), float(w)) for c, w in self.category_mix)
        for cat, w in self.category_mix:
            if cat not in CATEGORIES:
                raise ContractError(f"unknown category {cat!r}")
            if w <= 0:
                raise ContractError("category weights must be positive")
        if self.top_share is not None:
            self.exponent = exponent_for_top_share(self.top_share, self.n_services)

    @property
    def n_bins(self) -> int:
        return int(round(self.days * BINS_PER_DAY))


def powerlaw_shares(n: int, exponent: float) -> np.ndarray:
    """rank^-exponent normalized over ranks 1..n."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def exponent_for_top_share(top_share: float, n: int) -> float:
    """Exponent whose rank-1 share equals ``top_share`` among ``n`` services."""
    if n == 1:
        return 0.0
    if not 1.0 / n < top_share < 1.0:
        raise ContractError(f"top_share must lie in (1/{n}, 1)")
    return brentq(lambda a: powerlaw_shares(n, a)[0] - top_share, 0.0, 60.0, xtol=1e-14)


def assign_categories(n: int, mix) -> list[str]:
    """Spread categories over service ranks: counts by largest remainder, then
    each rank goes to the category furthest behind its quota."""
    cats = [c for c, _ in mix]
    w = np.array([x for _, x in mix], dtype=np.float64)
    quota = n * w / w.sum()
    counts = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    used = np.zeros(len(cats))
    out = []
    for _ in range(n):
        lag = np.where(counts > used, (counts - used) / np.maximum(counts, 1), -1.0)
        i = int(np.argmax(lag))
        used[i] += 1
        out.append(cats[i])
    return out


def _ar1(rng, shape, n_steps, rho):
    """Unit-variance stationary AR(1) paths, time on axis 0."""
    e = rng.standard_normal((n_steps,) + shape)
    out = np.empty_like(e)
    out[0] = e[0]
    k = np.sqrt(1 - rho * rho)
    for t in range(1, n_steps):
        out[t] = rho * out[t - 1] + k * e[t]
    return out


def synthesize_traffic(config: SyntheticConfig) -> TrafficSeries:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n_s, n_t = cfg.n_services, cfg.n_bins
    n_a = cfg.n_antennas + cfg.n_sporadic

    # antenna layout: half near hotspots, half uniform over the city
    hotspots = rng.uniform(0.2, 0.8, size=(cfg.n_hotspots, 2)) * cfg.extent
    amps = rng.uniform(0.5, 1.5, size=cfg.n_hotspots)
    near = rng.random(n_a) < 0.5
    pick = rng.integers(0, cfg.n_hotspots, size=n_a)
    xy = np.where(near[:, None],
                  hotspots[pick] + rng.normal(0, cfg.hotspot_width, size=(n_a, 2)),
                  rng.uniform(0, cfg.extent, size=(n_a, 2)))
    xy = np.clip(xy, 0, cfg.extent)

    d2 = ((xy[:, None, :] - hotspots[None, :, :]) ** 2).sum(-1)                    # [A, H]
    bump = np.exp(-d2 / (2 * cfg.hotspot_width ** 2))
    svc_amps = amps[None, :] * rng.uniform(0.5, 1.5, size=(n_s, cfg.n_hotspots))
    weight = 0.2 + svc_amps @ bump.T                                                # [S, A]
    weight /= weight.sum(axis=1, keepdims=True)

    categories = assign_categories(n_s, cfg.category_mix)
    phase = np.array([CATEGORY_PHASE[c] for c in categories]) + rng.normal(0, cfg.phase_jitter, n_s)
    phase2 = rng.uniform(0, 2 * np.pi, n_s)
    t = np.arange(n_t, dtype=np.float64)
    angle = 2 * np.pi * t[:, None] / cfg.period
    profile = (1 + cfg.amplitude * np.sin(angle - phase[None, :])
               + cfg.second_harmonic * np.sin(2 * angle - phase2[None, :]))        # [T, S]

    if cfg.noise_scale > 0:
        var_drift = cfg.noise_scale ** 2 * (1 - cfg.white_frac)
        var_white = cfg.noise_scale ** 2 * cfg.white_frac
        shared = _ar1(rng, (n_s, 1), n_t, cfg.drift_corr)
        local = _ar1(rng, (n_s, n_a), n_t, cfg.drift_corr)
        drift = np.sqrt(cfg.shared_frac) * shared + np.sqrt(1 - cfg.shared_frac) * local
        z = np.sqrt(var_drift) * drift + np.sqrt(var_white) * rng.standard_normal((n_t, n_s, n_a))
        noise = np.exp(z - cfg.noise_scale ** 2 / 2)
    else:
        noise = np.ones((n_t, n_s, n_a))

    shares = powerlaw_shares(n_s, cfg.exponent)
    total = cfg.mean_antenna_bytes * cfg.n_antennas
    volumes = total * shares[None, :, None] * weight[None] * profile[:, :, None] * noise
    if cfg.n_sporadic:
        off = rng.random((n_t, cfg.n_sporadic)) < 0.5
        volumes[:, :, cfg.n_antennas:][np.broadcast_to(off[:, None, :], (n_t, n_s, cfg.n_sporadic))] = 0
    volumes = np.maximum(volumes, 0.0)

    xy = xy - cfg.extent / 2
    lon0, lat0 = cfg.center_lonlat
    lat = lat0 + np.degrees(xy[:, 1] / EARTH_RADIUS_M)
    lon = lon0 + np.degrees(xy[:, 0] / (EARTH_RADIUS_M * np.cos(np.radians(lat0))))
    width = len(str(n_a - 1))
    antennas = [AntennaSite(f"A{i:0{width}d}", float(xy[i, 0]), float(xy[i, 1]), float(lon[i]), float(lat[i]))
                for i in range(n_a)]
    sw = len(str(n_s))
    services = [Service(f"S{r + 1:0{sw}d}", f"{categories[r]} service {r + 1}", categories[r]) for r in range(n_s)]
    start = np.datetime64(cfg.start.rstrip("Z"), "s")
    timestamps = start + np.arange(n_t) * np.timedelta64(BIN_SECONDS, "s")
    return TrafficSeries(timestamps, antennas, services, volumes)
