"""Optimal one-to-one mapping of irregular antenna sites onto a regular grid.

Antennas are assigned to grid cell centres so that the summed Euclidean
displacement is minimal, using a shortest-augmenting-path Hungarian solver
(O(n^3), inner loop vectorized with numpy). Cells left without an antenna are
masked.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError

EARTH_RADIUS_M = 6_371_008.8


@dataclass(frozen=True)
class AntennaSite:
    id: str
    x: float
    y: float
    lon: float | None = None
    lat: float | None = None


def project_lonlat(lon, lat, origin=None):
    """Equirectangular projection to metres about ``origin`` (default: centroid)."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    lon0, lat0 = (float(lon.mean()), float(lat.mean())) if origin is None else origin
    x = EARTH_RADIUS_M * np.radians(lon - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * np.radians(lat - lat0)
    return x, y


# -- assignment ----------------------------------------------------------------------

def assignment_cost(cost, assignment) -> float:
    """Total cost of a row -> column assignment (exactly rounded sum)."""
    cost = np.asarray(cost, dtype=np.float64)
    return math.fsum(float(cost[i, j]) for i, j in enumerate(assignment))


def _check_square(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise ContractError(f"cost matrix must be non-empty and square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix must be finite")
    return c


def hungarian_assign(cost) -> list[int]:
    """Minimum-cost perfect matching; returns ``assignment[row] = column``.

    Among equally good candidates the lowest column index is taken when
    extending an augmenting path, so results are reproducible.
    """
    c = _check_square(cost)
    if np.any(c < 0):
        raise ContractError("cost matrix must be nonnegative")
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)    # p[col] = row matched to col (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=np.int64)  # predecessor column on the alternating path
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    return assignment


def brute_force_assign(cost) -> list[int]:
    """Exhaustive minimum over all permutations (n <= 8)."""
    c = _check_square(cost)
    n = c.shape[0]
    if n > 8:
        raise ContractError(f"brute force refused for n={n} > 8")
    best, best_total = None, math.inf
    for perm in itertools.permutations(range(n)):
        total = assignment_cost(c, perm)
        if total < best_total:
            best, best_total = perm, total
    return list(best)


# -- grid ------------------------------------------------------------------------------

@dataclass
class AntennaGrid:
    shape: tuple[int, int]
    origin: tuple[float, float]    # centre of cell (0, 0): (x_min, y_max)
    spacing: tuple[float, float]   # (dx, dy); rows run from north to south
    antenna_ids: list[str]
    cells: dict[str, tuple[int, int]]
    displacement: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        rows, cols = self.shape
        seen = set()
        for aid in self.antenna_ids:
            r, c = self.cells[aid]
            if not (0 <= r < rows and 0 <= c < cols):
                raise ContractError(f"antenna {aid} mapped outside the grid")
            if (r, c) in seen:
                raise ContractError(f"cell {(r, c)} assigned twice")
            seen.add((r, c))

    @property
    def mask(self) -> np.ndarray:
        """True where a cell holds an antenna."""
        m = np.zeros(self.shape, dtype=bool)
        for aid in self.antenna_ids:
            m[self.cells[aid]] = True
        return m

    @property
    def n_masked(self) -> int:
        return self.shape[0] * self.shape[1] - len(self.antenna_ids)

    @property
    def total_displacement(self) -> float:
        return math.fsum(self.displacement.get(a, 0.0) for a in self.antenna_ids)

    @property
    def mean_displacement(self) -> float:
        return self.total_displacement / len(self.antenna_ids)

    def index_arrays(self, antenna_order) -> tuple[np.ndarray, np.ndarray]:
        rows = np.array([self.cells[a][0] for a in antenna_order], dtype=np.int64)
        cols = np.array([self.cells[a][1] for a in antenna_order], dtype=np.int64)
        return rows, cols

    def scatter(self, values, antenna_order) -> np.ndarray:
        """[..., A] per-antenna values -> [..., H, W] grid; masked cells are 0."""
        values = np.asarray(values, dtype=np.float64)
        rows, cols = self.index_arrays(antenna_order)
        out = np.zeros(values.shape[:-1] + tuple(self.shape), dtype=np.float64)
        out[..., rows, cols] = values
        return out

    def gather(self, grid, antenna_order) -> np.ndarray:
        """[..., H, W] grid -> [..., A] in ``antenna_order``."""
        rows, cols = self.index_arrays(antenna_order)
        return np.asarray(grid)[..., rows, cols]

    # -- text table -------------------------------------------------------------------

    def to_text(self, comments=()) -> str:
        lines = [f"# {c}" for c in comments]
        lines += [
            f"# grid_rows={self.shape[0]}",
            f"# grid_cols={self.shape[1]}",
            f"# origin_x_m={self.origin[0]!r}",
            f"# origin_y_m={self.origin[1]!r}",
            f"# spacing_x_m={self.spacing[0]!r}",
            f"# spacing_y_m={self.spacing[1]!r}",
            f"# total_displacement_m={self.total_displacement:.6f}",
            f"# mean_displacement_m={self.mean_displacement:.6f}",
            "antenna_id,row,col,displacement_m",
        ]
        for aid in self.antenna_ids:
            r, c = self.cells[aid]
            lines.append(f"{aid},{r},{c},{self.displacement.get(aid, 0.0):.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AntennaGrid":
        meta = {}
        ids, cells, disp = [], {}, {}
        header_seen = False
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if sep:
                    meta[key.strip()] = value.strip()
                continue
            if not header_seen:
                if line != "antenna_id,row,col,displacement_m":
                    raise ParseError(f"unexpected mapping header {line!r}", lineno)
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError("expected 4 fields", lineno)
            try:
                aid, r, c, d = parts[0], int(parts[1]), int(parts[2]), float(parts[3])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            ids.append(aid)
            cells[aid] = (r, c)
            disp[aid] = d
        try:
            shape = (int(meta["grid_rows"]), int(meta["grid_cols"]))
            origin = (float(meta["origin_x_m"]), float(meta["origin_y_m"]))
            spacing = (float(meta["spacing_x_m"]), float(meta["spacing_y_m"]))
        except KeyError as exc:
            raise ParseError(f"mapping header lacks {exc.args[0]}") from None
        if not header_seen:
            raise ParseError("mapping table header missing")
        return cls(shape, origin, spacing, ids, cells, disp)


def grid_centers(antennas, rows: int, cols: int):
    """Uniform cell centres spanning the antenna bounding box, row-major."""
    xs = np.array([a.x for a in antennas], dtype=np.float64)
    ys = np.array([a.y for a in antennas], dtype=np.float64)
    x_min, x_max, y_min, y_max = xs.min(), xs.max(), ys.min(), ys.max()
    dx = (x_max - x_min) / (cols - 1) if cols > 1 else 0.0
    dy = (y_max - y_min) / (rows - 1) if rows > 1 else 0.0
    x0 = x_min if cols > 1 else 0.5 * (x_min + x_max)
    y0 = y_max if rows > 1 else 0.5 * (y_min + y_max)
    cx = x0 + dx * np.arange(cols)
    cy = y0 - dy * np.arange(rows)
    gx, gy = np.meshgrid(cx, cy)
    return np.stack([gx.ravel(), gy.ravel()], axis=1), (float(x0), float(y0)), (float(dx), float(dy))


def build_cost_matrix(antennas, centers) -> np.ndarray:
    """Antenna-to-centre Euclidean distances, padded to square with max + 1."""
    if not antennas:
        raise ContractError("antenna list is empty")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    n, m = len(antennas), len(centers)
    if m < n:
        raise ContractError(f"{m} grid cells cannot host {n} antennas")
    pts = np.array([(a.x, a.y) for a in antennas], dtype=np.float64)
    dist = np.hypot(pts[:, None, 0] - centers[None, :, 0], pts[:, None, 1] - centers[None, :, 1])
    if m == n:
        return dist
    dummy = float(dist.max()) + 1.0
    return np.vstack([dist, np.full((m - n, m), dummy)])


def choose_grid_dims(antennas) -> tuple[int, int]:
    """Small grid with rows*cols >= |A| and aspect ratio close to the bounding box.

    Row counts within +-2 of the aspect-matched estimate are tried; the one
    with the fewest cells wins, ties going to the closer aspect ratio.
    """
    n = len(antennas)
    if n == 0:
        raise ContractError("antenna list is empty")
    xs = [a.x for a in antennas]
    ys = [a.y for a in antennas]
    width, height = max(xs) - min(xs), max(ys) - min(ys)
    aspect = width / height if width > 0 and height > 0 else 1.0
    h0 = max(1, round(math.sqrt(n / aspect)))
    best = None
    for h in range(max(1, h0 - 2), h0 + 3):
        w = math.ceil(n / h)
        key = (h * w, abs(math.log(w / h) - math.log(aspect)), h)
        if best is None or key < best[0]:
            best = (key, (h, w))
    return best[1]


def map_antennas_to_grid(antennas, rows: int | None = None, cols: int | None = None) -> AntennaGrid:
    """Assign every antenna to a distinct grid cell minimizing total displacement."""
    antennas = list(antennas)
    if not antennas:
        raise ContractError("antenna list is empty")
    if len({a.id for a in antennas}) != len(antennas):
        raise ContractError("antenna ids must be unique")
    if rows is None or cols is None:
        rows, cols = choose_grid_dims(antennas)
    if rows * cols < len(antennas):
        sugg = choose_grid_dims(antennas)
        raise ContractError(f"a {rows}x{cols} grid cannot host {len(antennas)} antennas; "
                            f"try {sugg[0]}x{sugg[1]}")
    centers, origin, spacing = grid_centers(antennas, rows, cols)
    cost = build_cost_matrix(antennas, centers)
    assignment = hungarian_assign(cost)
    ids = [a.id for a in antennas]
    cells = {}
    disp = {}
    for i, aid in enumerate(ids):
        j = assignment[i]
        cells[aid] = (j // cols, j % cols)
        disp[aid] = float(cost[i, j])
    return AntennaGrid((rows, cols), origin, spacing, ids, cells, disp)
