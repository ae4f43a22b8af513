"""Spatial domain: gridded country, county partition, urbanicity, adjacency.

The country is a regular raster of cells.  Each cell carries a population
mass (the "density" surface collapsed to per-cell totals) and a county id.
Urbanicity is obtained by thresholding the density surface within each
county so the urban share of population mass matches a target, and the
county adjacency graph uses rook (edge-sharing) contiguity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class ConfigurationError(ValueError):
    """Raised when a geometry or layout specification is inconsistent."""


class RasterFormatError(ValueError):
    """Raised when an ASCII raster file cannot be parsed."""


@dataclass(frozen=True)
class DensityGrid:
    """Gridded population mass with a county partition.

    ``values[r, c]`` is the population mass attributed to the cell and
    ``county_id[r, c]`` the index of the county owning it.  Immutable
    after construction; safe to share across parallel replicates.
    """

    nrows: int
    ncols: int
    cell_size: float
    origin: tuple[float, float]
    values: np.ndarray
    county_id: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        county = np.asarray(self.county_id, dtype=int)
        if values.shape != (self.nrows, self.ncols) or county.shape != values.shape:
            raise ConfigurationError("grid arrays do not match declared shape")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ConfigurationError("density values must be finite and nonnegative")
        m = county.max() + 1
        if county.min() < 0 or not np.array_equal(np.unique(county), np.arange(m)):
            raise ConfigurationError("county ids must cover 0..m-1")
        for i in range(m):
            if values[county == i].sum() <= 0:
                raise ConfigurationError(f"county {i} has zero total population mass")
        values.setflags(write=False)
        county.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "county_id", county)

    @property
    def n_counties(self) -> int:
        return int(self.county_id.max()) + 1

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinates of cell centers, row-major flattened."""
        x0, y0 = self.origin
        xs = x0 + (np.arange(self.ncols) + 0.5) * self.cell_size
        ys = y0 + (np.arange(self.nrows) + 0.5) * self.cell_size
        xx, yy = np.meshgrid(xs, ys)
        return xx.ravel(), yy.ravel()

    def bounding_box(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, x0 + self.ncols * self.cell_size, y0, y0 + self.nrows * self.cell_size)

    def diameter(self) -> float:
        """Diagonal of the bounding box, used to calibrate range priors."""
        return float(np.hypot(self.ncols * self.cell_size, self.nrows * self.cell_size))

    def county_mass(self) -> np.ndarray:
        return np.bincount(self.county_id.ravel(), weights=self.values.ravel(),
                           minlength=self.n_counties)


@dataclass(frozen=True)
class UrbanMask:
    """Boolean urbanicity per cell plus realized urban mass fractions."""

    mask: np.ndarray
    realized_fraction: np.ndarray
    target_fraction: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected county adjacency: symmetric, no self-loops, connected."""

    m: int
    edges: tuple[tuple[int, int], ...]
    connected: bool

    def neighbor_counts(self) -> np.ndarray:
        deg = np.zeros(self.m, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


@dataclass(frozen=True)
class DensityFieldParams:
    """Log-Gaussian density field: exp(log_mean + log_sd * smoothed noise)."""

    log_mean: float = 0.0
    log_sd: float = 1.0
    smooth_cells: float = 3.0

    def __post_init__(self):
        if self.log_sd < 0 or self.smooth_cells < 0:
            raise ConfigurationError("density field parameters must be nonnegative")


def build_county_grid(county_rows: int, county_cols: int, nrows: int, ncols: int,
                      cell_size: float, density: DensityFieldParams | None = None,
                      seed: int | np.random.SeedSequence = 0,
                      origin: tuple[float, float] = (0.0, 0.0)) -> DensityGrid:
    """Synthetic country: block county layout and a smooth log-Gaussian density.

    The county layout must tile the grid exactly (nrows divisible by
    county_rows, ncols by county_cols).  The density field is sampled
    deterministically from the seed.
    """
    if county_rows < 1 or county_cols < 1 or nrows < 1 or ncols < 1 or cell_size <= 0:
        raise ConfigurationError("grid dimensions must be positive")
    if nrows % county_rows != 0 or ncols % county_cols != 0:
        raise ConfigurationError(
            f"county layout {county_rows}x{county_cols} does not tile grid {nrows}x{ncols}")
    density = density or DensityFieldParams()

    rng = np.random.default_rng(seed)
    if density.log_sd == 0:
        logz = np.zeros((nrows, ncols))
    else:
        noise = rng.standard_normal((nrows, ncols))
        if density.smooth_cells > 0:
            noise = ndimage.gaussian_filter(noise, density.smooth_cells, mode="reflect")
            sd = noise.std()
            if sd > 0:
                noise = noise / sd
        logz = density.log_sd * noise
    values = np.exp(density.log_mean + logz)

    block_r = nrows // county_rows
    block_c = ncols // county_cols
    rr = np.arange(nrows) // block_r
    cc = np.arange(ncols) // block_c
    county = (rr[:, None] * county_cols + cc[None, :]).astype(int)
    return DensityGrid(nrows, ncols, cell_size, origin, values, county)


def threshold_urbanicity(grid: DensityGrid, targets) -> UrbanMask:
    """Mark the densest cells of each county urban until the target mass share is met.

    Cells are ranked by density descending (ties broken by flat cell index
    ascending) and the smallest prefix whose cumulative mass first reaches
    the target fraction of county mass is marked urban.  A target of
    exactly 1 marks every cell urban.
    """
    m = grid.n_counties
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (m,)).copy()
    if np.any(targets < 0) or np.any(targets > 1):
        raise ValueError("urban targets must lie in [0, 1]")

    flat_vals = grid.values.ravel()
    flat_county = grid.county_id.ravel()
    mask = np.zeros(flat_vals.shape, dtype=bool)
    realized = np.zeros(m)

    for i in range(m):
        idx = np.flatnonzero(flat_county == i)
        total = flat_vals[idx].sum()
        if total <= 0:
            raise ValueError(f"county {i} has zero population mass")
        if targets[i] == 0.0:
            continue
        if targets[i] == 1.0:
            mask[idx] = True
            realized[i] = 1.0
            continue
        order = idx[np.argsort(-flat_vals[idx], kind="stable")]
        cum = np.cumsum(flat_vals[order])
        k = int(np.searchsorted(cum, targets[i] * total, side="left")) + 1
        urban_idx = order[:k]
        mask[urban_idx] = True
        realized[i] = flat_vals[urban_idx].sum() / total

    return UrbanMask(mask.reshape(grid.nrows, grid.ncols), realized, targets)


def county_adjacency(grid: DensityGrid) -> AdjacencyGraph:
    """Rook-contiguity county graph; errors if disconnected (ICAR needs connectivity)."""
    cid = grid.county_id
    pairs = set()
    a, b = cid[:, :-1].ravel(), cid[:, 1:].ravel()
    for u, v in zip(a, b):
        if u != v:
            pairs.add((min(u, v), max(u, v)))
    a, b = cid[:-1, :].ravel(), cid[1:, :].ravel()
    for u, v in zip(a, b):
        if u != v:
            pairs.add((min(u, v), max(u, v)))
    edges = tuple(sorted(pairs))
    m = grid.n_counties

    if m > 1:
        if not edges:
            raise ValueError("county adjacency graph is disconnected")
        i = np.array([e[0] for e in edges])
        j = np.array([e[1] for e in edges])
        adj = coo_matrix((np.ones(len(edges)), (i, j)), shape=(m, m))
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise ValueError("county adjacency graph is disconnected")
    return AdjacencyGraph(m, edges, True)


def write_adjacency(graph: AdjacencyGraph, path) -> None:
    """Edge-list export: one ``i j`` pair per line with i < j."""
    with open(path, "w") as fh:
        for i, j in graph.edges:
            fh.write(f"{i} {j}\n")


_HEADER_KEYS = ("nrows", "ncols", "cellsize", "xll", "yll")


def _parse_ascii_raster(path):
    header = {}
    with open(path) as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if len(lines) < len(_HEADER_KEYS):
        raise RasterFormatError(f"{path}: truncated header")
    for key, line in zip(_HEADER_KEYS, lines):
        parts = line.split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise RasterFormatError(f"{path}: expected header line '{key} <value>', got {line!r}")
        header[key] = parts[1]
    try:
        nrows, ncols = int(header["nrows"]), int(header["ncols"])
        cellsize = float(header["cellsize"])
        xll, yll = float(header["xll"]), float(header["yll"])
    except ValueError as exc:
        raise RasterFormatError(f"{path}: malformed header value ({exc})") from None
    body = lines[len(_HEADER_KEYS):]
    if len(body) != nrows:
        raise RasterFormatError(f"{path}: header says nrows {nrows} but found {len(body)} rows")
    rows = []
    for ln in body:
        vals = ln.split()
        if len(vals) != ncols:
            raise RasterFormatError(f"{path}: row with {len(vals)} values, expected {ncols}")
        try:
            rows.append([float(v) for v in vals])
        except ValueError:
            raise RasterFormatError(f"{path}: non-numeric cell value") from None
    arr = np.array(rows)
    if not np.all(np.isfinite(arr)):
        raise RasterFormatError(f"{path}: NaN or infinite cell values")
    return nrows, ncols, cellsize, (xll, yll), arr


def load_raster(density_path, county_path) -> DensityGrid:
    """Read a density raster plus its companion county-id raster."""
    nrows, ncols, cellsize, origin, values = _parse_ascii_raster(density_path)
    cn, cc, _, _, county = _parse_ascii_raster(county_path)
    if (cn, cc) != (nrows, ncols):
        raise RasterFormatError(
            f"county raster is {cn}x{cc}, density raster is {nrows}x{ncols}")
    county_int = county.astype(int)
    if np.any(county_int != county):
        raise RasterFormatError("county raster must contain integer ids")
    return DensityGrid(nrows, ncols, cellsize, origin, values, county_int)


def write_raster(path, grid: DensityGrid, which: str = "values") -> None:
    """Write the density (or county-id) layer in the ASCII-grid format."""
    arr = grid.values if which == "values" else grid.county_id
    with open(path, "w") as fh:
        fh.write(f"nrows {grid.nrows}\n")
        fh.write(f"ncols {grid.ncols}\n")
        fh.write(f"cellsize {grid.cell_size!r}\n")
        fh.write(f"xll {grid.origin[0]!r}\n")
        fh.write(f"yll {grid.origin[1]!r}\n")
        for row in arr:
            fh.write(" ".join(repr(v) if which == "values" else str(int(v)) for v in row))
            fh.write("\n")
