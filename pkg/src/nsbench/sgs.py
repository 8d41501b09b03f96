"""Unconditional sequential Gaussian simulation and nonstationarity injection.

Randomness comes from NumPy's Philox4x64 counter-based generator keyed through
``SeedSequence``. Per realization, stream 0 draws the random visiting path and
stream 1 the standard-normal deviates, one per visited cell in path order, so a
realization is a pure function of its seed.
"""

from __future__ import annotations

import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import scipy.linalg

from .grid import GridSpec, LabelMeta, Manifest, Realization, write_realization
from .variogram import KIND_CODES, VariogramModel, covariance

MASK64 = (1 << 64) - 1


class KrigingError(RuntimeError):
    pass


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (Steele, Lea & Flood 2014)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, *indices: int) -> int:
    """Chain SplitMix64 over ``base_seed`` and each index; result fits in 63 bits."""
    h = splitmix64(int(base_seed) & MASK64)
    for i in indices:
        h = splitmix64(h ^ (int(i) & MASK64))
    return h >> 1


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream])))


def random_path(seed: int, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("random_path needs n >= 1")
    return rng_stream(seed, 0).permutation(n)


@dataclass(frozen=True)
class SimulationConfig:
    grid: GridSpec
    model: VariogramModel
    seed: int = 0
    max_neighbors: int = 32
    search_radius: float | None = None

    def __post_init__(self):
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")
        if self.search_radius is not None and not self.search_radius > 0:
            raise ValueError("search_radius must be positive")

    @property
    def radius(self) -> float:
        if self.search_radius is not None:
            return float(self.search_radius)
        return max(self.model.range_m, 4.0 * self.grid.cell_size)


@dataclass(frozen=True)
class TrendSpec:
    proportion: float
    azimuth: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.proportion <= 1.0:
            raise ValueError(f"trend proportion {self.proportion} outside [0, 1]")
        if not 0.0 <= self.azimuth < 360.0:
            raise ValueError(f"azimuth {self.azimuth} outside [0, 360)")


# ---------------------------------------------------------------------------
# kriging


def simple_kriging(neighbor_locs, neighbor_vals, target, model: VariogramModel):
    """Zero-mean simple kriging estimate and variance at ``target``."""
    locs = np.asarray(neighbor_locs, dtype=np.float64).reshape(-1, 2)
    vals = np.asarray(neighbor_vals, dtype=np.float64).ravel()
    if len(locs) != len(vals):
        raise ValueError(f"{len(locs)} locations but {len(vals)} values")
    c0 = model.total_variance
    if len(vals) == 0:
        return 0.0, c0
    diff = locs[:, None, :] - locs[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    off_diag = dist[~np.eye(len(locs), dtype=bool)]
    if np.any(off_diag == 0):
        raise KrigingError("singular kriging system: duplicate neighbor locations")
    K = covariance(model, dist)
    k = covariance(model, np.sqrt(((locs - np.asarray(target, dtype=np.float64)) ** 2).sum(-1)))
    try:
        lam = scipy.linalg.solve(K, k, assume_a="sym", check_finite=True)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise KrigingError(f"singular kriging system: {exc}") from exc
    var = c0 - float(lam @ k)
    if var < -1e-9:
        raise KrigingError(f"negative kriging variance {var:.3e}")
    return float(lam @ vals), max(var, 0.0)


@numba.njit(cache=True)
def _cov(kind, a, sill, nugget, h):
    if h <= 0.0:
        return nugget + sill
    r = h / a
    if kind == 0:
        if r >= 1.0:
            return 0.0
        return sill * (1.0 - (1.5 * r - 0.5 * r * r * r))
    if kind == 1:
        return sill * math.exp(-3.0 * r)
    return sill * math.exp(-3.0 * r * r)


@numba.njit(cache=True)
def _sgs_kernel(nx, ny, cs, kind, a, sill, nugget, path, normals, tdx, tdy, max_nb, out):
    """Fill ``out`` (flat, row-major) along ``path``. Returns -1 or the failing cell."""
    done = np.zeros(nx * ny, dtype=np.bool_)
    nb_x = np.empty(max_nb)
    nb_y = np.empty(max_nb)
    nb_v = np.empty(max_nb)
    c0 = nugget + sill
    for t in range(path.shape[0]):
        cell = path[t]
        cx = cell % nx
        cy = cell // nx
        k = 0
        for j in range(tdx.shape[0]):
            ix = cx + tdx[j]
            iy = cy + tdy[j]
            if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
                continue
            idx = iy * nx + ix
            if done[idx]:
                nb_x[k] = (ix - cx) * cs
                nb_y[k] = (iy - cy) * cs
                nb_v[k] = out[idx]
                k += 1
                if k == max_nb:
                    break
        mean = 0.0
        var = c0
        if k > 0:
            K = np.empty((k, k))
            rhs = np.empty(k)
            for p in range(k):
                K[p, p] = c0
                rhs[p] = _cov(kind, a, sill, nugget, math.sqrt(nb_x[p] ** 2 + nb_y[p] ** 2))
                for q in range(p + 1, k):
                    h = math.sqrt((nb_x[p] - nb_x[q]) ** 2 + (nb_y[p] - nb_y[q]) ** 2)
                    c = _cov(kind, a, sill, nugget, h)
                    K[p, q] = c
                    K[q, p] = c
            lam = np.linalg.solve(K, rhs)
            s = 0.0
            for p in range(k):
                mean += lam[p] * nb_v[p]
                s += lam[p] * rhs[p]
            var = c0 - s
            if not (var == var) or var < -1e-9:
                return cell
            if var < 0.0:
                var = 0.0
        out[cell] = mean + math.sqrt(var) * normals[t]
        done[cell] = True
    return -1


def search_template(grid: GridSpec, radius: float):
    """Cell offsets within ``radius`` sorted by distance (ties by dy, then dx)."""
    r = int(math.floor(radius / grid.cell_size))
    r = min(r, max(grid.nx, grid.ny))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    dx = dx.ravel()
    dy = dy.ravel()
    d2 = (dx * grid.cell_size) ** 2 + (dy * grid.cell_size) ** 2
    keep = (d2 > 0) & (d2 <= radius * radius)
    dx, dy, d2 = dx[keep], dy[keep], d2[keep]
    order = np.lexsort((dx, dy, d2))
    return dx[order].astype(np.int64), dy[order].astype(np.int64)


def simulate(config: SimulationConfig) -> Realization:
    grid, model = config.grid, config.model
    n = grid.n_cells
    path = random_path(config.seed, n).astype(np.int64)
    normals = rng_stream(config.seed, 1).standard_normal(n)
    tdx, tdy = search_template(grid, config.radius)
    out = np.zeros(n)
    bad = _sgs_kernel(grid.nx, grid.ny, grid.cell_size, KIND_CODES[model.kind], model.range_m,
                      model.sill, model.nugget, path, normals, tdx, tdy,
                      config.max_neighbors, out)
    if bad >= 0:
        raise KrigingError(f"kriging failed at cell {bad} (x={bad % grid.nx}, y={bad // grid.nx})")
    label = LabelMeta(model.range_m, 0.0, config.seed, "stationary")
    return Realization(grid, out.reshape(grid.ny, grid.nx), label)


# ---------------------------------------------------------------------------
# trends


def standardized_ramp(grid: GridSpec, azimuth: float) -> np.ndarray:
    """Planar surface cos(az)*x + sin(az)*y over cell centers, mean 0 and variance 1."""
    x, y = grid.cell_centers()
    az = math.radians(azimuth)
    t = math.cos(az) * x + math.sin(az) * y
    t = t - t.mean()
    return t / t.std()


def trend_azimuth(seed: int) -> float:
    return float(rng_stream(seed, 2).uniform(0.0, 360.0))


def add_linear_trend(residual: Realization, spec: TrendSpec, seed: int | None = None) -> Realization:
    """Mix a standardized planar trend into a stationary residual.

    Output is sqrt(p)*t + sqrt(1-p)*r so the trend carries fraction p of the
    variance when t and r are uncorrelated.
    """
    p = spec.proportion
    seed = residual.label.seed if seed is None else int(seed)
    label = LabelMeta(residual.label.range_m, p, seed, "type2")
    if p == 0.0:
        return residual.with_values(residual.values, label)
    t = standardized_ramp(residual.grid, spec.azimuth)
    r = residual.values.astype(np.float64)
    return residual.with_values(math.sqrt(p) * t + math.sqrt(1.0 - p) * r, label)


def explained_variance(values, regressors) -> float:
    """R^2 of an ordinary least-squares fit of ``values`` on ``regressors`` plus intercept."""
    z = np.asarray(values, dtype=np.float64).ravel()
    cols = [np.ones_like(z)] + [np.asarray(c, dtype=np.float64).ravel() for c in regressors]
    X = np.stack(cols, axis=1)
    beta, *_ = np.linalg.lstsq(X, z, rcond=None)
    resid = z - X @ beta
    zc = z - z.mean()
    return float(1.0 - resid @ resid / (zc @ zc))


def estimate_trend_proportion(r: Realization) -> float:
    """Trend proportion re-estimated by regressing the field on a plane in x and y."""
    x, y = r.grid.cell_centers()
    return explained_variance(r.values, [x, y])


# ---------------------------------------------------------------------------
# datasets

DATASET_KINDS = ("train", "type1", "type2")


def default_ranges(kind: str, scale: float = 1.0) -> list[float]:
    if kind == "type1":
        base = np.linspace(400.0, 1000.0, 7)
    else:
        base = np.linspace(40.0, 400.0, 10)
    return [float(v) for v in base * scale]


def default_proportions() -> list[float]:
    return [round(0.1 * i, 1) for i in range(10)]


def realization_for(grid: GridSpec, kind: str, range_m: float, proportion: float, seed: int,
                    azimuth: float | None = None, variogram_kind: str = "spherical") -> Realization:
    """The realization a dataset stores for one (setting, replicate), given its derived seed."""
    model = VariogramModel(variogram_kind, range_m)
    r = simulate(SimulationConfig(grid, model, seed))
    if kind == "type1":
        return r.with_values(r.values, LabelMeta(range_m, 0.0, seed, "type1"))
    if kind == "type2":
        az = trend_azimuth(seed) if azimuth is None else azimuth
        return add_linear_trend(r, TrendSpec(proportion, az), seed)
    return r


def _job(args):
    grid_d, kind, range_m, p, seed, azimuth, path = args
    r = realization_for(GridSpec.from_dict(grid_d), kind, range_m, p, seed, azimuth)
    write_realization(r, path)
    return path


def dataset_settings(kind: str, ranges, proportions):
    if kind not in DATASET_KINDS:
        raise ValueError(f"dataset kind must be one of {DATASET_KINDS}")
    if kind == "type2":
        return [(float(a), float(p)) for a in ranges for p in proportions]
    return [(float(a), 0.0) for a in ranges]


def generate_dataset(grid: GridSpec, kind: str, ranges, proportions=(), count_per_setting: int = 50,
                     base_seed: int = 0, out_dir=".", azimuth: float | None = None,
                     force: bool = False, workers: int = 1) -> Manifest:
    """Simulate ``count_per_setting`` realizations per setting and write them with a manifest.

    Replicate ``j`` of setting ``i`` uses seed ``derive_seed(base_seed, i, j)``.
    """
    settings = dataset_settings(kind, ranges, proportions)
    if kind == "type1":
        bad = [a for a, _ in settings if not a > grid.extent / 3]
        if bad:
            raise ValueError(f"type1 ranges must exceed domain/3 = {grid.extent / 3:.1f} m: {bad}")
    if kind == "type2" and any(not 0 <= p <= 1 for _, p in settings):
        raise ValueError("trend proportions must lie in [0, 1]")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (set force=True to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    items, jobs = [], []
    for i, (a, p) in enumerate(settings):
        for j in range(count_per_setting):
            seed = derive_seed(base_seed, i, j)
            nonstat = {"train": "stationary", "type1": "type1", "type2": "type2"}[kind]
            name = f"{kind}_{i:04d}_{j:04d}.nsr"
            item = {"file": name, "range_m": a, "trend_proportion": p if kind == "type2" else 0.0,
                    "seed": seed, "nonstat_type": nonstat, "setting": i, "replicate": j}
            if kind == "type2":
                item["azimuth"] = trend_azimuth(seed) if azimuth is None else float(azimuth)
            items.append(item)
            jobs.append((grid.to_dict(), kind, a, p, seed, azimuth, str(out / name)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            list(ex.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        for job in jobs:
            _job(job)
    manifest = Manifest(grid, items, out, {
        "kind": kind,
        "base_seed": int(base_seed),
        "seed_derivation": "splitmix64 chain over (base_seed, setting, replicate), top 63 bits",
        "variogram": "spherical, sill 1, nugget 0",
        "ranges": [float(a) for a in ranges],
        "proportions": [float(p) for p in proportions] if kind == "type2" else [],
    })
    manifest.write()
    return manifest


def cpu_count() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
