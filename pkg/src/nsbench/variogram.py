"""Variogram models, the omnidirectional experimental semivariogram and range fitting.

Exponential and gaussian models use the practical-range convention: the
structure reaches 95% of the sill at ``range_m``, hence the factor 3 in the
exponent. Spherical reaches the sill exactly at ``range_m``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .grid import Realization

KINDS = ("spherical", "exponential", "gaussian")
KIND_CODES = {k: i for i, k in enumerate(KINDS)}

# Pair count above which per-bin sums switch from correctly rounded (fsum)
# accumulation to ordinary float64 accumulation.
EXACT_PAIR_LIMIT = 20_000_000


class NoSpatialStructureError(ValueError):
    pass


@dataclass(frozen=True)
class VariogramModel:
    kind: str = "spherical"
    range_m: float = 100.0
    sill: float = 1.0
    nugget: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variogram kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "range_m", float(self.range_m))
        object.__setattr__(self, "sill", float(self.sill))
        object.__setattr__(self, "nugget", float(self.nugget))
        if not self.range_m > 0:
            raise ValueError("range_m must be positive")
        if self.sill < 0 or self.nugget < 0:
            raise ValueError("sill and nugget must be non-negative")

    @property
    def total_variance(self) -> float:
        return self.nugget + self.sill

    def structure(self, h):
        """Normalized structure function in [0, 1], zero at h=0."""
        r = np.asarray(h, dtype=np.float64) / self.range_m
        if self.kind == "spherical":
            return np.where(r < 1.0, 1.5 * r - 0.5 * r ** 3, 1.0)
        if self.kind == "exponential":
            return 1.0 - np.exp(-3.0 * r)
        return 1.0 - np.exp(-3.0 * r * r)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "range_m": self.range_m, "sill": self.sill, "nugget": self.nugget}


def _check_lags(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0) or np.any(np.isnan(h)):
        raise ValueError("lag distance must be non-negative")
    return h


def semivariance(model: VariogramModel, h):
    h = _check_lags(h)
    g = np.where(h > 0, model.nugget + model.sill * model.structure(h), 0.0)
    return float(g) if g.ndim == 0 else g


def covariance(model: VariogramModel, h):
    h = _check_lags(h)
    c = model.total_variance - np.asarray(semivariance(model, h))
    return float(c) if c.ndim == 0 else c


@dataclass(frozen=True, eq=False)
class ExperimentalVariogram:
    """Binned semivariogram. Empty bins carry ``gamma = nan`` and zero pairs."""

    lags: np.ndarray
    gamma: np.ndarray
    pair_counts: np.ndarray
    cell_size: float = 1.0
    extent: float = 1.0

    @property
    def nonempty(self) -> np.ndarray:
        return self.pair_counts > 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lag", "gamma", "pairs"])
            for h, g, n in zip(self.lags, self.gamma, self.pair_counts):
                w.writerow([repr(float(h)), "" if n == 0 else repr(float(g)), int(n)])


def lag_bin(d, width, n_bins):
    """Bin index (1..n_bins) of distance ``d`` for lag centers k*width, tolerance width/2.

    Returns 0 for distances outside every bin.
    """
    k = np.floor(np.asarray(d) / width + 0.5).astype(np.int64)
    return np.where((k >= 1) & (k <= n_bins), k, 0)


def _offsets(nx, ny, cs, width, n_bins):
    """Canonical half-plane offsets (dy > 0, or dy == 0 and dx > 0) reaching the last bin."""
    reach = int(math.ceil((n_bins * width + 0.5 * width) / cs))
    rx = min(reach, nx - 1)
    ry = min(reach, ny - 1)
    out = []
    for dy in range(0, ry + 1):
        for dx in range(-rx, rx + 1):
            if dy == 0 and dx <= 0:
                continue
            d = math.sqrt((dx * cs) ** 2 + (dy * cs) ** 2)
            k = int(lag_bin(d, width, n_bins))
            if k:
                out.append((dx, dy, k))
    return out


def _pair_slices(z, dx, dy):
    ny, nx = z.shape
    a = z[0:ny - dy, max(0, -dx):nx - max(0, dx)]
    b = z[dy:ny, max(0, dx):nx - max(0, -dx)]
    return a, b


def experimental_semivariogram(r: Realization, n_bins: int = 30, max_lag: float | None = None,
                               method: str = "auto") -> ExperimentalVariogram:
    """Omnidirectional estimator gamma(h) = sum (z(u) - z(u+h))^2 / (2 N(h)).

    Every unordered pair of cells is counted once. Bins are centered at
    ``k * max_lag / n_bins`` for k = 1..n_bins with half-width tolerance;
    ``max_lag`` defaults to half the shorter domain side.
    ``method="exact"`` sums each bin with correctly rounded summation so the
    result does not depend on pair ordering; ``"fast"`` uses plain float64
    sums; ``"auto"`` picks exact below ``EXACT_PAIR_LIMIT`` pairs.
    """
    grid = r.grid
    if max_lag is None:
        max_lag = 0.5 * grid.extent
    return semivariogram_of_array(r.values, grid.cell_size, n_bins, max_lag, method)


def semivariogram_of_array(values, cell_size: float, n_bins: int, max_lag: float,
                           method: str = "auto") -> ExperimentalVariogram:
    """:func:`experimental_semivariogram` on a bare (ny, nx) array of any shape, e.g. a single row."""
    z = np.asarray(values, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.size == 0:
        raise ValueError("empty realization")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    ny, nx = z.shape
    diagonal = math.hypot(nx * cell_size, ny * cell_size)
    if not 0 < max_lag <= diagonal:
        raise ValueError(f"max_lag must lie in (0, {diagonal}], got {max_lag}")
    width = max_lag / n_bins
    offsets = _offsets(nx, ny, cell_size, width, n_bins)
    counts = np.zeros(n_bins + 1, dtype=np.int64)
    for dx, dy, k in offsets:
        counts[k] += (nx - abs(dx)) * (ny - dy)
    if method == "auto":
        method = "exact" if counts.sum() <= EXACT_PAIR_LIMIT else "fast"
    if method not in ("exact", "fast"):
        raise ValueError(f"unknown method {method!r}")

    sums = np.zeros(n_bins + 1)
    if method == "exact":
        terms: list[list[np.ndarray]] = [[] for _ in range(n_bins + 1)]
        for dx, dy, k in offsets:
            a, b = _pair_slices(z, dx, dy)
            terms[k].append(((a - b) ** 2).ravel())
        for k in range(1, n_bins + 1):
            if terms[k]:
                sums[k] = math.fsum(np.concatenate(terms[k]).tolist())
    else:
        for dx, dy, k in offsets:
            a, b = _pair_slices(z, dx, dy)
            d = a - b
            sums[k] += float(np.sum(d * d))

    counts = counts[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, sums[1:] / (2.0 * counts), np.nan)
    lags = width * np.arange(1, n_bins + 1)
    return ExperimentalVariogram(lags, gamma, counts, cell_size, min(nx, ny) * cell_size)


def model_experimental_variogram(model: VariogramModel, lags, pair_counts=None,
                                 cell_size: float = 1.0, extent: float | None = None) -> ExperimentalVariogram:
    """Noise-free experimental variogram read off the model curve."""
    lags = np.asarray(lags, dtype=np.float64)
    counts = np.ones(len(lags), dtype=np.int64) if pair_counts is None else np.asarray(pair_counts)
    extent = float(2 * lags.max()) if extent is None else extent
    return ExperimentalVariogram(lags, semivariance(model, lags), counts, cell_size, extent)


def _misfit(ev, kind, sill, nugget, a, mask):
    model = VariogramModel(kind, a, sill, nugget)
    res = semivariance(model, ev.lags[mask]) - ev.gamma[mask]
    return float(np.sum(ev.pair_counts[mask] * res * res))


def _golden(f, lo, hi, rtol, n_scan=160):
    grid = np.geomspace(lo, hi, n_scan)
    vals = [f(a) for a in grid]
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_scan - 1)]
    invphi = (math.sqrt(5) - 1) / 2
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > rtol * a:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return float(0.5 * (a + b))


def _check_fittable(ev):
    mask = ev.nonempty & np.isfinite(ev.gamma)
    if mask.sum() < 3:
        raise ValueError("fit_range needs at least 3 non-empty lag bins")
    if np.all(ev.gamma[mask] == 0):
        raise NoSpatialStructureError("no spatial structure: all semivariances are zero")
    return mask


def fit_range(ev: ExperimentalVariogram, kind: str = "spherical", sill: float = 1.0,
              nugget: float = 0.0, lower: float | None = None, upper: float | None = None,
              rtol: float = 1e-4) -> float:
    """Range minimizing the pair-weighted squared misfit, sill and nugget held fixed.

    A log-spaced scan over [cell_size, 2 * extent] brackets the minimum, then
    golden-section search narrows the bracket to ``rtol`` relative width.
    """
    mask = _check_fittable(ev)
    lo = ev.cell_size if lower is None else lower
    hi = 2.0 * ev.extent if upper is None else upper
    return _golden(lambda a: _misfit(ev, kind, sill, nugget, a, mask), lo, hi, rtol)


class DomainDispersion:
    """Mean correlation between two random cells of a grid, as a function of range.

    For a stationary field of unit variance the expected sample variance over
    the grid is ``1 - mean_correlation(a)``.
    """

    def __init__(self, grid):
        dy, dx = np.mgrid[0:grid.ny, 0:grid.nx]
        weight = (grid.nx - dx) * (grid.ny - dy) * np.where(dx > 0, 2, 1) * np.where(dy > 0, 2, 1)
        self.dist = np.sqrt((dx * grid.cell_size) ** 2 + (dy * grid.cell_size) ** 2).ravel()
        self.weight = weight.ravel() / float(grid.n_cells) ** 2

    def mean_correlation(self, kind: str, a: float) -> float:
        rho = 1.0 - VariogramModel(kind, a).structure(self.dist)
        return float(self.weight @ rho)


def fit_range_dispersion(ev: ExperimentalVariogram, sample_variance: float, dispersion: DomainDispersion,
                         kind: str = "spherical", rtol: float = 1e-4) -> float:
    """Fit the range with the sill tied to it: sill(a) = s^2 / (1 - mean_correlation(a)).

    The sample variance underestimates the sill by the domain dispersion, which
    grows with the range; coupling the two removes most of that bias for
    ranges comparable to the domain.
    """
    mask = _check_fittable(ev)

    def f(a):
        sill = sample_variance / max(1.0 - dispersion.mean_correlation(kind, a), 1e-6)
        return _misfit(ev, kind, sill, 0.0, a, mask)

    return _golden(f, ev.cell_size, 2.0 * ev.extent, rtol)


def oracle_range(r: Realization, kind: str = "spherical", n_bins: int = 30,
                 max_lag: float | None = None, sill: str = "dispersion",
                 dispersion: DomainDispersion | None = None) -> float:
    """Range estimated from the realization's own experimental variogram.

    ``sill`` selects how the sill is fixed: ``"unit"`` (1, the simulation
    sill), ``"sample"`` (sample variance) or ``"dispersion"`` (sample variance
    corrected for domain dispersion at each candidate range).
    """
    ev = experimental_semivariogram(r, n_bins, max_lag)
    s2 = float(np.var(np.asarray(r.values, dtype=np.float64)))
    if sill == "unit":
        return fit_range(ev, kind, sill=1.0)
    if sill == "sample":
        return fit_range(ev, kind, sill=s2)
    if sill == "dispersion":
        return fit_range_dispersion(ev, s2, dispersion or DomainDispersion(r.grid), kind)
    raise ValueError(f"unknown sill mode {sill!r}")
