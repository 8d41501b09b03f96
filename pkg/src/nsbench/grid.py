"""Regular 2-D grids, simulated realizations and their on-disk format.

A realization file is a fixed 256-byte ASCII header followed by the cell
values as little-endian float32, row-major (``y`` outer, ``x`` inner)::

    NSBENCH-REALIZATION
    version=1
    nx=224
    ny=224
    cell_size=5.0
    range_m=100.0
    trend_proportion=0.0
    seed=12345
    nonstat_type=stationary
    <space padding up to byte 255>\n

Floats in the header are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "NSBENCH-REALIZATION"
FORMAT_VERSION = 1
HEADER_SIZE = 256
NONSTAT_TYPES = ("stationary", "type1", "type2")
_MAX_CELLS_PER_SIDE = 4096


class RealizationFormatError(ValueError):
    """Base class for unreadable realization files."""


class MalformedHeaderError(RealizationFormatError):
    pass


class DimensionMismatchError(RealizationFormatError):
    pass


class TruncatedFileError(RealizationFormatError):
    pass


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    cell_size: float

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("nx and ny must be integers")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "cell_size", float(self.cell_size))
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        if self.nx > _MAX_CELLS_PER_SIDE or self.ny > _MAX_CELLS_PER_SIDE:
            raise ValueError(f"grid side limited to {_MAX_CELLS_PER_SIDE} cells")
        if not (self.cell_size > 0 and np.isfinite(self.cell_size)):
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def extent_x(self) -> float:
        return self.nx * self.cell_size

    @property
    def extent_y(self) -> float:
        return self.ny * self.cell_size

    @property
    def extent(self) -> float:
        """Shorter side of the domain in meters."""
        return min(self.extent_x, self.extent_y)

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.extent_x, self.extent_y))

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "cell_size": self.cell_size}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["nx"], d["ny"], d["cell_size"])

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays ``(x, y)`` of shape (ny, nx) with cell-center coordinates."""
        x = (np.arange(self.nx) + 0.5) * self.cell_size
        y = (np.arange(self.ny) + 0.5) * self.cell_size
        return np.meshgrid(x, y)


def cell_coords(grid: GridSpec, i: int) -> tuple[float, float]:
    """Center of linear cell index ``i`` (row-major, x fastest) in meters."""
    if not 0 <= i < grid.n_cells:
        raise IndexError(f"cell index {i} outside [0, {grid.n_cells})")
    return ((i % grid.nx + 0.5) * grid.cell_size, (i // grid.nx + 0.5) * grid.cell_size)


@dataclass(frozen=True)
class LabelMeta:
    range_m: float
    trend_proportion: float = 0.0
    seed: int = 0
    nonstat_type: str = "stationary"

    def __post_init__(self):
        object.__setattr__(self, "range_m", float(self.range_m))
        object.__setattr__(self, "trend_proportion", float(self.trend_proportion))
        object.__setattr__(self, "seed", int(self.seed))
        if self.nonstat_type not in NONSTAT_TYPES:
            raise ValueError(f"nonstat_type must be one of {NONSTAT_TYPES}")
        if not 0.0 <= self.trend_proportion <= 1.0:
            raise ValueError(f"trend_proportion {self.trend_proportion} outside [0, 1]")
        if self.nonstat_type == "stationary" and self.trend_proportion != 0.0:
            raise ValueError("stationary label must have trend_proportion 0")
        if not self.range_m > 0:
            raise ValueError("range_m must be positive")

    def to_dict(self) -> dict:
        return {
            "range_m": self.range_m,
            "trend_proportion": self.trend_proportion,
            "seed": self.seed,
            "nonstat_type": self.nonstat_type,
        }


@dataclass(frozen=True, eq=False)
class Realization:
    """One simulated field. ``values`` has shape (ny, nx), float32, read-only."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)
    label: LabelMeta

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim == 1:
            if v.size != self.grid.n_cells:
                raise DimensionMismatchError(
                    f"{v.size} values for a {self.grid.nx}x{self.grid.ny} grid")
            v = v.reshape(self.grid.ny, self.grid.nx)
        if v.shape != (self.grid.ny, self.grid.nx):
            raise DimensionMismatchError(
                f"values shape {v.shape} does not match grid ({self.grid.ny}, {self.grid.nx})")
        if not np.all(np.isfinite(v)):
            raise ValueError("realization values must be finite")
        if self.label.nonstat_type == "type1" and not self.label.range_m > self.grid.extent / 3:
            raise ValueError(
                f"type1 realization needs range > {self.grid.extent / 3:.1f} m, got {self.label.range_m}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        if not isinstance(other, Realization):
            return NotImplemented
        return (self.grid == other.grid and self.label == other.label
                and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32)))

    def with_values(self, values, label: LabelMeta | None = None) -> "Realization":
        return Realization(self.grid, values, self.label if label is None else label)


def _format_header(r: Realization) -> bytes:
    lines = [
        MAGIC,
        f"version={FORMAT_VERSION}",
        f"nx={r.grid.nx}",
        f"ny={r.grid.ny}",
        f"cell_size={r.grid.cell_size!r}",
        f"range_m={r.label.range_m!r}",
        f"trend_proportion={r.label.trend_proportion!r}",
        f"seed={r.label.seed}",
        f"nonstat_type={r.label.nonstat_type}",
    ]
    text = "\n".join(lines) + "\n"
    if len(text) >= HEADER_SIZE:
        raise ValueError("header fields too long")
    return (text + " " * (HEADER_SIZE - 1 - len(text)) + "\n").encode("ascii")


def write_realization(r: Realization, path) -> None:
    payload = r.values.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(_format_header(r))
        f.write(payload)


def _parse_header(raw: bytes) -> dict:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError("header is not ASCII") from exc
    lines = text.rstrip(" \n").split("\n")
    if not lines or lines[0] != MAGIC:
        raise MalformedHeaderError(f"missing magic string {MAGIC!r}")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedHeaderError(f"bad header line {line!r}")
        fields[key.strip()] = value.strip()
    required = ("version", "nx", "ny", "cell_size", "range_m",
                "trend_proportion", "seed", "nonstat_type")
    missing = [k for k in required if k not in fields]
    if missing:
        raise MalformedHeaderError(f"header missing fields {missing}")
    try:
        out = {
            "version": int(fields["version"]),
            "nx": int(fields["nx"]),
            "ny": int(fields["ny"]),
            "cell_size": float(fields["cell_size"]),
            "range_m": float(fields["range_m"]),
            "trend_proportion": float(fields["trend_proportion"]),
            "seed": int(fields["seed"]),
            "nonstat_type": fields["nonstat_type"],
        }
    except ValueError as exc:
        raise MalformedHeaderError(str(exc)) from exc
    if out["version"] != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported format version {out['version']}")
    return out


def read_realization(path) -> Realization:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    h = _parse_header(raw[:HEADER_SIZE])
    payload = raw[HEADER_SIZE:]
    if len(payload) % 4:
        raise TruncatedFileError(f"{path}: payload ends mid-value ({len(payload)} bytes)")
    n = len(payload) // 4
    if n != h["nx"] * h["ny"]:
        raise DimensionMismatchError(
            f"{path}: header claims {h['nx']}x{h['ny']}={h['nx'] * h['ny']} cells, payload has {n}")
    try:
        grid = GridSpec(h["nx"], h["ny"], h["cell_size"])
        label = LabelMeta(h["range_m"], h["trend_proportion"], h["seed"], h["nonstat_type"])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from exc
    values = np.frombuffer(payload, dtype="<f4").reshape(grid.ny, grid.nx)
    return Realization(grid, values, label)


# ---------------------------------------------------------------------------
# dataset manifests

MANIFEST_NAME = "manifest.json"


@dataclass
class Manifest:
    """Index of a dataset directory; ``items`` hold file names and labels."""

    grid: GridSpec
    items: list[dict]
    root: Path = Path(".")
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    def path_of(self, item: dict) -> Path:
        return self.root / item["file"]

    def load(self, item: dict) -> Realization:
        r = read_realization(self.path_of(item))
        if r.grid != self.grid:
            raise DimensionMismatchError(f"{item['file']}: grid {r.grid} differs from manifest {self.grid}")
        return r

    def load_all(self) -> list[Realization]:
        return [self.load(it) for it in self.items]

    def subset(self, indices) -> "Manifest":
        return Manifest(self.grid, [self.items[i] for i in indices], self.root, dict(self.extra))

    def to_dict(self) -> dict:
        d = {"grid": self.grid.to_dict(), "items": self.items}
        d.update(self.extra)
        return d

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        path.write_text(text + "\n")
        return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    d = json.loads(path.read_text())
    if "grid" not in d or "items" not in d:
        raise ValueError(f"{path}: manifest needs 'grid' and 'items'")
    extra = {k: v for k, v in d.items() if k not in ("grid", "items")}
    for item in d["items"]:
        for key in ("file", "range_m", "trend_proportion", "seed", "nonstat_type"):
            if key not in item:
                raise ValueError(f"{path}: manifest item missing {key!r}")
    return Manifest(GridSpec.from_dict(d["grid"]), d["items"], path.parent, extra)


def label_from_item(item: dict) -> LabelMeta:
    return LabelMeta(item["range_m"], item["trend_proportion"], item["seed"], item["nonstat_type"])


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dir_digests(root, exclude=()) -> dict[str, str]:
    """sha256 of every regular file below ``root``, keyed by relative posix path."""
    root = Path(root)
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = Path(dirpath) / name
            rel = p.relative_to(root).as_posix()
            if rel in exclude:
                continue
            out[rel] = file_digest(p)
    return dict(sorted(out.items()))
