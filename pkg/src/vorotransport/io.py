"""File formats: density rasters, site lists, weights, assignments and label images.

Raster convention: in memory, grid row 0 is the lowest ``y``. Image files
(PGM/PPM) store the top row first, so readers and writers flip rows. Density
CSV files are stored in memory order (first line = lowest ``y``).
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from .diagram import Assignment, Site, make_sites
from .measure import AtomicMeasure, from_grid, normalize

FORMATS = ("csv", "pgm", "atoms")


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def _floats(cells, where):
    try:
        return [float(c) for c in cells]
    except ValueError:
        raise InputError(f"{where}: non-numeric value") from None


def read_density_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append(_floats(row, f"{path}:{lineno}"))
    if not rows:
        raise InputError(f"{path}: no density rows")
    if len({len(r) for r in rows}) != 1:
        raise InputError(f"{path}: rows have unequal length")
    return np.array(rows)


def _pgm_tokens(text: str):
    for line in text.splitlines():
        yield from line.split("#", 1)[0].split()


def read_pgm(path) -> np.ndarray:
    """ASCII P2 image as densities ``value / maxval``, flipped so row 0 is the lowest ``y``."""
    tokens = list(_pgm_tokens(Path(path).read_text()))
    if not tokens or tokens[0] != "P2":
        raise InputError(f"{path}: not an ASCII (P2) PGM file")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
        pixels = [int(t) for t in tokens[4:]]
    except ValueError:
        raise InputError(f"{path}: malformed PGM header or pixel data") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise InputError(f"{path}: bad PGM dimensions")
    if len(pixels) != width * height:
        raise InputError(f"{path}: expected {width * height} pixels, found {len(pixels)}")
    img = np.array(pixels, dtype=float).reshape(height, width)
    if np.any(img < 0) or np.any(img > maxval):
        raise InputError(f"{path}: pixel outside [0, maxval]")
    return img[::-1] / maxval


def read_atoms_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Scattered atoms, header ``x,y,mass``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y", "mass"} <= {f.strip() for f in reader.fieldnames}:
            raise InputError(f"{path}: expected header x,y,mass")
        rows = [_floats([r["x"], r["y"], r["mass"]], f"{path}:{i + 2}") for i, r in enumerate(reader)]
    if not rows:
        raise InputError(f"{path}: no atoms")
    arr = np.array(rows)
    return arr[:, :2], arr[:, 2]


def load_measure(path, fmt: str | None = None, cell_size: float | None = None,
                 origin=(0.0, 0.0), normalized: bool = False) -> AtomicMeasure:
    """Read a density file. Grid cells default to ``1 / max(rows, cols)`` so the raster spans the unit square."""
    fmt = fmt or infer_format(path)
    if fmt == "atoms":
        pos, mass = read_atoms_csv(path)
        m = AtomicMeasure(pos, mass)
    elif fmt in ("csv", "pgm"):
        grid = read_density_csv(path) if fmt == "csv" else read_pgm(path)
        h = cell_size if cell_size is not None else 1.0 / max(grid.shape)
        m = from_grid(grid, h, origin)
    else:
        raise InputError(f"unknown density format {fmt!r}")
    return normalize(m) if normalized else m


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    return "pgm" if suffix == ".pgm" else "csv"


def read_sites_csv(path, normalized: bool = False, total_mass: float | None = None) -> list[Site]:
    """Sites from a CSV with header ``x,y,demand``; ``normalized`` rescales demands to sum to 1."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y", "demand"} <= {f.strip() for f in reader.fieldnames}:
            raise InputError(f"{path}: expected header x,y,demand")
        rows = [_floats([r["x"], r["y"], r["demand"]], f"{path}:{i + 2}") for i, r in enumerate(reader)]
    if not rows:
        raise InputError(f"{path}: no sites")
    arr = np.array(rows)
    demands = arr[:, 2]
    if np.any(~np.isfinite(arr)) or np.any(demands <= 0):
        raise InputError(f"{path}: demands must be positive and finite")
    if normalized:
        demands = demands / math.fsum(demands)
    if total_mass is not None and abs(math.fsum(demands) - total_mass) > 1e-9 * max(1.0, total_mass):
        raise InputError(
            f"demands sum to {math.fsum(demands)!r} but the measure has mass {total_mass!r}; "
            "pass --normalize to scale both to 1")
    try:
        return make_sites(arr[:, :2], demands)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def write_weights(path, w) -> None:
    write_json(path, [float(x) for x in w])


def read_weights(path, n: int) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None
    if isinstance(data, dict):
        data = data.get("weights")
    if not isinstance(data, list) or len(data) != n:
        raise InputError(f"{path}: expected a list of {n} weights")
    w = np.array(_floats(data, str(path)))
    if not np.all(np.isfinite(w)):
        raise InputError(f"{path}: weights must be finite")
    return w


def write_assignment_csv(path, a: Assignment, m: AtomicMeasure) -> None:
    """One row per (atom, site) share."""
    atoms, sites = np.nonzero(a.fractions > 0)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["atom_index", "x", "y", "mass", "site_index", "fraction"])
        for k, i in zip(atoms.tolist(), sites.tolist()):
            x, y = m.positions[k][:2]
            out.writerow([k, repr(float(x)), repr(float(y)), repr(float(m.masses[k])), i,
                          repr(float(a.fractions[k, i]))])


def read_assignment_csv(path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["atom_index"]), int(r["site_index"]), float(r["fraction"])) for r in csv.DictReader(fh)]


def write_pgm(path, image: np.ndarray, maxval: int) -> None:
    """ASCII P2; ``image`` is in display order (top row first)."""
    h, w = image.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in image]
    Path(path).write_text("\n".join(lines) + "\n")


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6; ``rgb`` is ``(rows, cols, 3)`` uint8 in display order."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if head is None:
        raise InputError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in head.groups())
    if maxval != 255:
        raise InputError(f"{path}: only maxval 255 is supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=head.end()).reshape(h, w, 3)
