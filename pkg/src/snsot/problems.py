"""Instance generators and file formats.

Problem files are a JSON header ``<name>.otp.json`` next to a raw cost
matrix ``<name>.otp.bin`` (little-endian float64, row major).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Problem

PROBLEM_FORMAT = "f64le-rowmajor-v1"
DEFAULT_SMOOTHING = 1e-6


class ParseError(ValueError):
    """Malformed input file; the message names the offending location."""


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Non-negative intensities; ``intensities[i, j]`` is row ``i``, column ``j``."""

    intensities: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.intensities, dtype=np.float64)
        if a.ndim != 2 or a.size == 0:
            raise ValueError("image must be a non-empty 2-D grid")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("image intensities must be finite and non-negative")
        if not np.any(a > 0):
            raise ValueError("image has no positive intensity")
        object.__setattr__(self, "intensities", a)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]


def gen_random_assignment(n: int, seed: int, eta: float = 1.0) -> Problem:
    """Costs i.i.d. ``Unif[0, 1)`` from ``numpy``'s PCG64; uniform marginals."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    C = rng.random((n, n))
    u = np.full(n, 1.0 / n)
    return Problem(C, u, u.copy(), eta)


def grid_points(width: int, height: int) -> np.ndarray:
    """Pixel ``(i, j)`` -> ``(i/s, j/s)``, ``s = max(width, height)``; ``i`` slowest."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be >= 1")
    s = max(width, height)
    i, j = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.column_stack([i.ravel(), j.ravel()]) / s


def grid_cost(width: int, height: int, metric: str = "l2_squared") -> np.ndarray:
    pts = grid_points(width, height)
    diff = pts[:, None, :] - pts[None, :, :]
    if metric == "l1":
        return np.abs(diff).sum(axis=2)
    if metric in ("l2_squared", "l2sq"):
        return (diff ** 2).sum(axis=2)
    raise ValueError(f"unknown metric {metric!r}")


def image_to_marginal(img: ImageGrid, smoothing_eps: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """Row-major intensity vector plus ``eps/(w h)`` per pixel, normalized to 1."""
    if smoothing_eps < 0:
        raise ValueError("smoothing_eps must be non-negative")
    a = img.intensities.ravel()
    a = a / a.sum() + smoothing_eps / a.size
    return a / a.sum()


def image_pair_problem(a: ImageGrid, b: ImageGrid, metric: str, eta: float,
                       smoothing_eps: float = DEFAULT_SMOOTHING) -> Problem:
    if a.intensities.shape != b.intensities.shape:
        raise ValueError(f"image shapes differ: {a.intensities.shape} vs {b.intensities.shape}")
    C = grid_cost(a.width, a.height, metric)
    return Problem(C, image_to_marginal(a, smoothing_eps), image_to_marginal(b, smoothing_eps), eta)


def gaussian_blobs(width: int, height: int, centers, sigma: float) -> ImageGrid:
    """Sum of isotropic Gaussian bumps; centers are in pixel units ``(row, col)``."""
    i, j = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    img = np.zeros((height, width))
    for ci, cj in centers:
        img += np.exp(-((i - ci) ** 2 + (j - cj) ** 2) / (2 * sigma ** 2))
    return ImageGrid(img)


def rank_one_cost_problem(n: int, seed: int, eta: float = 1.0) -> Problem:
    """``c_ij = a_i + b_j``: every feasible plan costs the same."""
    rng = np.random.default_rng(seed)
    a, b = rng.random(n), rng.random(n)
    r = rng.random(n) + 0.5
    c = rng.random(n) + 0.5
    return Problem(a[:, None] + b[None, :], r / r.sum(), c / c.sum(), eta)


# ---------------------------------------------------------------------------
# image readers


def _tokens(path: Path):
    """Whitespace tokens of a PGM file with ``#`` comments removed, with line numbers."""
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0]
        for tok in line.split():
            yield lineno, tok


def _read_pgm(path: Path) -> ImageGrid:
    toks = _tokens(path)
    try:
        lineno, magic = next(toks)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    if magic != "P2":
        raise ParseError(f"{path}:{lineno}: expected magic 'P2', got {magic!r}")
    header = []
    for name in ("width", "height", "maxval"):
        try:
            lineno, tok = next(toks)
        except StopIteration:
            raise ParseError(f"{path}: header ends before {name}") from None
        try:
            val = int(tok)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: {name} {tok!r} is not an integer") from None
        if val < 1:
            raise ParseError(f"{path}:{lineno}: {name} must be positive, got {val}")
        header.append(val)
    width, height, maxval = header
    values = []
    for lineno, tok in toks:
        try:
            v = int(tok)
        except ValueError:
            raise ParseError(
                f"{path}:{lineno}: pixel {len(values)} value {tok!r} is not an integer"
            ) from None
        if not 0 <= v <= maxval:
            raise ParseError(f"{path}:{lineno}: pixel {len(values)} value {v} outside [0, {maxval}]")
        values.append(v)
    if len(values) != width * height:
        raise ParseError(f"{path}: expected {width * height} pixels, found {len(values)}")
    return ImageGrid(np.array(values, dtype=np.float64).reshape(height, width))


def _read_csv_grid(path: Path) -> ImageGrid:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}:{col}: {cell!r} is not a number") from None
                if not np.isfinite(v) or v < 0:
                    raise ParseError(f"{path}:{lineno}:{col}: value {cell.strip()} must be finite and >= 0")
                vals.append(v)
            if rows and len(vals) != len(rows[0]):
                raise ParseError(
                    f"{path}:{lineno}: row has {len(vals)} columns, expected {len(rows[0])}"
                )
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return ImageGrid(np.array(rows))


def load_image(path) -> ImageGrid:
    """Read an ASCII PGM (``P2``) or comma-separated grid."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(2)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    if head == b"P2":
        return _read_pgm(path)
    return _read_csv_grid(path)


# ---------------------------------------------------------------------------
# problem files


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".otp.json", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def save_problem(problem: Problem, path) -> Path:
    """Write ``<name>.otp.json`` and ``<name>.otp.bin``; returns the header path."""
    path = Path(path)
    stem = _stem(path)
    header_path = path.with_name(stem + ".otp.json")
    bin_path = path.with_name(stem + ".otp.bin")
    n = problem.n
    header = {
        "n": n,
        "eta": problem.eta,
        "cost": bin_path.name,
        "r": [float(v) for v in problem.r],
        "c": [float(v) for v in problem.c],
        "format": PROBLEM_FORMAT,
    }
    problem.cost.astype("<f8", copy=False).tofile(bin_path)
    tmp = header_path.with_name(header_path.name + ".tmp")
    tmp.write_text(json.dumps(header, indent=1) + "\n")
    os.replace(tmp, header_path)
    return header_path


def load_problem(path) -> Problem:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON header: {exc.msg}") from None
    for key in ("n", "eta", "cost", "r", "c", "format"):
        if key not in header:
            raise ParseError(f"{path}: header is missing {key!r}")
    if header["format"] != PROBLEM_FORMAT:
        raise ParseError(f"{path}: unsupported format {header['format']!r}")
    n = header["n"]
    if not isinstance(n, int) or n < 1:
        raise ParseError(f"{path}: 'n' must be a positive integer")
    r = np.array(header["r"], dtype=np.float64)
    c = np.array(header["c"], dtype=np.float64)
    if r.shape != (n,) or c.shape != (n,):
        raise ParseError(f"{path}: marginals have lengths {r.size}, {c.size}; expected {n}")
    bin_path = path.with_name(header["cost"])
    try:
        raw = np.fromfile(bin_path, dtype="<f8")
    except OSError as exc:
        raise OSError(f"cannot read {bin_path}: {exc.strerror}") from exc
    if raw.size != n * n or bin_path.stat().st_size != 8 * n * n:
        raise ParseError(f"{bin_path}: expected {8 * n * n} bytes, found {bin_path.stat().st_size}")
    return Problem(raw.astype(np.float64).reshape(n, n), r, c, float(header["eta"]))
