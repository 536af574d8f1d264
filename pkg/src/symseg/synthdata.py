"""Synthetic tumor-phantom dataset: generation, region statistics, file I/O.

Images are smooth low-frequency backgrounds plus Gaussian noise; present
samples get one brighter rotated ellipse whose rasterization defines the
mask.  Region statistics are always computed from the realized mask.

Datasets live on disk as binary PGM (P5, maxval 255) pairs
``{sample_id}_{slice}.img.pgm`` / ``{sample_id}_{slice}.mask.pgm`` plus a
``stats.csv`` with one row per sample.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = [
    "RegionStats", "SegmentationSample", "GenerateSpec", "GenerationError",
    "PgmError", "generate", "region_stats", "save_dataset", "load_dataset",
    "write_pgm", "read_pgm", "STATS_FILENAME",
]

STATS_FILENAME = "stats.csv"
_BASE_COLUMNS = ["sample_id", "slice", "present", "area", "eccentricity",
                 "laterality", "location"]


class GenerationError(ValueError):
    """Requested region geometry cannot fit the image."""


class PgmError(ValueError):
    """Malformed PGM file; message carries file name and byte offset."""


@dataclass
class RegionStats:
    present: bool
    area: int
    eccentricity: float
    laterality: str  # left | right | none
    location: str    # upper | lower | none
    extra: dict[str, str] = field(default_factory=dict)


@dataclass
class SegmentationSample:
    sample_id: str
    slice_index: int
    image: np.ndarray  # H x W floats in [0, 1]
    mask: np.ndarray   # H x W bool
    stats: RegionStats


@dataclass
class GenerateSpec:
    p_present: float = 0.7
    area_range: tuple[float, float] = (30.0, 150.0)
    ecc_range: tuple[float, float] = (0.0, 0.85)
    noise_sigma: float = 0.05
    image_size: tuple[int, int] = (32, 32)
    extra_outcome: bool = False  # add a categorical column tied to area quartiles

    def validate(self) -> None:
        if not 0.0 <= self.p_present <= 1.0:
            raise ValueError("p_present must be in [0, 1]")
        lo, hi = self.area_range
        if not 0 < lo <= hi:
            raise ValueError("area_range must satisfy 0 < lo <= hi")
        elo, ehi = self.ecc_range
        if not 0.0 <= elo <= ehi < 1.0:
            raise ValueError("ecc_range must satisfy 0 <= lo <= hi < 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if min(self.image_size) < 4:
            raise ValueError("image_size too small")


# ---------------------------------------------------------------------------
# region statistics

def region_stats(mask: np.ndarray) -> RegionStats:
    """Area, centroid-derived laterality/location, and moment eccentricity.

    Second central moments are accumulated in exact rational arithmetic and
    each pixel contributes a 1/12 self-variance term (a pixel is a unit
    square, not a point), which keeps eccentricity strictly below 1 even for
    one-pixel-wide regions and makes mirror symmetry exact.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {m.shape}")
    rows, cols = np.nonzero(m)
    area = int(rows.size)
    if area == 0:
        return RegionStats(False, 0, 0.0, "none", "none")

    h, w = m.shape
    sr = int(rows.sum())
    sc = int(cols.sum())
    laterality = "left" if Fraction(sc, area) < Fraction(w, 2) else "right"
    location = "upper" if Fraction(sr, area) < Fraction(h, 2) else "lower"

    srr = int((rows.astype(object) * rows.astype(object)).sum())
    scc = int((cols.astype(object) * cols.astype(object)).sum())
    src = int((rows.astype(object) * cols.astype(object)).sum())
    mu_rr = Fraction(srr, area) - Fraction(sr, area) ** 2 + Fraction(1, 12)
    mu_cc = Fraction(scc, area) - Fraction(sc, area) ** 2 + Fraction(1, 12)
    mu_rc = Fraction(src, area) - Fraction(sr, area) * Fraction(sc, area)

    trace = mu_rr + mu_cc
    disc = (mu_rr - mu_cc) ** 2 + 4 * mu_rc ** 2
    root = math.sqrt(float(disc))
    lam_max = (float(trace) + root) / 2.0
    lam_min = (float(trace) - root) / 2.0
    ecc = math.sqrt(max(0.0, 1.0 - lam_min / lam_max))
    return RegionStats(True, area, ecc, laterality, location)


# ---------------------------------------------------------------------------
# generation

def _smooth_field(rng: np.random.Generator, h: int, w: int, knots: int = 4) -> np.ndarray:
    """Bilinear interpolation of a coarse random grid onto the full image."""
    grid = rng.normal(size=(knots, knots))
    ys = np.linspace(0, knots - 1, h)
    xs = np.linspace(0, knots - 1, w)
    y0 = np.clip(ys.astype(int), 0, knots - 2)
    x0 = np.clip(xs.astype(int), 0, knots - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _ellipse_mask(h: int, w: int, cy: float, cx: float, a: float, b: float,
                  theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate(n: int, spec: GenerateSpec, seed: int) -> list[SegmentationSample]:
    """Generate n samples; deterministic for a fixed (n, spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    h, w = spec.image_size
    samples = []
    for i in range(n):
        image = (0.25 + 0.12 * _smooth_field(rng, h, w)
                 + rng.normal(scale=spec.noise_sigma, size=(h, w)))
        mask = np.zeros((h, w), dtype=bool)
        if rng.random() < spec.p_present:
            target_area = rng.uniform(*spec.area_range)
            ecc = rng.uniform(*spec.ecc_range)
            axis_ratio = math.sqrt(1.0 - ecc * ecc)  # b/a
            a = math.sqrt(target_area / (math.pi * axis_ratio))
            b = a * axis_ratio
            margin = a + 1.0
            if 2 * margin >= min(h, w):
                raise GenerationError(
                    f"ellipse with semi-major axis {a:.1f} cannot fit a {h}x{w} image"
                )
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            theta = rng.uniform(0.0, math.pi)
            mask = _ellipse_mask(h, w, cy, cx, a, b, theta)
            lift = rng.uniform(0.40, 0.50)
            image = image + lift * mask
        image = np.clip(image, 0.0, 1.0)
        samples.append(SegmentationSample(
            sample_id=f"s{i:04d}", slice_index=0,
            image=image, mask=mask, stats=region_stats(mask),
        ))
    if spec.extra_outcome:
        _attach_size_class(samples)
    return samples


def _attach_size_class(samples: list[SegmentationSample]) -> None:
    """Categorical outcome from area quartiles of the present samples."""
    areas = sorted(s.stats.area for s in samples if s.stats.present)
    if not areas:
        for s in samples:
            s.stats.extra["size_class"] = "none"
        return
    qs = [areas[min(len(areas) - 1, (len(areas) * q) // 4)] for q in (1, 2, 3)]
    for s in samples:
        if not s.stats.present:
            s.stats.extra["size_class"] = "none"
        else:
            rank = sum(s.stats.area > q for q in qs)
            s.stats.extra["size_class"] = f"q{rank + 1}"


# ---------------------------------------------------------------------------
# PGM I/O

def write_pgm(path: str, pixels: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255, row-major."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"PGM payload must be 2-d, got {arr.shape}")
    data = arr.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fp:
        fp.write(f"P5\n{w} {h}\n255\n".encode())
        fp.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fp:
        raw = fp.read()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            return token()
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: unexpected end of header at byte {start}")
        return raw[start:pos]

    magic = token()
    if magic != b"P5":
        raise PgmError(f"{path}: bad magic {magic!r} at byte 0")
    try:
        w = int(token())
        h = int(token())
        maxval = int(token())
    except ValueError:
        raise PgmError(f"{path}: non-numeric header field at byte {pos}") from None
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval} at byte {pos}")
    pos += 1  # single whitespace byte after maxval
    expected = w * h
    if len(raw) - pos < expected:
        raise PgmError(
            f"{path}: payload truncated at byte {len(raw)} (need {pos + expected})"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=pos).reshape(h, w)


# ---------------------------------------------------------------------------
# dataset round trip

def _extra_columns(samples: list[SegmentationSample]) -> list[str]:
    keys: set[str] = set()
    for s in samples:
        keys.update(s.stats.extra)
    return sorted(keys)


def save_dataset(path: str, samples: list[SegmentationSample]) -> None:
    os.makedirs(path, exist_ok=True)
    extras = _extra_columns(samples)
    with open(os.path.join(path, STATS_FILENAME), "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(_BASE_COLUMNS + extras)
        for s in samples:
            writer.writerow(
                [s.sample_id, s.slice_index, int(s.stats.present), s.stats.area,
                 repr(s.stats.eccentricity), s.stats.laterality, s.stats.location]
                + [s.stats.extra.get(k, "") for k in extras]
            )
    for s in samples:
        stem = os.path.join(path, f"{s.sample_id}_{s.slice_index}")
        write_pgm(f"{stem}.img.pgm",
                  np.rint(np.clip(s.image, 0.0, 1.0) * 255.0))
        write_pgm(f"{stem}.mask.pgm", s.mask.astype(np.uint8) * 255)


def read_stats_csv(path: str) -> list[dict[str, str]]:
    with open(path, newline="") as fp:
        reader = csv.DictReader(fp)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty stats CSV")
        missing = [c for c in _BASE_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: stats CSV missing columns {missing}")
        return list(reader)


def load_dataset(path: str) -> list[SegmentationSample]:
    rows = read_stats_csv(os.path.join(path, STATS_FILENAME))
    samples = []
    for row in rows:
        sid = row["sample_id"]
        sl = int(row["slice"])
        stem = os.path.join(path, f"{sid}_{sl}")
        image = read_pgm(f"{stem}.img.pgm").astype(np.float64) / 255.0
        mask = read_pgm(f"{stem}.mask.pgm") > 0
        extra = {k: v for k, v in row.items() if k not in _BASE_COLUMNS and v != ""}
        stats = RegionStats(
            present=row["present"] == "1",
            area=int(row["area"]),
            eccentricity=float(row["eccentricity"]),
            laterality=row["laterality"],
            location=row["location"],
            extra=extra,
        )
        samples.append(SegmentationSample(sid, sl, image, mask, stats))
    return samples
