"""Datasets: manifest CSVs, image decoding, and a synthetic canopy generator.

Two labeling schemas are supported:

* ``irish3``: species fractions (grass, clover, weeds) plus herbage mass
  (kg DM/ha) and sward height (cm).  Manifest columns:
  ``path,grass,clover,weeds,mass_kg_dm_ha,height_cm,split,source``.
* ``grassclover4``: fractions (grass, white_clover, red_clover, weeds)
  with no scalar targets.  Manifest columns:
  ``path,grass,white_clover,red_clover,weeds,split``.

Fraction columns sum to 1 per row.  Unlabeled collections are a
single-column ``path`` CSV.  Image paths are stored relative to the CSV
and resolved to absolute paths at load time.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

__all__ = [
    "SCHEMAS",
    "MANIFEST_COLUMNS",
    "SPLITS",
    "SOURCES",
    "ManifestError",
    "ImageError",
    "SampleRecord",
    "Manifest",
    "NormStats",
    "load_manifest",
    "load_unlabeled",
    "compute_norm_stats",
    "decode_image",
    "write_ppm",
    "synth_dataset",
]

SCHEMAS: dict[str, tuple[str, ...]] = {
    "irish3": ("grass", "clover", "weeds"),
    "grassclover4": ("grass", "white_clover", "red_clover", "weeds"),
}

MANIFEST_COLUMNS: dict[str, list[str]] = {
    "irish3": ["path", "grass", "clover", "weeds", "mass_kg_dm_ha", "height_cm", "split", "source"],
    "grassclover4": ["path", "grass", "white_clover", "red_clover", "weeds", "split"],
}

SPLITS = ("train", "val", "test")
SOURCES = ("camera", "phone", "synthetic")

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ManifestError(ValueError):
    """Malformed or inconsistent manifest CSV."""


class ImageError(ValueError):
    """Unreadable or unsupported image file."""


@dataclass
class SampleRecord:
    """One labeled image: composition fractions plus optional scalars."""

    image_path: str
    fractions: np.ndarray  # float64, one entry per schema species, sums to 1
    mass: float | None
    height: float | None
    split: str
    capture_source: str


@dataclass
class Manifest:
    schema: str
    records: list[SampleRecord]
    unlabeled_paths: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[SampleRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]


@dataclass
class NormStats:
    """Min/max target ranges computed on the training split."""

    mass_min: float
    mass_max: float
    height_min: float
    height_max: float

    def normalize_mass(self, v):
        return (np.asarray(v, dtype=np.float64) - self.mass_min) / (self.mass_max - self.mass_min)

    def denormalize_mass(self, v):
        return np.asarray(v, dtype=np.float64) * (self.mass_max - self.mass_min) + self.mass_min

    def normalize_height(self, v):
        return (np.asarray(v, dtype=np.float64) - self.height_min) / (self.height_max - self.height_min)

    def denormalize_height(self, v):
        return np.asarray(v, dtype=np.float64) * (self.height_max - self.height_min) + self.height_min


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path: str | Path, schema: str) -> Manifest:
    """Read and validate a labeled manifest CSV."""
    if schema not in SCHEMAS:
        raise ManifestError(f"unknown schema {schema!r}, expected one of {sorted(SCHEMAS)}")
    path = Path(path)
    expected = MANIFEST_COLUMNS[schema]
    species = SCHEMAS[schema]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected header {expected}") from None
        if header != expected:
            raise ManifestError(f"{path}: header {header} does not match schema {schema!r} columns {expected}")
        records: list[SampleRecord] = []
        seen: dict[str, set[str]] = {s: set() for s in SPLITS}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise ManifestError(f"{path}: line {lineno}: expected {len(expected)} fields, got {len(row)}")
            rec = dict(zip(expected, row))
            try:
                fractions = np.array([float(rec[s]) for s in species], dtype=np.float64)
            except ValueError:
                raise ManifestError(f"{path}: line {lineno}: non-numeric fraction") from None
            if (fractions < 0).any():
                raise ManifestError(f"{path}: line {lineno}: negative fraction")
            total = float(fractions.sum())
            if abs(total - 1.0) > 1e-4:
                raise ManifestError(f"{path}: line {lineno}: fractions sum to {total!r}, expected 1")
            mass = height = None
            if schema == "irish3":
                try:
                    mass = float(rec["mass_kg_dm_ha"])
                    height = float(rec["height_cm"])
                except ValueError:
                    raise ManifestError(f"{path}: line {lineno}: non-numeric mass or height") from None
                if mass < 0 or height < 0:
                    raise ManifestError(f"{path}: line {lineno}: negative mass or height")
            split = rec["split"]
            if split not in SPLITS:
                raise ManifestError(f"{path}: line {lineno}: unknown split {split!r}")
            source = rec.get("source", "camera")
            if source not in SOURCES:
                raise ManifestError(f"{path}: line {lineno}: unknown source {source!r}")
            if rec["path"] in seen[split]:
                raise ManifestError(f"{path}: line {lineno}: duplicate path {rec['path']!r} in split {split!r}")
            seen[split].add(rec["path"])
            records.append(SampleRecord(
                image_path=str((path.parent / rec["path"]).resolve()),
                fractions=fractions,
                mass=mass,
                height=height,
                split=split,
                capture_source=source,
            ))
    return Manifest(schema=schema, records=records)


def load_unlabeled(path: str | Path) -> list[str]:
    """Read a single-column ``path`` CSV of unlabeled images."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected header ['path']") from None
        if header != ["path"]:
            raise ManifestError(f"{path}: header {header} does not match ['path']")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 1 or not row[0]:
                raise ManifestError(f"{path}: line {lineno}: expected a single path field")
            out.append(str((path.parent / row[0]).resolve()))
    return out


def compute_norm_stats(manifest: Manifest) -> NormStats:
    """Min/max mass and height over the training split."""
    train = manifest.split("train")
    if not train:
        raise ManifestError("cannot compute normalization stats: empty train split")
    if any(r.mass is None or r.height is None for r in train):
        raise ManifestError("cannot compute normalization stats: missing mass or height targets")
    masses = [r.mass for r in train]
    heights = [r.height for r in train]
    stats = NormStats(mass_min=min(masses), mass_max=max(masses),
                      height_min=min(heights), height_max=max(heights))
    if stats.mass_max <= stats.mass_min:
        raise ManifestError(f"degenerate mass range [{stats.mass_min}, {stats.mass_max}] in train split")
    if stats.height_max <= stats.height_min:
        raise ManifestError(f"degenerate height range [{stats.height_min}, {stats.height_max}] in train split")
    return stats


# ---------------------------------------------------------------------------
# images


def _read_ppm(raw: bytes, path: str) -> np.ndarray:
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos:pos + 1]
            if ch in b" \t\r\n":
                pos += 1
            elif ch == b"#":
                nl = raw.find(b"\n", pos)
                if nl == -1:
                    raise ImageError(f"{path}: truncated PPM header")
                pos = nl + 1
            else:
                break
        start = pos
        while pos < len(raw) and raw[pos:pos + 1] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise ImageError(f"{path}: truncated PPM header")
        return raw[start:pos]

    if token() != b"P6":
        raise ImageError(f"{path}: not a binary PPM")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise ImageError(f"{path}: malformed PPM header") from None
    if w <= 0 or h <= 0:
        raise ImageError(f"{path}: invalid PPM dimensions {w}x{h}")
    if maxval != 255:
        raise ImageError(f"{path}: unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace byte separating header from pixel data
    need = w * h * 3
    pixels = raw[pos:pos + need]
    if len(pixels) < need:
        raise ImageError(f"{path}: truncated PPM pixel data ({len(pixels)} of {need} bytes)")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def decode_image(path: str | Path) -> np.ndarray:
    """Decode a PPM or PNG file to a CHW float32 array in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"P6":
        arr = _read_ppm(raw, str(path))
    elif raw[:8] == _PNG_SIGNATURE:
        from PIL import Image

        try:
            with Image.open(io.BytesIO(raw)) as im:
                arr = np.asarray(im.convert("RGB"))
        except Exception as exc:
            raise ImageError(f"{path}: broken PNG ({exc})") from None
    else:
        raise ImageError(f"{path}: unsupported image format")
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a CHW float array in [0, 1] as a binary PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm: expected CHW RGB image, got shape {image.shape}")
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# synthetic canopy generator


def _box_blur(a: np.ndarray, r: int) -> np.ndarray:
    w = 2 * r + 1
    for axis in (0, 1):
        pad = [(r + 1, r) if ax == axis else (0, 0) for ax in range(2)]
        c = np.cumsum(np.pad(a, pad, mode="edge"), axis=axis)
        n = a.shape[axis]
        hi = np.take(c, np.arange(w, w + n), axis=axis)
        lo = np.take(c, np.arange(0, n), axis=axis)
        a = (hi - lo) / w
    return a


# Vegetation classes are painted over the soil in a fixed order; later
# classes overwrite earlier ones, so pixel counts stay exact.
_CLASS_COLORS = {
    "irish3": {
        0: (0.34, 0.23, 0.13),  # soil
        1: (0.13, 0.42, 0.10),  # grass
        2: (0.78, 0.83, 0.70),  # clover
        3: (0.45, 0.12, 0.10),  # weeds
    },
    "grassclover4": {
        0: (0.34, 0.23, 0.13),
        1: (0.13, 0.42, 0.10),
        2: (0.80, 0.84, 0.72),  # white clover
        3: (0.72, 0.32, 0.42),  # red clover
        4: (0.45, 0.12, 0.10),  # weeds
    },
}

_BLOB_COUNTS = {
    "irish3": ((2, 7), (3, 5)),  # (class, max blobs + 1) pairs drawn in order
    "grassclover4": ((2, 5), (3, 5), (4, 4)),
}


def _render_canopy(rng: Rng, size: int, schema: str) -> tuple[np.ndarray, np.ndarray, float]:
    """One random canopy image.

    Returns (CHW float image, species fractions, vegetation density).
    Fractions are exact pixel counts over vegetation classes, so they sum
    to 1 by construction.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.int8)

    cover = rng.uniform(0.25, 0.95)
    blur = max(1, size // 8)
    fld = _box_blur(rng.uniform(size=(size, size)), blur)
    fld = _box_blur(fld, max(1, blur // 2))
    mask[fld >= np.quantile(fld, 1.0 - cover)] = 1

    for cls, hi in _BLOB_COUNTS[schema]:
        for _ in range(int(rng.integers(0, hi))):
            cx, cy = rng.uniform(0.0, size, size=2)
            ra = rng.uniform(size * 0.05, size * 0.16)
            rb = rng.uniform(size * 0.05, size * 0.16)
            th = rng.uniform(0.0, np.pi)
            u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
            mask[(u / ra) ** 2 + (v / rb) ** 2 <= 1.0] = cls

    lum = rng.uniform(-1.0, 1.0, size=(size, size))
    fx, fy = rng.uniform(2.0, 6.0, size=2)
    ph = rng.uniform(0.0, 2.0 * np.pi)
    stripe = np.sin(2.0 * np.pi * (fx * xx + fy * yy) / size + ph)

    img = np.zeros((3, size, size), dtype=np.float64)
    for cls, color in _CLASS_COLORS[schema].items():
        sel = mask == cls
        if not sel.any():
            continue
        tex = 0.05 * lum
        if cls == 1:
            tex = tex + 0.05 * stripe
        for ch, base in enumerate(color):
            img[ch][sel] = base + tex[sel]
    img = np.clip(img + rng.uniform(-0.02, 0.02, size=(3, size, size)), 0.0, 1.0)

    species_classes = range(1, len(SCHEMAS[schema]) + 1)
    counts = np.array([(mask == c).sum() for c in species_classes], dtype=np.float64)
    veg = counts.sum()
    fractions = counts / veg
    density = float(veg) / (size * size)
    return img.astype(np.float32), fractions, density


def synth_dataset(n_labeled: int, n_unlabeled: int, size: int, seed: int,
                  out_dir: str | Path, n_val: int = 0, n_test: int = 0,
                  schema: str = "irish3") -> Manifest:
    """Generate a labeled + unlabeled synthetic dataset under `out_dir`.

    Writes ``images/*.ppm``, ``manifest.csv`` and ``unlabeled.csv``; returns
    the loaded manifest.  Every image derives from a per-index child stream
    of `seed`, so regeneration is byte-identical.
    """
    if schema not in SCHEMAS:
        raise ManifestError(f"unknown schema {schema!r}, expected one of {sorted(SCHEMAS)}")
    if min(n_labeled, n_unlabeled, n_val, n_test) < 0:
        raise ValueError("image counts must be non-negative")
    if size < 16:
        raise ValueError(f"size must be at least 16, got {size}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    root = Rng(seed)

    rows: list[list[str]] = []
    splits = ["train"] * n_labeled + ["val"] * n_val + ["test"] * n_test
    for idx, split in enumerate(splits):
        img, fractions, density = _render_canopy(root.child(1, idx), size, schema)
        rel = f"images/labeled_{idx:05d}.ppm"
        write_ppm(out_dir / rel, img)
        frac_cols = [repr(float(f)) for f in fractions]
        if schema == "irish3":
            r = root.child(1, idx, 1)
            mass = 2500.0 * density * (1.0 + 0.15 * r.uniform(-1.0, 1.0))
            height = 2.0 + 18.0 * density * (1.0 + 0.10 * r.uniform(-1.0, 1.0))
            rows.append([rel, *frac_cols, repr(mass), repr(height), split, "synthetic"])
        else:
            rows.append([rel, *frac_cols, split])

    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS[schema])
        writer.writerows(rows)

    with open(out_dir / "unlabeled.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path"])
        for idx in range(n_unlabeled):
            img, _, _ = _render_canopy(root.child(2, idx), size, schema)
            rel = f"images/unlabeled_{idx:05d}.ppm"
            write_ppm(out_dir / rel, img)
            writer.writerow([rel])

    manifest = load_manifest(out_dir / "manifest.csv", schema)
    manifest.unlabeled_paths = load_unlabeled(out_dir / "unlabeled.csv")
    return manifest
