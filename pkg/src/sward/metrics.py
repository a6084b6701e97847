"""Evaluation metrics and report emission.

Composition error is RMSE in percentage points, one column per species
(plus a combined any-clover column for the 4-species schema) and their
mean.  Mass metrics: HRMSE is the RMSE of herbage mass (kg DM/ha) for the
total and for per-species masses derived as total * fraction, with the
average taken over the species columns only; HRE is the mean (optionally
median) of predicted/reference total-mass ratios.  HE is the RMSE of sward
height in cm.  All metric arithmetic runs in float64.

Reports serialize to JSON and a markdown table carrying full-precision
values, plus a per-image prediction CSV (composition in percent).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import resize_bilinear
from .data import Manifest, SampleRecord, SCHEMAS, decode_image
from .model import Checkpoint, encode, predict_composition, predict_scalars, denormalize

__all__ = [
    "EmptySelectionError",
    "CompatibilityError",
    "Prediction",
    "MetricsReport",
    "species_mass",
    "composition_rmse",
    "hrmse",
    "hre",
    "height_error",
    "predict_paths",
    "predict_records",
    "select_records",
    "score_predictions",
    "check_compatible",
    "evaluate",
    "dump_predictions_csv",
]


class EmptySelectionError(ValueError):
    """A split/source filter matched no records."""


class CompatibilityError(ValueError):
    """Checkpoint and requested schema do not fit together."""


@dataclass
class Prediction:
    """Model outputs for one image, in label units."""

    path: str
    fractions: np.ndarray  # float64, sums to 1 (within head precision)
    total_mass: float | None = None
    height: float | None = None


def _check_pairs(preds: Sequence[Prediction], gts: Sequence[SampleRecord], n_species: int) -> None:
    if len(preds) == 0:
        raise ValueError("no predictions to score")
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} references")
    for p in preds:
        if len(p.fractions) != n_species:
            raise ValueError(f"prediction for {p.path!r} has {len(p.fractions)} species, expected {n_species}")


def species_mass(fractions: np.ndarray, total_mass: float) -> np.ndarray:
    """Per-species herbage mass implied by a composition and a total."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if (fractions < 0).any():
        raise ValueError("fractions must be non-negative")
    return fractions * float(total_mass)


def composition_rmse(preds: Sequence[Prediction], gts: Sequence[SampleRecord],
                     schema: str) -> dict[str, float]:
    """Per-species RMSE in percentage points, plus the column mean.

    For `grassclover4` an `any_clover` column (white + red summed before
    scoring) joins the average alongside the individual species.
    """
    species = SCHEMAS[schema]
    _check_pairs(preds, gts, len(species))
    p = np.stack([np.asarray(q.fractions, dtype=np.float64) for q in preds]) * 100.0
    g = np.stack([r.fractions for r in gts]) * 100.0
    cols: dict[str, tuple[np.ndarray, np.ndarray]] = {
        name: (p[:, j], g[:, j]) for j, name in enumerate(species)}
    if schema == "grassclover4":
        merged: dict[str, tuple[np.ndarray, np.ndarray]] = {"grass": cols["grass"]}
        merged["any_clover"] = (p[:, 1] + p[:, 2], g[:, 1] + g[:, 2])
        merged["white_clover"] = cols["white_clover"]
        merged["red_clover"] = cols["red_clover"]
        merged["weeds"] = cols["weeds"]
        cols = merged
    out = {name: float(np.sqrt(np.mean((pv - gv) ** 2))) for name, (pv, gv) in cols.items()}
    out["avg"] = float(np.mean([out[name] for name in cols]))
    return out


def _mass_pairs(preds: Sequence[Prediction], gts: Sequence[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    if any(p.total_mass is None for p in preds):
        raise ValueError("predictions are missing total mass")
    if any(r.mass is None for r in gts):
        raise ValueError("references are missing total mass")
    return (np.array([p.total_mass for p in preds], dtype=np.float64),
            np.array([r.mass for r in gts], dtype=np.float64))


def hrmse(preds: Sequence[Prediction], gts: Sequence[SampleRecord], schema: str) -> dict[str, float]:
    """Herbage-mass RMSE: total, per species, and the species mean."""
    species = SCHEMAS[schema]
    _check_pairs(preds, gts, len(species))
    pm, gm = _mass_pairs(preds, gts)
    out = {"total": float(np.sqrt(np.mean((pm - gm) ** 2)))}
    for j, name in enumerate(species):
        pj = np.array([species_mass(p.fractions, p.total_mass)[j] for p in preds])
        gj = np.array([species_mass(r.fractions, r.mass)[j] for r in gts])
        out[name] = float(np.sqrt(np.mean((pj - gj) ** 2)))
    out["avg"] = float(np.mean([out[name] for name in species]))
    return out


def hre(preds: Sequence[Prediction], gts: Sequence[SampleRecord],
        aggregate: str = "mean") -> float:
    """Aggregate of predicted/reference total-mass ratios."""
    if aggregate not in ("mean", "median"):
        raise ValueError(f"aggregate must be 'mean' or 'median', got {aggregate!r}")
    if len(preds) != len(gts) or len(preds) == 0:
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} references")
    pm, gm = _mass_pairs(preds, gts)
    if (gm <= 0).any():
        raise ValueError("reference total mass must be positive for HRE")
    ratios = pm / gm
    return float(np.mean(ratios) if aggregate == "mean" else np.median(ratios))


def height_error(preds: Sequence[Prediction], gts: Sequence[SampleRecord]) -> float:
    """RMSE of sward height in cm."""
    if len(preds) != len(gts) or len(preds) == 0:
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} references")
    if any(p.height is None for p in preds):
        raise ValueError("predictions are missing height")
    if any(r.height is None for r in gts):
        raise ValueError("references are missing height")
    ph = np.array([p.height for p in preds], dtype=np.float64)
    gh = np.array([r.height for r in gts], dtype=np.float64)
    return float(np.sqrt(np.mean((ph - gh) ** 2)))


# ---------------------------------------------------------------------------
# model-driven evaluation


def predict_paths(ckpt: Checkpoint, paths: Sequence[str], batch_size: int = 64) -> list[Prediction]:
    """Run the model over image files; scalars only when the head and stats exist."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    s = ckpt.config.input_size
    with_scalars = "scalar.weight" in ckpt.params and ckpt.norm_stats is not None
    out: list[Prediction] = []
    for start in range(0, len(paths), batch_size):
        chunk = paths[start:start + batch_size]
        images = []
        for p in chunk:
            img = decode_image(p)
            if img.shape[0] != ckpt.config.input_channels:
                raise ValueError(f"{p}: has {img.shape[0]} channels, model expects {ckpt.config.input_channels}")
            images.append(img if img.shape[1:] == (s, s) else resize_bilinear(img, s, s))
        emb = encode(ckpt, np.stack(images))
        fractions = predict_composition(ckpt, emb).astype(np.float64) / 100.0
        if with_scalars:
            mass, height = denormalize(ckpt, predict_scalars(ckpt, emb))
        for i, p in enumerate(chunk):
            out.append(Prediction(
                path=p,
                fractions=fractions[i],
                total_mass=float(mass[i]) if with_scalars else None,
                height=float(height[i]) if with_scalars else None,
            ))
    return out


def predict_records(ckpt: Checkpoint, records: Sequence[SampleRecord],
                    batch_size: int = 64) -> list[Prediction]:
    """`predict_paths` over the image files of manifest records."""
    return predict_paths(ckpt, [r.image_path for r in records], batch_size=batch_size)


@dataclass
class MetricsReport:
    schema: str
    split: str
    source_filter: str | None
    n_images: int
    composition: dict[str, float]
    hrmse: dict[str, float] | None = None
    hre: float | None = None
    height_rmse: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "schema": self.schema,
            "split": self.split,
            "source_filter": self.source_filter,
            "n_images": self.n_images,
            "composition": self.composition,
            "hrmse": self.hrmse,
            "hre": self.hre,
            "height_rmse": self.height_rmse,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    def to_markdown(self) -> str:
        """One header + one value row; cells keep full float precision."""
        lines = [
            "# Evaluation report",
            "",
            f"- schema: {self.schema}",
            f"- split: {self.split}",
            f"- source: {self.source_filter or 'all'}",
            f"- images: {self.n_images}",
            "",
        ]
        headers: list[str] = []
        values: list[str] = []
        if self.hrmse is not None:
            for key, label in (("total", "HRMSE Total"), ("grass", "HRMSE Grass"),
                               ("clover", "HRMSE Clover"), ("weeds", "HRMSE Weeds"),
                               ("avg", "HRMSE Avg.")):
                headers.append(label)
                values.append(repr(self.hrmse[key]))
        if self.hre is not None:
            headers.append("HRE")
            values.append(repr(self.hre))
        comp_labels = {
            "grass": "Grass", "clover": "Clover", "weeds": "Weeds",
            "any_clover": "Any clover", "white_clover": "White clover",
            "red_clover": "Red clover", "avg": "Avg.",
        }
        mass_block = self.hrmse is not None or self.hre is not None or self.height_rmse is not None
        order = [k for k in ("grass", "any_clover", "white_clover", "red_clover", "clover", "weeds", "avg")
                 if k in self.composition]
        for key in order:
            label = comp_labels[key]
            headers.append(f"RMSE {label}" if mass_block else label)
            values.append(repr(self.composition[key]))
        if self.height_rmse is not None:
            headers.append("HE")
            values.append(repr(self.height_rmse))
        row = "| " + " | ".join(headers) + " |"
        sep = "| " + " | ".join("---" for _ in headers) + " |"
        val = "| " + " | ".join(values) + " |"
        lines += [row, sep, val, ""]
        return "\n".join(lines)

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        """Write `<stem>.json` and `<stem>.md`; returns both paths."""
        stem = Path(stem)
        json_path = stem.with_suffix(".json")
        md_path = stem.with_suffix(".md")
        json_path.write_text(self.to_json())
        md_path.write_text(self.to_markdown())
        return json_path, md_path


def select_records(manifest: Manifest, split: str,
                   source_filter: str | None = None) -> list[SampleRecord]:
    """Records of one split, optionally narrowed to one capture source."""
    records = manifest.split(split)
    if source_filter is not None:
        records = [r for r in records if r.capture_source == source_filter]
    if not records:
        raise EmptySelectionError(
            f"no records in split {split!r}" + (f" with source {source_filter!r}" if source_filter else ""))
    return records


def score_predictions(preds: Sequence[Prediction], records: Sequence[SampleRecord],
                      schema: str, split: str, source_filter: str | None = None) -> MetricsReport:
    """Assemble the report for already-computed predictions.

    Mass and height blocks appear only when every prediction and reference
    carries the corresponding value.
    """
    report = MetricsReport(
        schema=schema,
        split=split,
        source_filter=source_filter,
        n_images=len(records),
        composition=composition_rmse(preds, records, schema),
    )
    if all(p.total_mass is not None for p in preds) and all(r.mass is not None for r in records):
        report.hrmse = hrmse(preds, records, schema)
        report.hre = hre(preds, records)
    if all(p.height is not None for p in preds) and all(r.height is not None for r in records):
        report.height_rmse = height_error(preds, records)
    return report


def check_compatible(ckpt: Checkpoint, schema: str) -> None:
    if len(SCHEMAS[schema]) != ckpt.config.n_species:
        raise CompatibilityError(
            f"checkpoint predicts {ckpt.config.n_species} species, schema {schema!r} "
            f"has {len(SCHEMAS[schema])}")


def evaluate(ckpt: Checkpoint, manifest: Manifest, split: str,
             source_filter: str | None = None, batch_size: int = 64) -> MetricsReport:
    """Score a checkpoint on one manifest split (optionally one source)."""
    check_compatible(ckpt, manifest.schema)
    records = select_records(manifest, split, source_filter)
    preds = predict_records(ckpt, records, batch_size=batch_size)
    return score_predictions(preds, records, manifest.schema, split, source_filter)


def dump_predictions_csv(preds: Sequence[Prediction], path: str | Path, schema: str) -> None:
    """Per-image predictions; composition in percent, mass/height in label units."""
    species = list(SCHEMAS[schema])
    scalar_cols = ["total_mass", "height"] if schema == "irish3" else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", *species, *scalar_cols])
        for p in preds:
            row = [p.path] + [repr(float(f) * 100.0) for f in p.fractions]
            if scalar_cols:
                row.append("" if p.total_mass is None else repr(p.total_mass))
                row.append("" if p.height is None else repr(p.height))
            writer.writerow(row)
