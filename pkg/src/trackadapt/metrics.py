"""Reconstruction quality and coverage metrics for sparse SfM models."""
from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .colmap_model import NO_POINT, SparseModel
from .geometry import reprojection_errors

LINK_RADIUS = 0.5
SPREAD_GRID = 16
SPECULAR_LEVEL = 180
MAE_BEST_K = 10_000

QUALITY_ROWS = [
    ("precision", "Precision (%points)", "pct"),
    ("reconstructed_images", "Reconstr. (%imgs)", "pct"),
    ("points3d", "3D points", "int"),
    ("track_length", "Track-length (imgs)", "f2"),
    ("mae", "MAE (pixels)", "f2"),
    ("mae_10k", "MAE 10K (pixels)", "f2"),
    ("spread", "Spread (%cells)", "pct"),
    ("specular", "Specular (%points)", "pct"),
]
COVERAGE_ROWS = [
    ("reconstructed", "Reconstructed (images)", "f1"),
    ("reconstructed_pct", "Reconstructed % (% images)", "pct"),
    ("reconstructions", "Reconstructions", "f1"),
    ("average_size", "Average size (images)", "f1"),
]


@dataclass
class QualityMetrics:
    precision: float
    reconstructed_images: float
    points3d: float
    track_length: float
    mae: float
    mae_10k: float
    spread: float
    specular: float
    # image name -> number of reconstructed observations with no detection within 0.5 px
    linkage_failures: dict = field(default_factory=dict, compare=False)

    def values(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "linkage_failures"}


@dataclass
class CoverageMetrics:
    reconstructed: float
    reconstructed_pct: float
    reconstructions: float
    average_size: float

    def values(self) -> dict:
        return asdict(self)


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan


def _reconstructed_obs(image) -> np.ndarray:
    return image.xys[image.point3d_ids != NO_POINT]


def _by_name(model: SparseModel, mapping) -> dict:
    """Re-key a per-image mapping by image name; integer keys are image ids."""
    if mapping is None:
        return {}
    out = {}
    for key, value in mapping.items():
        if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
            if key not in model.images:
                raise KeyError(f"image id {key} is not registered in the model")
            key = model.images[key].name
        out[key] = value
    return out


def _precision_terms(model, detections):
    terms, failures = {}, {}
    for img in model.images.values():
        det = np.asarray(detections.get(img.name, np.zeros((0, 2))), dtype=np.float64).reshape(-1, 2)
        obs = _reconstructed_obs(img)
        if len(det) == 0:
            if len(obs):
                failures[img.name] = len(obs)
            continue
        if len(obs) == 0:
            terms[img.name] = 0.0
            continue
        d_det, _ = cKDTree(obs).query(det, k=1)
        terms[img.name] = float(np.count_nonzero(d_det <= LINK_RADIUS)) / len(det)
        d_obs, _ = cKDTree(det).query(obs, k=1)
        missing = int(np.count_nonzero(d_obs > LINK_RADIUS))
        if missing:
            failures[img.name] = missing
    return terms, failures


def spread_of(image, width, height, grid=SPREAD_GRID) -> float:
    obs = _reconstructed_obs(image)
    if not len(obs):
        return 0.0
    cx = np.clip(np.floor(obs[:, 0] * grid / width).astype(int), 0, grid - 1)
    cy = np.clip(np.floor(obs[:, 1] * grid / height).astype(int), 0, grid - 1)
    return len(set(zip(cx.tolist(), cy.tolist()))) / float(grid * grid)


def _frame(frames, name):
    return frames[name] if isinstance(frames, Mapping) else frames(name)


def quality_metrics(model: SparseModel, detections=None, frames=None, total_images=None,
                    precision_over: str = "reconstructed") -> QualityMetrics:
    """The eight reconstruction-quality numbers for one model.

    ``detections`` maps image name (or registered image id) to the (n, 2)
    full-frame keypoints fed to SfM. ``frames`` maps image name to a
    grayscale frame on the 0-255 scale (a callable is accepted too);
    without it ``specular`` is NaN. ``total_images`` defaults to the number
    of detection entries. ``precision_over="all"`` averages precision over
    every detection entry, counting unregistered images as 0.
    """
    if precision_over not in ("reconstructed", "all"):
        raise ValueError(f"precision_over must be 'reconstructed' or 'all', got {precision_over!r}")
    detections = _by_name(model, detections)
    if total_images is None:
        total_images = len(detections) or len(model.images)
    if total_images < len(model.images):
        raise ValueError(f"total_images={total_images} is below the {len(model.images)} registered images")

    terms, failures = _precision_terms(model, detections)
    if precision_over == "all":
        precision = _mean(terms.get(name, 0.0) for name, det in detections.items() if len(det))
    else:
        precision = _mean(terms.values())

    errs = np.sort(np.fromiter(reprojection_errors(model).values(), dtype=np.float64))
    lengths = [p.track_length for p in model.points.values()]

    spreads = []
    spec_hits = spec_total = 0
    for img in model.images.values():
        cam = model.cameras[img.camera_id]
        spreads.append(spread_of(img, cam.width, cam.height))
        if frames is not None:
            obs = _reconstructed_obs(img)
            if len(obs):
                gray = np.asarray(_frame(frames, img.name))
                cols = np.clip(np.floor(obs[:, 0]).astype(int), 0, gray.shape[1] - 1)
                rows = np.clip(np.floor(obs[:, 1]).astype(int), 0, gray.shape[0] - 1)
                spec_hits += int(np.count_nonzero(gray[rows, cols] >= SPECULAR_LEVEL))
                spec_total += len(obs)
    if frames is None:
        specular = math.nan
    else:
        specular = spec_hits / spec_total if spec_total else 0.0

    return QualityMetrics(
        precision=precision,
        reconstructed_images=len(model.images) / total_images if total_images else math.nan,
        points3d=float(len(model.points)),
        track_length=_mean(lengths),
        mae=float(errs.mean()) if len(errs) else math.nan,
        mae_10k=float(errs[:MAE_BEST_K].mean()) if len(errs) else math.nan,
        spread=_mean(spreads),
        specular=float(specular),
        linkage_failures=failures,
    )


def average_quality(metrics) -> QualityMetrics:
    """Per-submap metrics averaged field by field (NaNs ignored)."""
    metrics = list(metrics)
    if not metrics:
        raise ValueError("no metrics to average")
    vals = {}
    for key in metrics[0].values():
        col = np.array([m.values()[key] for m in metrics], dtype=np.float64)
        vals[key] = float(np.nanmean(col)) if np.any(np.isfinite(col)) else math.nan
    merged: dict = {}
    for m in metrics:
        for k, v in m.linkage_failures.items():
            merged[k] = merged.get(k, 0) + v
    return QualityMetrics(**vals, linkage_failures=merged)


def coverage_metrics(models, total_frames: int) -> CoverageMetrics:
    """Union-of-registered-images coverage over a set of submaps (images identified by name)."""
    models = list(models)
    if total_frames <= 0:
        raise ValueError("total_frames must be positive")
    names = set()
    for m in models:
        names.update(img.name for img in m.images.values())
    sizes = [len(m.images) for m in models]
    return CoverageMetrics(
        reconstructed=float(len(names)),
        reconstructed_pct=len(names) / total_frames,
        reconstructions=float(len(models)),
        average_size=float(np.mean(sizes)) if sizes else 0.0,
    )


def _fmt(value, kind):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    if kind == "pct":
        return f"{100.0 * value:.1f}%"
    if kind == "int":
        return f"{int(round(value))}"
    if kind == "f1":
        return f"{value:.1f}"
    return f"{value:.2f}"


def format_table(rows, columns: dict) -> str:
    """Plain-text table: one row per metric label, one column per named result."""
    names = list(columns)
    label_w = max(len(label) for _, label, _ in rows)
    cells = {n: [_fmt(columns[n].values()[key], kind) for key, _, kind in rows] for n in names}
    widths = {n: max(len(n), *(len(c) for c in cells[n])) for n in names}
    out = [" " * label_w + " | " + " | ".join(n.rjust(widths[n]) for n in names)]
    out.append("-" * len(out[0]))
    for r, (_, label, _) in enumerate(rows):
        out.append(label.ljust(label_w) + " | " + " | ".join(cells[n][r].rjust(widths[n]) for n in names))
    return "\n".join(out) + "\n"


def quality_report(columns: dict) -> str:
    return format_table(QUALITY_ROWS, columns)


def coverage_report(columns: dict) -> str:
    return format_table(COVERAGE_ROWS, columns)


def write_key_values(path, metrics) -> None:
    data = dict(metrics.values())
    if isinstance(metrics, QualityMetrics):
        data["linkage_failures"] = metrics.linkage_failures
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")
