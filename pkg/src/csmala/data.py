"""Synthetic piecewise regression data and its on-disk format.

A dataset is stored as ``<stem>.csv`` (columns ``x, y``; ``x0.. x{p-1}`` for
``p > 1``) next to a ``<stem>.json`` sidecar holding the metadata.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GENERATOR_TAG",
    "SCHEMA_VERSION",
    "Dataset",
    "DatasetSchemaError",
    "generate",
    "load",
    "save",
    "true_f",
]

GENERATOR_TAG = "sect5-piecewise"
SCHEMA_VERSION = 1


class DatasetSchemaError(ValueError):
    """The file exists and is readable but its contents are malformed."""


@dataclass
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        if self.xs.ndim == 1:
            self.xs = self.xs.reshape(-1, 1)
        self.ys = np.asarray(self.ys, dtype=np.float64).reshape(-1)
        if self.xs.shape[0] != self.ys.shape[0]:
            raise ValueError(f"{self.xs.shape[0]} inputs but {self.ys.shape[0]} responses")
        if not (np.all(np.isfinite(self.xs)) and np.all(np.isfinite(self.ys))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.ys.shape[0]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.xs, other.xs)
            and np.array_equal(self.ys, other.ys)
            and self.meta == other.meta
        )


def true_f(x):
    """Regression function: ``1.5 (x + 0.5)^2`` left of zero, ``0.3 sin(10x - 2) + 0.5`` right of it."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x < 0, 1.5 * (x + 0.5) ** 2, 0.3 * np.sin(10.0 * x - 2.0) + 0.5)
    return float(out) if out.ndim == 0 else out


def generate(n: int, noise_sd: float = 0.02, seed: int = 0) -> Dataset:
    """Draw ``X ~ U([-0.8, -0.2] u [0.2, 0.8])`` and ``Y = f(X) + N(0, noise_sd^2)``.

    A fair sign bit picks the interval, so both halves get exactly equal mass.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5EC5])))
    sign = rng.integers(0, 2, size=n)
    mag = rng.uniform(0.2, 0.8, size=n)
    x = np.where(sign == 1, -mag, mag)
    eps = rng.standard_normal(n) * noise_sd
    y = true_f(x) + eps
    meta = {"n": int(n), "seed": int(seed), "noise_sd": float(noise_sd), "generator": GENERATOR_TAG}
    return Dataset(x.reshape(-1, 1), y, meta)


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".csv", ".json") else path
    return stem.with_suffix(".csv"), stem.with_suffix(".json")


def save(dataset: Dataset, path) -> Path:
    """Write the CSV and JSON sidecar; floats use ``repr`` so the round trip is exact."""
    csv_path, json_path = _paths(path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    p = dataset.xs.shape[1]
    cols = ["x"] if p == 1 else [f"x{j}" for j in range(p)]
    tmp = csv_path.with_name(f"{csv_path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols + ["y"])
        for row, y in zip(dataset.xs, dataset.ys):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(y))])
    tmp.replace(csv_path)
    meta = dict(dataset.meta)
    meta.setdefault("n", dataset.n)
    meta["p"] = p
    meta["schema_version"] = SCHEMA_VERSION
    tmp = json_path.with_name(f"{json_path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    tmp.replace(json_path)
    return csv_path


def load(path) -> Dataset:
    """Read a dataset written by :func:`save`.

    Raises:
        OSError: the files cannot be read.
        DatasetSchemaError: the files are readable but malformed or truncated.
    """
    csv_path, json_path = _paths(path)
    text = json_path.read_text()
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetSchemaError(f"{json_path}: invalid JSON sidecar ({exc})") from exc
    version = meta.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise DatasetSchemaError(f"{json_path}: schema version {version!r}, expected {SCHEMA_VERSION}")
    p = int(meta.pop("p", 1))
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "y" or len(rows[0]) != p + 1:
        raise DatasetSchemaError(f"{csv_path}: unexpected header {rows[:1]}")
    body = rows[1:]
    if len(body) != meta.get("n", len(body)):
        raise DatasetSchemaError(f"{csv_path}: {len(body)} rows, sidecar says {meta.get('n')}")
    try:
        arr = np.array([[float(v) for v in row] for row in body], dtype=np.float64)
    except ValueError as exc:
        raise DatasetSchemaError(f"{csv_path}: unparsable value ({exc})") from exc
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != p + 1:
        raise DatasetSchemaError(f"{csv_path}: ragged or empty rows")
    if not np.all(np.isfinite(arr)):
        raise DatasetSchemaError(f"{csv_path}: non-finite values")
    return Dataset(arr[:, :p], arr[:, p], meta)


def noise_free(dataset: Dataset) -> np.ndarray:
    """True regression function evaluated at the dataset inputs (``p = 1`` only)."""
    if dataset.xs.shape[1] != 1:
        raise ValueError("true_f is defined for one-dimensional inputs")
    return true_f(dataset.xs[:, 0])

