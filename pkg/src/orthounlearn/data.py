"""Synthetic Gaussian-cluster datasets, CSV ingestion and class schedules."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ClassNotInDataset,
    InvalidConfig,
    MeanPlacementFailed,
    MissingClassInSplit,
    NonContiguousLabels,
    NothingRemains,
    OverlappingSchedule,
    ParseError,
)
from .unlearn import UnlearnTask

TRAIN_FRACTION = 0.8
MAX_MEAN_DRAWS = 1000


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # n x d
    labels: np.ndarray
    split: np.ndarray  # "train" / "test" per row
    num_classes: int
    seed: int | None = None
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.features.ndim != 2:
            raise InvalidConfig("features must be an n x d matrix")
        if self.features.shape[0] != self.labels.shape[0] or self.labels.shape[0] != self.split.shape[0]:
            raise InvalidConfig("features, labels and split tags must have equal length")
        if not np.all(np.isfinite(self.features)):
            raise InvalidConfig("features contain NaN or Inf")
        for name in ("train", "test"):
            present = set(np.unique(self.labels[self.split == name]).tolist())
            missing = sorted(set(range(self.num_classes)) - present)
            if missing:
                raise MissingClassInSplit(f"classes {missing} absent from the {name} split")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def select(self, split: str, classes=None) -> tuple[np.ndarray, np.ndarray]:
        """Features as a ``d x n`` matrix and labels, for one split and optional class subset."""
        mask = self.split == split
        if classes is not None:
            mask &= np.isin(self.labels, sorted(classes))
        return self.features[mask].T.copy(), self.labels[mask].copy()


def _stratified_split(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    split = np.empty(labels.shape[0], dtype=object)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(TRAIN_FRACTION * idx.size))
        n_train = min(max(n_train, 1), idx.size - 1)
        split[idx[:n_train]] = "train"
        split[idx[n_train:]] = "test"
    return split.astype(str)


def gen_synthetic(C: int, d: int, per_class_n: int, separation: float, seed: int) -> Dataset:
    """Gaussian clusters around random means of norm ``separation`` with unit noise."""
    if C < 2 or d < 2 or separation <= 0 or per_class_n < 2:
        raise InvalidConfig("need C >= 2, d >= 2, per_class_n >= 2, separation > 0")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_MEAN_DRAWS):
        means = rng.standard_normal((C, d))
        means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
        gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        if gaps[np.triu_indices(C, 1)].min() >= separation / 2:
            break
    else:
        raise MeanPlacementFailed(f"no mean placement with gaps >= {separation / 2} in {MAX_MEAN_DRAWS} draws")
    labels = np.repeat(np.arange(C), per_class_n)
    features = means[labels] + rng.standard_normal((C * per_class_n, d))
    return Dataset(features, labels, _stratified_split(labels, rng), C, seed, "synthetic")


# -- CSV -------------------------------------------------------------------------


def dumps_csv(ds: Dataset, include_split: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["label"] + [f"f{j}" for j in range(ds.dim)]
    if include_split:
        header.append("split")
    writer.writerow(header)
    for row, label, split in zip(ds.features, ds.labels, ds.split):
        cells = [str(int(label))] + [repr(float(v)) for v in row]
        if include_split:
            cells.append(str(split))
        writer.writerow(cells)
    return buf.getvalue()


def save_csv(ds: Dataset, path, include_split: bool = True) -> None:
    Path(path).write_text(dumps_csv(ds, include_split))


def load_csv(path, seed: int = 0) -> Dataset:
    """Read ``label,f0,f1,...[,split]``; without a split column, split 80/20 per class."""
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "label":
        raise ParseError(f"{path}: line 1: header must start with 'label'")
    has_split = header[-1] == "split"
    feat_cols = header[1:-1] if has_split else header[1:]
    if feat_cols != [f"f{j}" for j in range(len(feat_cols))] or not feat_cols:
        raise ParseError(f"{path}: line 1: feature columns must be f0..f{{d-1}}")
    labels, feats, splits = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: line {lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            labels.append(int(row[0]))
        except ValueError:
            raise ParseError(f"{path}: line {lineno}, column label: not an integer: {row[0]!r}") from None
        values = []
        for name, cell in zip(feat_cols, row[1 : 1 + len(feat_cols)]):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}, column {name}: not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise ParseError(f"{path}: line {lineno}, column {name}: non-finite value {cell!r}")
            values.append(v)
        feats.append(values)
        if has_split:
            tag = row[-1].strip()
            if tag not in ("train", "test"):
                raise ParseError(f"{path}: line {lineno}, column split: expected train/test, got {tag!r}")
            splits.append(tag)
    if not labels:
        raise ParseError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=int)
    classes = sorted(set(labels))
    if classes != list(range(len(classes))):
        raise NonContiguousLabels(f"{path}: labels {classes} are not contiguous from 0")
    if has_split:
        split = np.asarray(splits)
    else:
        split = _stratified_split(labels_arr, np.random.default_rng(seed))
    return Dataset(np.asarray(feats, dtype=float), labels_arr, split, len(classes), seed, "csv")


# -- schedules -------------------------------------------------------------------


def default_schedule(num_classes: int = 20, per_task: int = 4, num_tasks: int = 4) -> list[list[int]]:
    return [list(range(t * per_task, (t + 1) * per_task)) for t in range(num_tasks)]


def partition_tasks(ds: Dataset, schedule) -> list[UnlearnTask]:
    """Turn a list of forgetting class sets into the chained task list."""
    all_classes = set(range(ds.num_classes))
    seen: set[int] = set()
    for t, fset in enumerate(schedule, start=1):
        fset = set(int(c) for c in fset)
        unknown = sorted(fset - all_classes)
        if unknown:
            raise ClassNotInDataset(f"task {t}: classes {unknown} not in dataset")
        if not fset:
            raise InvalidConfig(f"task {t}: empty forgetting set")
        if fset & seen:
            raise OverlappingSchedule(f"task {t}: classes {sorted(fset & seen)} already forgotten")
        seen |= fset
    if seen >= all_classes and schedule:
        raise NothingRemains("schedule forgets every class")

    tasks = []
    remaining = set(all_classes)
    forgotten: set[int] = set()
    for t, fset in enumerate(schedule, start=1):
        fset = frozenset(int(c) for c in fset)
        remaining -= fset
        x_f, _ = ds.select("train", fset)
        x_r, y_r = ds.select("train", remaining)
        xf_te, yf_te = ds.select("test", fset)
        xr_te, yr_te = ds.select("test", remaining)
        tasks.append(
            UnlearnTask(
                index=t,
                forgetting_classes=fset,
                remaining_classes=frozenset(remaining),
                x_f_train=x_f,
                x_r_train=x_r,
                y_r_train=y_r,
                x_f_test=xf_te,
                y_f_test=yf_te,
                x_r_test=xr_te,
                y_r_test=yr_te,
                forgotten_before=frozenset(forgotten),
            )
        )
        forgotten |= fset
    return tasks
