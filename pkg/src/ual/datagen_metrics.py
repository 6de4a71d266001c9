"""Group datasets: synthetic generation, file I/O, and evaluation metrics.

A group sample is a set of face feature vectors, a possibly-empty set of
object feature vectors, one scene feature vector, and a class label. The
synthetic generator plants one feature-space center per class and injects
the two noise phenomena the model is built to survive:

* occlusion surrogate: a ``corrupt_fraction`` of faces receive additive
  half-normal clutter scaled by ``corrupt_scale * spread``. Clutter is
  non-negative by design, mimicking spurious activation energy from an
  occluder, so corrupted inputs carry systematically larger feature mass.
* inconsistent-emotion surrogate: an ``inconsistent_fraction`` of faces and
  objects are drawn from a different class's center.

Files are line-delimited JSON: a header record followed by one record per
group (see ``SCHEMA``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError
from .numerics import SeededRng

SCHEMA = "ual-groups/v1"
DEFAULT_CLASS_NAMES = ("Positive", "Neutral", "Negative")


@dataclass
class GroupSample:
    """One group instance over precomputed features."""

    id: str
    label: int
    faces: np.ndarray  # (n_faces, face_dim), n_faces >= 1
    objects: np.ndarray  # (n_objects, object_dim), possibly empty
    scene: np.ndarray  # (scene_dim,)


@dataclass
class Dataset:
    face_dim: int
    object_dim: int
    scene_dim: int
    num_classes: int
    class_names: tuple[str, ...]
    groups: list[GroupSample] = field(default_factory=list)
    synthesis_stats: dict | None = None  # populated by generate_dataset only

    def __len__(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class SynthesisSpec:
    """Knobs for the synthetic generator. All randomness flows from ``seed``.

    ``partition`` enters the per-group stream keys but not the center draw,
    so train/val files generated from the same seed share class centers.
    """

    num_groups: int = 500
    group_size_min: int = 3
    group_size_max: int = 8
    face_dim: int = 64
    object_dim: int = 32
    scene_dim: int = 16
    num_classes: int = 3
    spread: float = 1.0
    corrupt_fraction: float = 0.3
    corrupt_scale: float = 10.0
    inconsistent_fraction: float = 0.2
    object_count_min: int = 0
    object_count_max: int = 3
    center_scale: float = 1.0
    seed: int = 0
    partition: str = "train"

    def validate(self) -> None:
        if self.num_groups < 1:
            raise DataError("num_groups must be >= 1")
        if not (2 <= self.group_size_min <= self.group_size_max):
            raise DataError("group sizes must satisfy 2 <= min <= max")
        if not (0 <= self.object_count_min <= self.object_count_max):
            raise DataError("object counts must satisfy 0 <= min <= max")
        if min(self.face_dim, self.object_dim, self.scene_dim) < 1:
            raise DataError("feature dims must be >= 1")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        for name in ("corrupt_fraction", "inconsistent_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DataError(f"{name} must lie in [0, 1], got {v}")
        if self.corrupt_scale < 1.0:
            raise DataError("corrupt_scale must be >= 1")
        if self.spread < 0.0 or self.center_scale <= 0.0:
            raise DataError("spread must be >= 0 and center_scale > 0")


def class_names_for(num_classes: int) -> tuple[str, ...]:
    if num_classes == len(DEFAULT_CLASS_NAMES):
        return DEFAULT_CLASS_NAMES
    return tuple(f"class{i}" for i in range(num_classes))


def generate_dataset(spec: SynthesisSpec) -> Dataset:
    """Generate a synthetic dataset; deterministic given the spec."""
    spec.validate()
    root = SeededRng(spec.seed)
    centers = root.derive("centers")
    face_centers = spec.center_scale * centers.normals((spec.num_classes, spec.face_dim))
    object_centers = spec.center_scale * centers.normals((spec.num_classes, spec.object_dim))
    scene_centers = spec.center_scale * centers.normals((spec.num_classes, spec.scene_dim))

    stats = {"faces": 0, "objects": 0, "corrupted_faces": 0, "inconsistent_individuals": 0}
    groups: list[GroupSample] = []
    for i in range(spec.num_groups):
        g = root.derive("group", spec.partition, i)
        label = g.integer(spec.num_classes)
        n_faces = spec.group_size_min + g.integer(spec.group_size_max - spec.group_size_min + 1)
        n_objects = spec.object_count_min + g.integer(
            spec.object_count_max - spec.object_count_min + 1
        )
        faces = np.empty((n_faces, spec.face_dim))
        for j in range(n_faces):
            base = label
            if g.uniform() < spec.inconsistent_fraction and spec.num_classes > 1:
                base = (label + 1 + g.integer(spec.num_classes - 1)) % spec.num_classes
                stats["inconsistent_individuals"] += 1
            x = face_centers[base] + spec.spread * g.normals(spec.face_dim)
            if g.uniform() < spec.corrupt_fraction:
                x = x + spec.corrupt_scale * spec.spread * np.abs(g.normals(spec.face_dim))
                stats["corrupted_faces"] += 1
            faces[j] = x
        objects = np.empty((n_objects, spec.object_dim))
        for j in range(n_objects):
            base = label
            if g.uniform() < spec.inconsistent_fraction and spec.num_classes > 1:
                base = (label + 1 + g.integer(spec.num_classes - 1)) % spec.num_classes
                stats["inconsistent_individuals"] += 1
            objects[j] = object_centers[base] + spec.spread * g.normals(spec.object_dim)
        scene = scene_centers[label] + spec.spread * g.normals(spec.scene_dim)
        stats["faces"] += n_faces
        stats["objects"] += n_objects
        groups.append(
            GroupSample(
                id=f"{spec.partition}-{i:05d}",
                label=label,
                faces=faces,
                objects=objects,
                scene=scene,
            )
        )
    return Dataset(
        face_dim=spec.face_dim,
        object_dim=spec.object_dim,
        scene_dim=spec.scene_dim,
        num_classes=spec.num_classes,
        class_names=class_names_for(spec.num_classes),
        groups=groups,
        synthesis_stats=stats,
    )


# ---------------------------------------------------------------------------
# file I/O


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "schema": SCHEMA,
        "face_dim": dataset.face_dim,
        "object_dim": dataset.object_dim,
        "scene_dim": dataset.scene_dim,
        "num_classes": dataset.num_classes,
        "class_names": list(dataset.class_names),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for group in dataset.groups:
            record = {
                "id": group.id,
                "label": int(group.label),
                "faces": [[float(v) for v in row] for row in group.faces],
                "objects": [[float(v) for v in row] for row in group.objects],
                "scene": [float(v) for v in group.scene],
            }
            fh.write(json.dumps(record) + "\n")


def _rows(value, dim: int, what: str, line: int) -> np.ndarray:
    if not isinstance(value, list):
        raise DataError(f"line {line}: {what} must be a list of vectors")
    out = np.zeros((len(value), dim))
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) != dim:
            got = len(row) if isinstance(row, list) else type(row).__name__
            raise DataError(f"line {line}: {what}[{i}] must have {dim} dims, got {got}")
        out[i] = row
    return out


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line 1: bad header: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise DataError(f"{path}: line 1: expected schema {SCHEMA!r}")
    try:
        dataset = Dataset(
            face_dim=int(header["face_dim"]),
            object_dim=int(header["object_dim"]),
            scene_dim=int(header["scene_dim"]),
            num_classes=int(header["num_classes"]),
            class_names=tuple(header["class_names"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: line 1: incomplete header: {exc}") from exc
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {lineno}: bad record: {exc}") from exc
        try:
            gid = str(rec["id"])
            label = int(rec["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: line {lineno}: missing id/label: {exc}") from exc
        if not (0 <= label < dataset.num_classes):
            raise DataError(
                f"{path}: line {lineno}: label {label} out of range "
                f"for {dataset.num_classes} classes"
            )
        faces = _rows(rec.get("faces"), dataset.face_dim, "faces", lineno)
        if faces.shape[0] < 1:
            raise DataError(f"{path}: line {lineno}: a group needs at least 1 face")
        objects = _rows(rec.get("objects", []), dataset.object_dim, "objects", lineno)
        scene = rec.get("scene")
        if not isinstance(scene, list) or len(scene) != dataset.scene_dim:
            raise DataError(
                f"{path}: line {lineno}: scene must have {dataset.scene_dim} dims"
            )
        dataset.groups.append(
            GroupSample(id=gid, label=label, faces=faces, objects=objects,
                        scene=np.asarray(scene, dtype=np.float64))
        )
    return dataset


# ---------------------------------------------------------------------------
# metrics


def f_measure(precision: float, recall: float) -> float:
    """2PR / (P + R), defined as 0 when P + R == 0."""
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_average(values: Sequence[float]) -> float:
    """Unweighted mean over classes (the "Ave" columns)."""
    if len(values) == 0:
        raise ValueError("macro_average of an empty sequence")
    return float(np.mean(values))


def support_weighted_average(values: Sequence[float], supports: Sequence[int]) -> float:
    """Mean over classes weighted by class support."""
    v = np.asarray(values, dtype=np.float64)
    s = np.asarray(supports, dtype=np.float64)
    if v.shape != s.shape or v.ndim != 1 or v.shape[0] == 0:
        raise ShapeError("values/supports must be equal-length nonempty vectors")
    total = s.sum()
    if total <= 0:
        raise ValueError("total support must be positive")
    return float((v * s).sum() / total)


@dataclass
class MetricsReport:
    """Per-class recall/precision/F plus macro ("Ave") and micro aggregates.

    ``micro_accuracy`` is the support-weighted recall, i.e. plain accuracy
    (trace of the confusion matrix over its total); it is reported alongside
    the macro averages rather than instead of them.
    """

    class_names: tuple[str, ...]
    confusion: np.ndarray  # (C, C), rows = true class, cols = predicted
    recall: np.ndarray
    precision: np.ndarray
    f: np.ndarray
    support: np.ndarray
    macro_recall: float
    macro_precision: float
    macro_f: float
    micro_accuracy: float

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "confusion": [[int(v) for v in row] for row in self.confusion],
            "recall": [float(v) for v in self.recall],
            "precision": [float(v) for v in self.precision],
            "f_measure": [float(v) for v in self.f],
            "support": [int(v) for v in self.support],
            "macro_recall": float(self.macro_recall),
            "macro_precision": float(self.macro_precision),
            "macro_f": float(self.macro_f),
            "micro_accuracy": float(self.micro_accuracy),
        }

    def format_table(self, title: str = "") -> str:
        """Human-readable table; values in percent with two decimals."""
        lines = []
        if title:
            lines.append(title)
        header = f"{'class':>10} {'recall':>8} {'precision':>10} {'F':>8} {'support':>8}"
        lines.append(header)
        for i, name in enumerate(self.class_names):
            lines.append(
                f"{name:>10} {100 * self.recall[i]:8.2f} {100 * self.precision[i]:10.2f} "
                f"{100 * self.f[i]:8.2f} {int(self.support[i]):8d}"
            )
        lines.append(
            f"{'Ave':>10} {100 * self.macro_recall:8.2f} {100 * self.macro_precision:10.2f} "
            f"{100 * self.macro_f:8.2f} {int(self.support.sum()):8d}"
        )
        lines.append(f"{'micro':>10} {100 * self.micro_accuracy:8.2f}")
        return "\n".join(lines)


def compute_metrics(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    num_classes: int,
    class_names: Sequence[str] | None = None,
) -> MetricsReport:
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1 or t.shape[0] == 0:
        raise ShapeError("labels must be equal-length nonempty 1-D sequences")
    if t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise DataError(f"labels out of range for {num_classes} classes")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (t, p), 1)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    diag = np.diag(confusion).astype(np.float64)
    recall = np.divide(diag, support, out=np.zeros(num_classes), where=support > 0)
    precision = np.divide(diag, predicted, out=np.zeros(num_classes), where=predicted > 0)
    f = np.array([f_measure(precision[c], recall[c]) for c in range(num_classes)])
    names = tuple(class_names) if class_names is not None else class_names_for(num_classes)
    return MetricsReport(
        class_names=names,
        confusion=confusion,
        recall=recall,
        precision=precision,
        f=f,
        support=support,
        macro_recall=macro_average(recall),
        macro_precision=macro_average(precision),
        macro_f=macro_average(f),
        micro_accuracy=float(diag.sum() / t.shape[0]),
    )


def spec_from_mapping(mapping: dict, source: str = "spec") -> SynthesisSpec:
    """Build a SynthesisSpec from a {key: string} mapping, typo-safe."""
    spec = SynthesisSpec()
    fields = {f: type(getattr(spec, f)) for f in spec.__dataclass_fields__}
    updates = {}
    for key, raw in mapping.items():
        if key not in fields:
            raise DataError(f"{source}: unknown field {key!r}")
        kind = fields[key]
        try:
            if kind is int:
                updates[key] = int(raw)
            elif kind is float:
                updates[key] = float(raw)
            else:
                updates[key] = str(raw)
        except ValueError as exc:
            raise DataError(f"{source}: field {key!r}: {exc}") from exc
    out = replace(spec, **updates)
    out.validate()
    return out


def binomial_99_interval(n: int, p: float) -> tuple[float, float]:
    """Normal-approximation 99% interval for a Binomial(n, p) count."""
    mean = n * p
    sd = math.sqrt(n * p * (1.0 - p))
    return mean - 2.576 * sd, mean + 2.576 * sd
