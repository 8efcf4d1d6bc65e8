"""Modality registry: observation types, normalization, and output layout.

Each modality declares a task kind (angular regression, scalar regression,
or classification), its raw value range or class list, and how raw values
map to the normalized scale the model sees. Regression values are divided
by the range maximum (sediment thickness stays unnormalized in the default
registry); classification labels become one-hot rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, RegistryError, SchemaError

TASK_ANGULAR = "angular-regression"
TASK_SCALAR = "scalar-regression"
TASK_CLASS = "classification"

_TASK_KINDS = (TASK_ANGULAR, TASK_SCALAR, TASK_CLASS)


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    task_kind: str
    description: str
    value_range: tuple[float, float] | None = None
    classes: tuple[str, ...] | None = None
    angular_period: float | None = None
    normalizer: float | str = "identity"
    depth_varying: bool = False
    fill_label: str | None = None

    def __post_init__(self):
        if self.task_kind not in _TASK_KINDS:
            raise ConfigError(f"{self.name}: unknown task kind {self.task_kind!r}")
        if not self.description:
            raise ConfigError(f"{self.name}: description must be non-empty")
        if self.task_kind == TASK_CLASS:
            if not self.classes or len(self.classes) < 2:
                raise ConfigError(f"{self.name}: classification needs at least 2 classes")
            if len(set(self.classes)) != len(self.classes):
                raise ConfigError(f"{self.name}: duplicate class labels")
            if self.fill_label is not None and self.fill_label not in self.classes:
                raise ConfigError(f"{self.name}: fill label {self.fill_label!r} not in class list")
        else:
            if self.value_range is None or self.value_range[1] <= self.value_range[0]:
                raise ConfigError(f"{self.name}: regression needs a proper value range")
            if self.normalizer != "identity" and float(self.normalizer) <= 0:
                raise ConfigError(f"{self.name}: normalizer must be positive or 'identity'")
        if self.task_kind == TASK_ANGULAR:
            if self.angular_period not in (180.0, 360.0):
                raise ConfigError(f"{self.name}: angular period must be 180 or 360 degrees")

    @property
    def is_classification(self) -> bool:
        return self.task_kind == TASK_CLASS

    @property
    def feature_width(self) -> int:
        """Width of the raw feature row fed to the encoder (one-hot for classes)."""
        return len(self.classes) if self.is_classification else 1

    @property
    def output_width(self) -> int:
        """Width of this modality's slice in the shared output head."""
        return self.feature_width

    def class_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except (ValueError, AttributeError):
            raise SchemaError(f"{self.name}: unknown class label {label!r}") from None

    def to_json(self) -> dict:
        obj = {
            "name": self.name,
            "task_kind": self.task_kind,
            "description": self.description,
            "depth_varying": self.depth_varying,
        }
        if self.is_classification:
            obj["classes"] = list(self.classes)
            if self.fill_label is not None:
                obj["fill_label"] = self.fill_label
        else:
            obj["value_range"] = list(self.value_range)
            obj["normalizer"] = self.normalizer
            if self.angular_period is not None:
                obj["angular_period"] = self.angular_period
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ModalitySpec":
        try:
            return cls(
                name=obj["name"],
                task_kind=obj["task_kind"],
                description=obj["description"],
                value_range=tuple(obj["value_range"]) if "value_range" in obj else None,
                classes=tuple(obj["classes"]) if "classes" in obj else None,
                angular_period=float(obj["angular_period"]) if "angular_period" in obj else None,
                normalizer=obj.get("normalizer", "identity"),
                depth_varying=bool(obj.get("depth_varying", False)),
                fill_label=obj.get("fill_label"),
            )
        except KeyError as exc:
            raise SchemaError(f"modality record missing field {exc}") from exc


def normalize(value, spec: ModalitySpec) -> np.ndarray:
    """Map raw values to the model's normalized scale.

    Regression: divide by the declared max ('identity' leaves values as-is);
    returns an (n, 1) column. Classification: labels or class indices become
    one-hot rows of shape (n, n_classes).
    """
    if spec.is_classification:
        if isinstance(value, str):
            idx = np.array([spec.class_index(value)])
        else:
            arr = np.asarray(value)
            if arr.dtype.kind in "US":
                idx = np.array([spec.class_index(str(v)) for v in arr.reshape(-1)])
            else:
                idx = arr.reshape(-1).astype(np.int64)
                if idx.size and (idx.min() < 0 or idx.max() >= len(spec.classes)):
                    raise SchemaError(f"{spec.name}: class index out of range")
        onehot = np.zeros((idx.size, len(spec.classes)), dtype=np.float64)
        onehot[np.arange(idx.size), idx] = 1.0
        return onehot
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    lo, hi = spec.value_range
    if arr.size and (arr.min() < lo or arr.max() > hi):
        bad = arr[(arr < lo) | (arr > hi)][0]
        raise DomainError(f"{spec.name}: raw value {bad} outside [{lo}, {hi}]")
    if spec.normalizer == "identity":
        return arr[:, None].copy()
    return arr[:, None] / float(spec.normalizer)


def denormalize(row, spec: ModalitySpec):
    """Invert normalize: scalar rows back to raw units, one-hot/logit rows to labels."""
    arr = np.asarray(row, dtype=np.float64)
    if spec.is_classification:
        idx = np.argmax(arr.reshape(-1, len(spec.classes)), axis=1)
        return np.array([spec.classes[i] for i in idx])
    flat = arr.reshape(-1)
    if spec.normalizer == "identity":
        return flat.copy()
    return flat * float(spec.normalizer)


class ModalityRegistry:
    """Ordered collection of modality specs; task ids are positions."""

    def __init__(self, specs):
        specs = list(specs)
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate modality names in registry")
        if not specs:
            raise ConfigError("registry must contain at least one modality")
        self._specs = specs
        self._index = {s.name: i for i, s in enumerate(specs)}

    def __len__(self) -> int:
        return len(self._specs)

    def __iter__(self):
        return iter(self._specs)

    def __getitem__(self, i: int) -> ModalitySpec:
        return self._specs[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, ModalityRegistry) and self.to_json() == other.to_json()

    @property
    def names(self) -> list[str]:
        return [s.name for s in self._specs]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise RegistryError(f"unknown modality {name!r}; registered: {self.names}") from None

    def spec(self, name: str) -> ModalitySpec:
        return self._specs[self.index(name)]

    @property
    def out_dim(self) -> int:
        return sum(s.output_width for s in self._specs)

    def output_layout(self) -> list[tuple[str, int, int]]:
        """Contiguous, disjoint, exhaustive (name, offset, width) slices."""
        layout = []
        offset = 0
        for s in self._specs:
            layout.append((s.name, offset, s.output_width))
            offset += s.output_width
        return layout

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self._specs]

    @classmethod
    def from_json(cls, obj) -> "ModalityRegistry":
        return cls(ModalitySpec.from_json(rec) for rec in obj)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ModalityRegistry":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: invalid registry JSON: {exc}") from exc
        return cls.from_json(obj)


def default_registry() -> ModalityRegistry:
    """The eight-modality production registry.

    Class lists for the shapefile-derived modalities use generated labels;
    real deployments load a registry JSON with the true label sets. Sediment
    thickness is validated against 0-22 km and left unnormalized.
    """
    plates = tuple(f"plate_{i:02d}" for i in range(52))
    faults = ("None",) + tuple(f"fault_{i:02d}" for i in range(1, 24))
    basin_types = ("No Basin",) + tuple(f"basin_{i:02d}" for i in range(1, 9))
    basin_ages = ("No Basin",) + tuple(f"age_{i:02d}" for i in range(1, 17))
    return ModalityRegistry(
        [
            ModalitySpec(
                name="stress_angle",
                task_kind=TASK_ANGULAR,
                description="stress angle",
                value_range=(0.0, 180.0),
                angular_period=180.0,
                normalizer=180.0,
            ),
            ModalitySpec(
                name="strain_angle",
                task_kind=TASK_ANGULAR,
                description="strain angle",
                value_range=(0.0, 180.0),
                angular_period=180.0,
                normalizer=180.0,
            ),
            ModalitySpec(
                name="sediment_thickness",
                task_kind=TASK_SCALAR,
                description="sediment thickness",
                value_range=(0.0, 22.0),
                normalizer="identity",
            ),
            ModalitySpec(
                name="mantle_temperature",
                task_kind=TASK_SCALAR,
                description="mantle temperature",
                value_range=(400.0, 1300.0),
                normalizer=1300.0,
                depth_varying=True,
            ),
            ModalitySpec(
                name="tectonic_plates",
                task_kind=TASK_CLASS,
                description="tectonic plates",
                classes=plates,
            ),
            ModalitySpec(
                name="fault_type",
                task_kind=TASK_CLASS,
                description="fault type",
                classes=faults,
                fill_label="None",
            ),
            ModalitySpec(
                name="basin_type",
                task_kind=TASK_CLASS,
                description="basin type",
                classes=basin_types,
                fill_label="No Basin",
            ),
            ModalitySpec(
                name="basin_age",
                task_kind=TASK_CLASS,
                description="basin age",
                classes=basin_ages,
                fill_label="No Basin",
            ),
        ]
    )


QUADRANT_CLASSES = ("northeast", "northwest", "southeast", "southwest")


def synthetic_registry() -> ModalityRegistry:
    """Four analytic test modalities: angular, scalar, depth-varying scalar, categorical."""
    return ModalityRegistry(
        [
            ModalitySpec(
                name="angular_field",
                task_kind=TASK_ANGULAR,
                description="synthetic directional angle field",
                value_range=(0.0, 180.0),
                angular_period=180.0,
                normalizer=180.0,
            ),
            ModalitySpec(
                name="scalar_field",
                task_kind=TASK_SCALAR,
                description="synthetic smooth scalar field",
                value_range=(0.0, 1.0),
                normalizer=1.0,
            ),
            ModalitySpec(
                name="depth_field",
                task_kind=TASK_SCALAR,
                description="synthetic depth-attenuated scalar field",
                value_range=(0.0, 1.0),
                normalizer=1.0,
                depth_varying=True,
            ),
            ModalitySpec(
                name="quadrant_class",
                task_kind=TASK_CLASS,
                description="synthetic hemisphere quadrant category",
                classes=QUADRANT_CLASSES,
            ),
        ]
    )
