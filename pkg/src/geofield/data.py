"""Datasets, synthetic fields, splits, and the per-step training sampler.

Datasets hold raw values (degrees, km, class indices); normalization to the
model scale happens when observation/query batches are assembled. Datasets
are immutable after load. A SceneSampler owns a single seeded random stream
and draws, per step, a uniform-random subset of modalities for the encoder
plus queries for every registered modality.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, SchemaError
from .modalities import ModalityRegistry, ModalitySpec, TASK_CLASS, normalize

CSV_HEADER = ["lat", "lon", "depth_km", "value"]

DEFAULT_MAX_OBSERVATIONS = 384


@dataclass(frozen=True)
class Dataset:
    """Point observations of one modality (raw units; class indices for labels)."""

    spec: ModalitySpec
    points: np.ndarray  # (n, 3) lat, lon, depth_km
    values: np.ndarray  # (n,) floats, or int class indices

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise SchemaError(f"{self.spec.name}: points must be (n, 3), got {self.points.shape}")
        if len(self.values) != len(self.points):
            raise SchemaError(f"{self.spec.name}: {len(self.points)} points vs {len(self.values)} values")

    def __len__(self) -> int:
        return len(self.points)

    def take(self, index) -> "Dataset":
        return Dataset(self.spec, self.points[index], self.values[index])

    def normalized_values(self, index=None) -> np.ndarray:
        vals = self.values if index is None else self.values[index]
        return normalize(vals, self.spec)

    def labels(self) -> np.ndarray:
        if not self.spec.is_classification:
            raise ConfigError(f"{self.spec.name} is not a classification modality")
        return np.array([self.spec.classes[i] for i in self.values])


@dataclass(frozen=True)
class ObservationBatch:
    """Sampled encoder inputs for one modality, values already normalized."""

    modality: str
    mod_index: int
    points: np.ndarray   # (k, 3)
    values: np.ndarray   # (k, feature_width)


@dataclass(frozen=True)
class QueryBatch:
    """Decoder queries: locations, task ids, and normalized target rows."""

    points: np.ndarray          # (n, 3)
    task_ids: np.ndarray        # (n,) registry indices
    targets: list               # n rows; (1,) for regression, one-hot for classes

    def __post_init__(self):
        if not (len(self.points) == len(self.task_ids) == len(self.targets)):
            raise SchemaError("query points, task ids, and targets must have equal length")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Scene:
    """One training step's inputs: fused-order observations plus queries."""

    observations: list  # ObservationBatch, in fusion order (may be empty)
    queries: QueryBatch

    @property
    def n_tokens(self) -> int:
        return sum(len(b.points) for b in self.observations)


# -- synthetic analytic fields ----------------------------------------------


def angular_field(lat, lon):
    """Smooth directional field in degrees, wrapped to [0, 180)."""
    return np.mod(90.0 + 60.0 * np.sin(np.pi * np.asarray(lat) / 90.0) * np.cos(np.pi * np.asarray(lon) / 90.0), 180.0)


def scalar_field(lat, lon):
    return 0.5 + 0.4 * np.sin(np.pi * np.asarray(lat) / 60.0) * np.sin(np.pi * np.asarray(lon) / 120.0)


def depth_scalar_field(lat, lon, depth_km, depth_max_km=2891.0):
    frac = np.asarray(depth_km) / depth_max_km
    return scalar_field(lat, lon) * (1.0 - frac / 2.0)


def quadrant_class(lat, lon):
    """Quadrant index by hemisphere signs: (+,+)=0 (+,-)=1 (-,+)=2 (-,-)=3."""
    return (np.asarray(lat) < 0).astype(np.int64) * 2 + (np.asarray(lon) < 0).astype(np.int64)


SYNTH_KINDS = ("angular", "scalar", "scalar-depth", "categorical")

_KIND_TO_MODALITY = {
    "angular": "angular_field",
    "scalar": "scalar_field",
    "scalar-depth": "depth_field",
    "categorical": "quadrant_class",
}


def synth_field(kind: str, n_points: int, seed: int, spec: ModalitySpec | None = None,
                depth_range=(0.0, 700.0)) -> Dataset:
    """Sample a deterministic analytic field at seeded-uniform coordinates."""
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic field kind {kind!r}; choose from {SYNTH_KINDS}")
    if n_points < 1:
        raise DomainError(f"n_points must be >= 1, got {n_points}")
    if spec is None:
        from .modalities import synthetic_registry

        spec = synthetic_registry().spec(_KIND_TO_MODALITY[kind])
    rng = np.random.default_rng(seed)
    lat = rng.uniform(-90.0, 90.0, n_points)
    lon = rng.uniform(-180.0, 180.0, n_points)
    if kind == "scalar-depth":
        depth = rng.uniform(depth_range[0], depth_range[1], n_points)
    else:
        depth = np.zeros(n_points)
    points = np.column_stack([lat, lon, depth])
    if kind == "angular":
        values = angular_field(lat, lon)
    elif kind == "scalar":
        values = scalar_field(lat, lon)
    elif kind == "scalar-depth":
        values = depth_scalar_field(lat, lon, depth)
    else:
        values = quadrant_class(lat, lon)
    return Dataset(spec, points, values)


def synthetic_datasets(n_points: int, seed: int) -> dict[str, Dataset]:
    """All four synthetic modalities, seeded independently per modality."""
    return {
        _KIND_TO_MODALITY[kind]: synth_field(kind, n_points, seed + i)
        for i, kind in enumerate(SYNTH_KINDS)
    }


# -- CSV ingestion -------------------------------------------------------------


def ingest_csv(path, spec: ModalitySpec) -> Dataset:
    """Load `lat,lon,depth_km,value` rows, validating ranges against the spec."""
    points = []
    values = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise SchemaError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                lat, lon, depth = float(row[0]), float(row[1]), float(row[2])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: bad coordinate: {exc}") from exc
            if not -90.0 <= lat <= 90.0:
                raise DomainError(f"{path}:{lineno}: latitude {lat} outside [-90, 90]")
            if not -180.0 <= lon <= 180.0:
                raise DomainError(f"{path}:{lineno}: longitude {lon} outside [-180, 180]")
            if depth < 0.0:
                raise DomainError(f"{path}:{lineno}: negative depth {depth}")
            if spec.is_classification:
                values.append(spec.class_index(row[3]))
            else:
                try:
                    raw = float(row[3])
                except ValueError as exc:
                    raise SchemaError(f"{path}:{lineno}: bad value: {exc}") from exc
                lo, hi = spec.value_range
                if not lo <= raw <= hi:
                    raise DomainError(f"{path}:{lineno}: value {raw} outside [{lo}, {hi}]")
                values.append(raw)
            points.append((lat, lon, depth))
    dtype = np.int64 if spec.is_classification else np.float64
    return Dataset(spec, np.array(points, dtype=np.float64).reshape(-1, 3), np.array(values, dtype=dtype))


def write_csv(path, dataset: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        if dataset.spec.is_classification:
            rendered = dataset.labels()
        else:
            rendered = [repr(float(v)) for v in dataset.values]
        for (lat, lon, depth), value in zip(dataset.points, rendered):
            writer.writerow([repr(float(lat)), repr(float(lon)), repr(float(depth)), value])


def fill_missing_class(dataset: Dataset, points: np.ndarray, spec: ModalitySpec | None = None) -> Dataset:
    """Cover `points` with labels, filling coordinates absent from the dataset.

    Points already present (exact coordinate match) keep their label; the
    rest receive the spec's fill label.
    """
    spec = spec or dataset.spec
    if not spec.is_classification:
        raise ConfigError(f"{spec.name}: class fill applies to classification modalities only")
    if spec.fill_label is None:
        raise ConfigError(f"{spec.name}: no fill label declared")
    fill_idx = spec.class_index(spec.fill_label)
    known = {tuple(p): int(v) for p, v in zip(dataset.points, dataset.values)}
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    values = np.array([known.get(tuple(p), fill_idx) for p in pts], dtype=np.int64)
    return Dataset(spec, pts, values)


# -- splitting -------------------------------------------------------------------


def split(dataset: Dataset, test_fraction: float = 0.05, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint seeded train/test partition; test size rounds to the fraction."""
    n = len(dataset)
    if n < 20:
        raise DomainError(f"{dataset.spec.name}: dataset of {n} points is too small to split")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return dataset.take(train_idx), dataset.take(test_idx)


def split_all(datasets: dict[str, Dataset], test_fraction: float = 0.05, seed: int = 0):
    trains, tests = {}, {}
    for i, (name, ds) in enumerate(datasets.items()):
        trains[name], tests[name] = split(ds, test_fraction, seed + i)
    return trains, tests


# -- stochastic training sampler -------------------------------------------------


@dataclass
class SamplerConfig:
    """Per-step sampling bounds; identical seeds give identical streams."""

    max_observations: int = DEFAULT_MAX_OBSERVATIONS   # per modality per step
    max_queries: int = DEFAULT_MAX_OBSERVATIONS        # per modality per step
    seed: int = 0

    def __post_init__(self):
        if self.max_observations < 1 or self.max_queries < 1:
            raise ConfigError("sampling bounds must be at least 1")

    def to_json(self) -> dict:
        return {
            "max_observations": self.max_observations,
            "max_queries": self.max_queries,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SamplerConfig":
        return cls(
            max_observations=int(obj.get("max_observations", DEFAULT_MAX_OBSERVATIONS)),
            max_queries=int(obj.get("max_queries", DEFAULT_MAX_OBSERVATIONS)),
            seed=int(obj.get("seed", 0)),
        )


class SceneSampler:
    """Draws one training scene per step from per-modality training sets.

    Per step: a subset of modalities is drawn uniformly over all 2^M subsets
    (possibly empty) and fused in randomized order; observation counts are
    uniform on [1, max_observations] with replacement. Queries are drawn for
    every registered modality regardless of the encoder subset, uniform on
    [1, max_queries]. The draw order within a step is fixed so that a given
    seed always produces the same stream.
    """

    def __init__(self, datasets: dict[str, Dataset], registry: ModalityRegistry,
                 config: SamplerConfig | None = None):
        self.registry = registry
        self.config = config or SamplerConfig()
        for spec in registry:
            if spec.name not in datasets:
                raise ConfigError(f"no training dataset for registered modality {spec.name!r}")
            if len(datasets[spec.name]) < 1:
                raise ConfigError(f"empty training set for modality {spec.name!r}")
        self.datasets = {s.name: datasets[s.name] for s in registry}
        self.rng = np.random.default_rng(self.config.seed)

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state

    def step(self) -> Scene:
        registry = self.registry
        m = len(registry)
        include = self.rng.random(m) < 0.5
        included = np.flatnonzero(include)
        order = self.rng.permutation(len(included)) if len(included) else np.array([], dtype=np.int64)

        observations = []
        for pos in order:
            idx = int(included[pos])
            spec = registry[idx]
            ds = self.datasets[spec.name]
            k = int(self.rng.integers(1, self.config.max_observations + 1))
            rows = self.rng.integers(0, len(ds), size=k)
            observations.append(
                ObservationBatch(
                    modality=spec.name,
                    mod_index=idx,
                    points=ds.points[rows],
                    values=ds.normalized_values(rows),
                )
            )

        q_points, q_tasks, q_targets = [], [], []
        for idx, spec in enumerate(registry):
            ds = self.datasets[spec.name]
            kq = int(self.rng.integers(1, self.config.max_queries + 1))
            rows = self.rng.integers(0, len(ds), size=kq)
            normalized = ds.normalized_values(rows)
            q_points.append(ds.points[rows])
            q_tasks.append(np.full(kq, idx, dtype=np.int64))
            q_targets.extend(list(normalized))
        queries = QueryBatch(
            points=np.concatenate(q_points, axis=0),
            task_ids=np.concatenate(q_tasks),
            targets=q_targets,
        )
        return Scene(observations=observations, queries=queries)
