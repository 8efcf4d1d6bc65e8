"""Geographic positional encodings and text-derived modality vectors.

Coordinates are encoded as sine/cosine features of normalized latitude and
longitude over a fixed set of integer frequency bands, with the normalized
depth appended as one extra component, giving a vector of length
4 * n_bands + 1. Integer bands keep the encoding exactly periodic across
the +/-180 degree meridian.

All functions here are pure; they are safe for concurrent use.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, SchemaError

# Depth normalizer: core-mantle boundary depth in km, so any crust/mantle
# depth lands inside [0, 1]. Overridable per PosEncConfig.
DEPTH_NORM_KM = 2891.0

# Maximum latitude band scales inversely with the target resolution;
# a 0.5 degree grid maps to 36 latitude bands (and twice that for longitude).
_BAND_SCALE_DEG = 18.0

TEXT_VECTOR_DIM = 64


@dataclass(frozen=True)
class GeoPoint:
    """Location in degrees latitude/longitude plus depth in km (0 = surface)."""

    lat: float
    lon: float
    depth_km: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.lat, self.lon, self.depth_km], dtype=np.float64)


@dataclass(frozen=True)
class PosEncConfig:
    """Frequency bands for the positional encoding.

    lat_bands and lon_bands must be positive integers of equal count; the
    encoded vector has length 4 * n_bands + 1.
    """

    lat_bands: tuple[int, ...]
    lon_bands: tuple[int, ...]
    depth_max_km: float = DEPTH_NORM_KM

    def __post_init__(self):
        if len(self.lat_bands) != len(self.lon_bands):
            raise ConfigError(
                f"band counts differ: {len(self.lat_bands)} lat vs {len(self.lon_bands)} lon"
            )
        if len(self.lat_bands) < 1:
            raise ConfigError("at least one frequency band is required")
        for b in (*self.lat_bands, *self.lon_bands):
            if int(b) != b or b < 1:
                raise ConfigError(f"bands must be positive integers, got {b}")
        if self.depth_max_km <= 0:
            raise ConfigError(f"depth_max_km must be positive, got {self.depth_max_km}")

    @property
    def n_bands(self) -> int:
        return len(self.lat_bands)

    @property
    def dim(self) -> int:
        return 4 * self.n_bands + 1

    def to_json(self) -> dict:
        return {
            "lat_bands": list(self.lat_bands),
            "lon_bands": list(self.lon_bands),
            "depth_max_km": self.depth_max_km,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PosEncConfig":
        return cls(
            lat_bands=tuple(int(b) for b in obj["lat_bands"]),
            lon_bands=tuple(int(b) for b in obj["lon_bands"]),
            depth_max_km=float(obj.get("depth_max_km", DEPTH_NORM_KM)),
        )


def nyquist_bands(target_resolution_deg: float, depth_max_km: float = DEPTH_NORM_KM) -> PosEncConfig:
    """Derive frequency bands that resolve a target grid resolution.

    The maximum latitude band is 18 / resolution (36 at half a degree); the
    longitude maximum is twice that. Latitude bands are the integers
    1..f_lat; longitude bands are the even integers 2..2*f_lat, so both
    directions contribute the same number of bands.
    """
    if target_resolution_deg <= 0:
        raise ConfigError(f"target resolution must be positive, got {target_resolution_deg}")
    f_lat = int(round(_BAND_SCALE_DEG / target_resolution_deg))
    if f_lat < 1:
        raise ConfigError(
            f"resolution {target_resolution_deg} deg is too coarse for any frequency band"
        )
    lat_bands = tuple(range(1, f_lat + 1))
    lon_bands = tuple(range(2, 2 * f_lat + 1, 2))
    return PosEncConfig(lat_bands=lat_bands, lon_bands=lon_bands, depth_max_km=depth_max_km)


def _validate_coords(lat, lon, depth, depth_max):
    if np.any(lat < -90.0) or np.any(lat > 90.0):
        raise DomainError("latitude outside [-90, 90]")
    if np.any(lon < -180.0) or np.any(lon > 180.0):
        raise DomainError("longitude outside [-180, 180]")
    if np.any(depth < 0.0) or np.any(depth > depth_max):
        raise DomainError(f"depth outside [0, {depth_max}] km")


def pos_enc(point: GeoPoint, cfg: PosEncConfig) -> np.ndarray:
    """Encode one point as [sin lat bands, cos lat bands, sin lon bands, cos lon bands, depth]."""
    return pos_enc_batch(point.as_array()[None, :], cfg)[0]


def pos_enc_batch(points: np.ndarray, cfg: PosEncConfig) -> np.ndarray:
    """Vectorized encoding of an (n, 3) array of (lat, lon, depth_km) rows."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError(f"expected (n, 3) coordinate rows, got shape {pts.shape}")
    lat, lon, depth = pts[:, 0], pts[:, 1], pts[:, 2]
    _validate_coords(lat, lon, depth, cfg.depth_max_km)
    lat_n = lat / 90.0
    lon_n = lon / 180.0
    depth_n = depth / cfg.depth_max_km
    lat_phase = np.pi * lat_n[:, None] * np.asarray(cfg.lat_bands, dtype=np.float64)[None, :]
    lon_phase = np.pi * lon_n[:, None] * np.asarray(cfg.lon_bands, dtype=np.float64)[None, :]
    return np.concatenate(
        [np.sin(lat_phase), np.cos(lat_phase), np.sin(lon_phase), np.cos(lon_phase), depth_n[:, None]],
        axis=1,
    )


def text_embed(description: str) -> np.ndarray:
    """Deterministic unit-norm 64-dim vector derived from a description string.

    A 64-bit hash of the UTF-8 bytes keys a counter-based generator, which
    draws 64 standard normals that are then L2-normalized. Identical strings
    give bit-identical vectors on every platform; a precomputed table from a
    real text model can be loaded instead via load_text_vectors.
    """
    if not description:
        raise DomainError("modality description must be a non-empty string")
    digest = hashlib.blake2b(description.encode("utf-8"), digest_size=8).digest()
    key = int.from_bytes(digest, "little")
    rng = np.random.Generator(np.random.Philox(key=key))
    v = rng.standard_normal(TEXT_VECTOR_DIM)
    return v / np.linalg.norm(v)


def load_text_vectors(path) -> dict[str, np.ndarray]:
    """Read a sidecar CSV of precomputed modality vectors.

    Columns: modality_name, v0..v63. Vectors are returned as float64 arrays,
    not re-normalized.
    """
    vectors: dict[str, np.ndarray] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["modality_name"] + [f"v{i}" for i in range(TEXT_VECTOR_DIM)]
        if header != expected:
            raise SchemaError(f"{path}: expected header modality_name,v0..v{TEXT_VECTOR_DIM - 1}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 1 + TEXT_VECTOR_DIM:
                raise SchemaError(f"{path}:{lineno}: expected {1 + TEXT_VECTOR_DIM} columns, got {len(row)}")
            try:
                vectors[row[0]] = np.array([float(x) for x in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return vectors


def save_text_vectors(path, vectors: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality_name"] + [f"v{i}" for i in range(TEXT_VECTOR_DIM)])
        for name, vec in vectors.items():
            writer.writerow([name] + [repr(float(x)) for x in vec])
