"""Adam optimization, the per-step training flow, logging, and checkpoints.

One training step consumes one sampled scene: encode the fused observations,
decode all queries, route slices to their losses, aggregate the weighted
total, backpropagate, clip the global gradient norm, and apply one Adam
update; gradients are zeroed afterwards. A non-finite loss aborts with a
diagnostic naming the offending modality slice.

Checkpoints are deterministic zip archives: a JSON header (format version,
config, registry, seed, parameter manifest) plus raw little-endian float64
blobs keyed by parameter name, with optimizer moments and the sampler's
random-stream state included when supplied, so a resumed run continues the
unbroken trajectory exactly.

One training step owns the model exclusively; evaluation may run
concurrently on a frozen snapshot or checkpoint copy.
"""

from __future__ import annotations

import json
import time
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter
from .data import SamplerConfig, Scene, SceneSampler
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .losses import LossWeights, slice_by_mod, total_loss
from .model import FieldModel, ModelConfig
from .modalities import ModalityRegistry

CHECKPOINT_FORMAT = "geofield-checkpoint"
CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class Adam:
    """Bias-corrected Adam with optional global-norm gradient clipping."""

    def __init__(self, params: list[Parameter], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = 1.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _clip(self) -> float:
        sq = 0.0
        for p in self.params:
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        norm = float(np.sqrt(sq))
        if self.clip_norm is not None and norm > self.clip_norm > 0:
            scale = self.clip_norm / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> float:
        """Apply one update from accumulated gradients; returns the pre-clip grad norm."""
        norm = self._clip()
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.tensor.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return norm

    def hyperparams(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "clip_norm": self.clip_norm,
            "step_count": self.step_count,
        }


@dataclass
class TrainLog:
    """Per-step records, serializable as JSON lines and replayable."""

    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.append(json.loads(line))
        return log

    def smoothed_loss(self, window: int = 100) -> list[float]:
        losses = [r["loss"] for r in self.records]
        out = []
        for i in range(len(losses)):
            lo = max(0, i - window + 1)
            out.append(float(np.mean(losses[lo:i + 1])))
        return out


def train_step(model: FieldModel, scene: Scene, optimizer: Adam,
               weights: LossWeights | None = None, per_query_loss: bool = False) -> dict:
    """Run one full optimization step on a sampled scene."""
    start = time.perf_counter()
    pred = model.forward(scene.observations, scene.queries)
    groups = slice_by_mod(pred, scene.queries.task_ids, model.registry, scene.queries.targets)
    loss, per_mod = total_loss(groups, weights=weights, per_query=per_query_loss)
    for name, value in per_mod.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss in modality slice {name!r}: {value}")
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite total loss: {value}")
    loss.backward()
    grad_norm = optimizer.step()
    optimizer.zero_grad()
    return {
        "loss": value,
        "per_modality": per_mod,
        "n_modalities": len(scene.observations),
        "n_tokens": scene.n_tokens,
        "n_queries": len(scene.queries),
        "grad_norm": grad_norm,
        "wall_time": time.perf_counter() - start,
    }


def train(model: FieldModel, sampler: SceneSampler, optimizer: Adam, steps: int,
          weights: LossWeights | None = None, per_query_loss: bool = False,
          checkpoint_every: int | None = None, checkpoint_dir=None,
          log_every: int | None = None, start_step: int = 0) -> TrainLog:
    """Drive the step loop; optionally writes periodic checkpoints."""
    log = TrainLog()
    for step in range(start_step, start_step + steps):
        scene = sampler.step()
        record = train_step(model, scene, optimizer, weights=weights, per_query_loss=per_query_loss)
        record["step"] = step
        log.append(record)
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}: loss {record['loss']:.5f}")
        if checkpoint_every and checkpoint_dir is not None and (step + 1) % checkpoint_every == 0:
            save_checkpoint(
                checkpoint_dir / f"step_{step + 1:06d}.ckpt", model,
                optimizer=optimizer, sampler=sampler,
            )
    return log


# -- checkpoint archive ---------------------------------------------------------


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, model: FieldModel, optimizer: Adam | None = None,
                    sampler: SceneSampler | None = None, extra: dict | None = None) -> None:
    """Write a deterministic archive: identical state gives identical bytes."""
    params = [p for p in model.parameters() if p.trainable]
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.config.seed,
        "config": model.config.to_json(),
        "registry": model.registry.to_json(),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
        "optimizer": optimizer.hyperparams() if optimizer is not None else None,
        "sampler": _sampler_state_json(sampler) if sampler is not None else None,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "header.json", payload)
        for p in params:
            _write_entry(zf, f"params/{p.name}", p.data.astype("<f8").tobytes())
        if optimizer is not None:
            for p in params:
                _write_entry(zf, f"opt/m/{p.name}", optimizer.m[p.name].astype("<f8").tobytes())
                _write_entry(zf, f"opt/v/{p.name}", optimizer.v[p.name].astype("<f8").tobytes())


def _sampler_state_json(sampler: SceneSampler) -> dict:
    state = sampler.state()
    return {
        "config": sampler.config.to_json(),
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": state.get("has_uint32", 0),
        "uinteger": state.get("uinteger", 0),
    }


def sampler_state_from_json(obj: dict) -> tuple[SamplerConfig, dict]:
    config = SamplerConfig.from_json(obj["config"])
    state = {
        "bit_generator": obj["bit_generator"],
        "state": {k: int(v) for k, v in obj["state"].items()},
        "has_uint32": int(obj.get("has_uint32", 0)),
        "uinteger": int(obj.get("uinteger", 0)),
    }
    return config, state


@dataclass
class CheckpointBundle:
    model: FieldModel
    optimizer: Adam | None
    sampler_config: SamplerConfig | None
    sampler_state: dict | None
    extra: dict

    def restore_sampler(self, datasets) -> SceneSampler:
        if self.sampler_state is None:
            raise CheckpointError("checkpoint holds no sampler state")
        sampler = SceneSampler(datasets, self.model.registry, self.sampler_config)
        sampler.set_state(self.sampler_state)
        return sampler


def load_checkpoint(path, registry: ModalityRegistry | None = None,
                    text_vectors: dict | None = None) -> CheckpointBundle:
    """Rebuild the model (and optimizer/sampler state if stored) from an archive.

    If a registry is supplied it must match the stored one exactly;
    otherwise the stored registry is used.
    """
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing header.json") from exc
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: format version {header.get('version')} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        stored_registry = ModalityRegistry.from_json(header["registry"])
        if registry is not None and registry != stored_registry:
            raise CheckpointError(
                f"{path}: stored registry {stored_registry.names} does not match "
                f"expected registry {registry.names}"
            )
        config = ModelConfig.from_json(header["config"])
        model = FieldModel(config, stored_registry, text_vectors=text_vectors)
        for entry in header["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in model._store:
                raise CheckpointError(f"{path}: unknown parameter {name!r} in checkpoint")
            try:
                blob = zf.read(f"params/{name}")
            except KeyError as exc:
                raise CheckpointError(f"{path}: missing blob for parameter {name!r}") from exc
            arr = np.frombuffer(blob, dtype="<f8")
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: truncated blob for parameter {name!r}")
            param = model.param(name)
            if param.shape != shape:
                raise CheckpointError(
                    f"{path}: parameter {name!r} shape {shape} does not match model shape {param.shape}"
                )
            param.data = arr.reshape(shape).copy()
        stored_names = {e["name"] for e in header["params"]}
        missing = [p.name for p in model.parameters() if p.trainable and p.name not in stored_names]
        if missing:
            raise CheckpointError(f"{path}: checkpoint lacks parameters {missing}")

        optimizer = None
        if header.get("optimizer") is not None:
            hp = header["optimizer"]
            optimizer = Adam(
                model.parameters(), lr=hp["lr"], beta1=hp["beta1"], beta2=hp["beta2"],
                eps=hp["eps"], clip_norm=hp["clip_norm"],
            )
            optimizer.step_count = int(hp["step_count"])
            for p in optimizer.params:
                optimizer.m[p.name] = np.frombuffer(zf.read(f"opt/m/{p.name}"), dtype="<f8").reshape(p.shape).copy()
                optimizer.v[p.name] = np.frombuffer(zf.read(f"opt/v/{p.name}"), dtype="<f8").reshape(p.shape).copy()

        sampler_config = sampler_state = None
        if header.get("sampler") is not None:
            sampler_config, sampler_state = sampler_state_from_json(header["sampler"])

    return CheckpointBundle(
        model=model,
        optimizer=optimizer,
        sampler_config=sampler_config,
        sampler_state=sampler_state,
        extra=header.get("extra", {}),
    )
