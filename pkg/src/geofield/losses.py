"""Modality-routed losses and the weighted total loss.

Angular regression uses a periodic squared loss on denormalized degrees;
other regression trains with mean squared error on the normalized scale;
classification uses cross-entropy over the modality's logit slice. The
total loss is the weighted mean of per-modality mean losses over the
modalities that contributed queries this step (a literal per-query
aggregation is available behind a flag). All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DomainError, RoutingError
from .modalities import ModalityRegistry, ModalitySpec, TASK_ANGULAR, TASK_CLASS, TASK_SCALAR

ANGULAR_WEIGHT = 20.0
MANTLE_TEMPERATURE_WEIGHT = 10.0


@dataclass
class LossWeights:
    """Per-modality weights: angular tasks get `angular`, named overrides win."""

    angular: float = ANGULAR_WEIGHT
    default: float = 1.0
    overrides: dict = field(default_factory=lambda: {"mantle_temperature": MANTLE_TEMPERATURE_WEIGHT})

    def __post_init__(self):
        for w in (self.angular, self.default, *self.overrides.values()):
            if w <= 0:
                raise ConfigError(f"loss weights must be strictly positive, got {w}")

    def weight(self, spec: ModalitySpec) -> float:
        if spec.name in self.overrides:
            return float(self.overrides[spec.name])
        if spec.task_kind == TASK_ANGULAR:
            return float(self.angular)
        return float(self.default)


def angular_loss(pred_deg, true_deg, period: float) -> Tensor:
    """Mean squared wrapped angular error, normalized to [0, 1].

    The prediction-truth difference is wrapped into [-period/2, period/2)
    via modular arithmetic and divided by period/2 before squaring. The
    wrap set has measure zero; its subgradient comes from the left branch.
    """
    if period not in (180.0, 360.0):
        raise ConfigError(f"angular period must be 180 or 360 degrees, got {period}")
    pred = ad.as_tensor(pred_deg)
    true = ad.as_tensor(true_deg)
    shifted = pred - true + period / 2.0
    wrapped = shifted - ad.floor_detached(shifted * (1.0 / period)) * period - period / 2.0
    unit = wrapped * (2.0 / period)
    return (unit * unit).mean()


def mse_loss(pred, target) -> Tensor:
    diff = ad.as_tensor(pred) - ad.as_tensor(target)
    return (diff * diff).mean()


def mae_loss(pred, target) -> Tensor:
    return ad.absolute(ad.as_tensor(pred) - ad.as_tensor(target)).mean()


def cross_entropy(logits, class_indices) -> Tensor:
    """Mean negative log-probability of the true class (log-sum-exp stabilized)."""
    logits = ad.as_tensor(logits)
    idx = np.asarray(class_indices, dtype=np.int64)
    width = logits.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= width):
        raise DomainError(f"class index out of range [0, {width})")
    return ad.cross_entropy_with_logits(logits, idx)


@dataclass
class ModalitySlice:
    """One modality's share of a prediction batch."""

    spec: ModalitySpec
    task_id: int
    rows: np.ndarray       # query indices belonging to this modality
    pred: Tensor           # (k, output_width) slice of the shared head
    targets: np.ndarray    # (k, output_width for classes, else 1) normalized


def slice_by_mod(pred: Tensor, task_ids, registry: ModalityRegistry, targets) -> list[ModalitySlice]:
    """Route each query's output-head slice and target to its modality.

    Returns one group per modality that has at least one query, in registry
    order. Task ids outside the registry raise a routing error.
    """
    ids = np.asarray(task_ids, dtype=np.int64)
    if pred.shape[0] != ids.shape[0]:
        raise ContractError(f"{pred.shape[0]} prediction rows vs {ids.shape[0]} task ids")
    if pred.shape[1] != registry.out_dim:
        raise ContractError(f"prediction width {pred.shape[1]} != registry out_dim {registry.out_dim}")
    if ids.size and (ids.min() < 0 or ids.max() >= len(registry)):
        bad = ids[(ids < 0) | (ids >= len(registry))][0]
        raise RoutingError(f"task id {bad} has no slice in the output layout")
    groups = []
    for task_id, (name, offset, width) in enumerate(registry.output_layout()):
        rows = np.flatnonzero(ids == task_id)
        if rows.size == 0:
            continue
        spec = registry[task_id]
        rows_pred = ad.gather_rows(pred, rows)
        sliced = ad.narrow(rows_pred, 1, offset, width)
        target_rows = np.stack([np.asarray(targets[i], dtype=np.float64) for i in rows])
        groups.append(ModalitySlice(spec=spec, task_id=task_id, rows=rows, pred=sliced, targets=target_rows))
    return groups


def modality_loss(group: ModalitySlice) -> Tensor:
    """The training loss for one modality group (a mean over its queries)."""
    spec = group.spec
    if spec.task_kind == TASK_ANGULAR:
        scale = float(spec.normalizer) if spec.normalizer != "identity" else 1.0
        pred_deg = group.pred.reshape((len(group.rows),)) * scale
        true_deg = group.targets.reshape(-1) * scale
        return angular_loss(pred_deg, true_deg, spec.angular_period)
    if spec.task_kind == TASK_SCALAR:
        return mse_loss(group.pred, group.targets)
    labels = np.argmax(group.targets, axis=1)
    return cross_entropy(group.pred, labels)


def total_loss(groups: list[ModalitySlice], weights: LossWeights | None = None,
               per_query: bool = False) -> tuple[Tensor, dict[str, float]]:
    """Weighted aggregate of per-modality losses.

    Default: mean over contributing modalities of weight * per-modality mean.
    With per_query=True, every query's loss term enters one global average
    instead (weights still applied), which differs when query counts are
    unbalanced across modalities.

    Returns the scalar loss tensor and a per-modality float map for logging.
    """
    weights = weights or LossWeights()
    if not groups:
        raise ContractError("total_loss needs at least one contributing modality")
    per_mod: dict[str, float] = {}
    terms = []
    counts = []
    for group in groups:
        loss = modality_loss(group)
        per_mod[group.spec.name] = loss.item()
        terms.append(loss * weights.weight(group.spec))
        counts.append(len(group.rows))
    if per_query:
        total_queries = sum(counts)
        acc = terms[0] * (counts[0] / total_queries)
        for term, k in zip(terms[1:], counts[1:]):
            acc = acc + term * (k / total_queries)
        return acc, per_mod
    acc = terms[0]
    for term in terms[1:]:
        acc = acc + term
    return acc * (1.0 / len(terms)), per_mod
