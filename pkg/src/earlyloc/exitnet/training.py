"""Baseline training and frozen-backbone exit-branch training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..fingerprint import LabeledDataset
from ..tensornn import predict, train_sgd
from .model import MultiExitModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid hyperparameters {self}")


class TrainingOrderError(RuntimeError):
    """A training step was requested before its prerequisite."""


def model_inputs(model: MultiExitModel, dataset: LabeledDataset) -> np.ndarray:
    """Scaled float32 image batch for ``dataset``, checked against the model input."""
    if model.wap_index is not None and tuple(dataset.wap_index) != tuple(model.wap_index):
        raise ValueError("dataset WAP order differs from the model's WAP index")
    x = dataset.images()
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"dataset images {x.shape[1:]} do not match model input {model.input_shape}")
    return np.ascontiguousarray(x * np.float32(model.input_scale))


def train_baseline(model: MultiExitModel, dataset: LabeledDataset, hp: HyperParams = HyperParams()) -> list[float]:
    """Train backbone and final head together; exit branches are not touched.

    Returns the mean loss per epoch.
    """
    w = model._require_weights()
    x = model_inputs(model, dataset)
    history = train_sgd(
        model.backbone, w, x, dataset.labels,
        lr=hp.lr, epochs=hp.epochs, batch_size=hp.batch_size, seed=hp.seed,
        trainable=[b for b in model.backbone_blocks() if b not in w.frozen],
    )
    model.meta["trained"]["baseline"] = True
    model.meta["trained"]["exits"] = [False] * len(model.exits)
    model.meta.setdefault("training", {})["baseline"] = {
        **asdict(hp), "final_loss": history[-1] if history else None,
    }
    return history


def branch_features(model: MultiExitModel, i: int, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Backbone activations at exit ``i``'s attachment point."""
    w = model._require_weights()
    stop = model.attach_index(model.exits[i]) + 1
    return predict(model.backbone[:stop], w, x, batch_size)


def train_exit_branch(
    model: MultiExitModel,
    i: int,
    dataset: LabeledDataset,
    hp: HyperParams = HyperParams(),
) -> list[float]:
    """Train exit ``i`` on the class labels with every other block frozen.

    Backbone activations at the attachment point are computed once and reused
    each epoch, since the frozen layers cannot change them.
    """
    trained = model.meta["trained"]
    if not trained.get("baseline"):
        raise TrainingOrderError("train the baseline before any exit branch")
    if not all(trained["exits"][:i]):
        raise TrainingOrderError(f"exits shallower than {i} must be trained first")
    w = model._require_weights()
    branch_blocks = set(model.branch_blocks(i))
    others = [name for name in w.keys() if name not in branch_blocks]
    before = w.checksum(others)
    saved_frozen = set(w.frozen)
    w.freeze(others)
    try:
        feats = branch_features(model, i, model_inputs(model, dataset))
        history = train_sgd(
            model.exits[i].layers, w, feats, dataset.labels,
            lr=hp.lr, epochs=hp.epochs, batch_size=hp.batch_size, seed=hp.seed,
        )
    finally:
        w.frozen = saved_frozen
    if w.checksum(others) != before:
        raise RuntimeError("frozen blocks changed during branch training")
    trained["exits"][i] = True
    model.meta.setdefault("training", {})[model.exits[i].name] = {
        **asdict(hp), "final_loss": history[-1] if history else None,
    }
    return history


def train_all_exits(model: MultiExitModel, dataset: LabeledDataset, hp: HyperParams = HyperParams()) -> list[list[float]]:
    return [train_exit_branch(model, i, dataset, hp) for i in range(len(model.exits))]


def head_accuracy(model: MultiExitModel, dataset: LabeledDataset, head: int | None = None) -> float:
    """Top-1 accuracy of one head (exit index, or None for the final head) on ``dataset``."""
    w = model._require_weights()
    x = model_inputs(model, dataset)
    if head is None:
        out = predict(model.backbone, w, x)
    else:
        feats = branch_features(model, head, x)
        out = predict(model.exits[head].layers, w, feats)
    return float((out.argmax(axis=1) == dataset.labels).mean())


__all__ = [
    "HyperParams",
    "TrainingOrderError",
    "branch_features",
    "head_accuracy",
    "model_inputs",
    "train_all_exits",
    "train_baseline",
    "train_exit_branch",
]
