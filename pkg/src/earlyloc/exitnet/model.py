"""Multi-exit CNN: backbone, exit branches, exit policy and conditional inference."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from ..tensornn import (
    LayerSpec,
    ShapeError,
    WeightStore,
    check_weights,
    conv,
    dense,
    depthwise,
    flatten,
    forward,
    infer_shapes,
    init_weights,
    layer_blocks,
    layer_macs,
    layer_params,
    maxpool,
    pointwise,
    relu,
    softmax,
)
from ..tensornn import ops
from ..tensornn.serialize import ModelFormatError, read_model, write_model
from .uncertainty import UncertaintyMethod, check_threshold, exit_decision, uncertainty_score

PIXEL_SCALE = 1.0 / 255.0


@dataclass(frozen=True)
class ExitBranch:
    """Side head attached to the output of backbone layer ``attach``."""

    name: str
    attach: str
    layers: tuple[LayerSpec, ...]
    enabled: bool = True
    method: UncertaintyMethod = UncertaintyMethod.MARGIN
    theta: float = 0.8

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "attach": self.attach,
            "layers": [layer.to_dict() for layer in self.layers],
            "enabled": self.enabled,
            "method": self.method.value,
            "theta": self.theta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExitBranch":
        return cls(
            name=d["name"],
            attach=d["attach"],
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            enabled=bool(d.get("enabled", True)),
            method=UncertaintyMethod.parse(d.get("method", "margin")),
            theta=float(d.get("theta", 0.8)),
        )


@dataclass(frozen=True)
class ExitSetting:
    enabled: bool
    method: UncertaintyMethod = UncertaintyMethod.MARGIN
    theta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", UncertaintyMethod.parse(self.method))
        if self.enabled:
            if self.theta is None:
                raise ValueError("an enabled exit needs a threshold")
            check_threshold(self.method, self.theta)


@dataclass(frozen=True)
class ExitPolicy:
    """Per-exit switch, uncertainty method and threshold, in depth order."""

    settings: tuple[ExitSetting, ...]

    def __len__(self) -> int:
        return len(self.settings)

    def __getitem__(self, i: int) -> ExitSetting:
        return self.settings[i]

    def __iter__(self):
        return iter(self.settings)

    @classmethod
    def all_off(cls, n_exits: int) -> "ExitPolicy":
        return cls(tuple(ExitSetting(False) for _ in range(n_exits)))

    @classmethod
    def uniform(cls, n_exits: int, method, theta: float, enabled: Sequence[bool] | None = None) -> "ExitPolicy":
        """Same method and threshold on every enabled exit."""
        enabled = [True] * n_exits if enabled is None else list(enabled)
        if len(enabled) != n_exits:
            raise ValueError(f"mask length {len(enabled)} != {n_exits} exits")
        return cls(tuple(
            ExitSetting(True, method, theta) if on else ExitSetting(False, method)
            for on in enabled
        ))

    @property
    def enabled(self) -> tuple[bool, ...]:
        return tuple(s.enabled for s in self.settings)

    @property
    def n_enabled(self) -> int:
        return sum(self.enabled)

    def label(self) -> str:
        parts = []
        for i, s in enumerate(self.settings, start=1):
            parts.append(f"e{i}={s.method.value}:{s.theta:g}" if s.enabled else f"e{i}=off")
        return ",".join(parts)

    def to_dict(self) -> dict:
        return {"exits": [
            {"enabled": s.enabled, "method": s.method.value, "theta": s.theta}
            for s in self.settings
        ]}

    @classmethod
    def from_dict(cls, d: dict) -> "ExitPolicy":
        return cls(tuple(
            ExitSetting(bool(e["enabled"]), e.get("method", "margin"), e.get("theta"))
            for e in d["exits"]
        ))


@dataclass
class InferenceTrace:
    exit_index: int | None  # None when the final head answered
    scores: list[tuple[int, float]]  # (exit index, score) for each attempted exit
    predicted: int
    macs: int
    wall_ns: int
    probs: np.ndarray | None = field(default=None, repr=False)

    @property
    def exit_taken(self) -> int | str:
        return "final" if self.exit_index is None else self.exit_index


class MultiExitModel:
    """Backbone (ending in the final head) plus ordered exit branches.

    Layer names are unique across the backbone and all branches, so one
    :class:`WeightStore` holds every block.
    """

    def __init__(
        self,
        input_shape: tuple[int, int, int],
        backbone: Sequence[LayerSpec],
        exits: Sequence[ExitBranch],
        n_classes: int,
        weights: WeightStore | None = None,
        wap_index: Sequence[str] | None = None,
        coords: np.ndarray | None = None,
        input_scale: float = PIXEL_SCALE,
        meta: dict | None = None,
    ):
        self.input_shape = tuple(input_shape)
        self.backbone = tuple(backbone)
        self.exits = tuple(exits)
        self.n_classes = n_classes
        self.weights = weights
        self.wap_index = tuple(wap_index) if wap_index is not None else None
        self.coords = coords
        self.input_scale = input_scale
        self.meta = dict(meta or {})
        self.meta.setdefault("trained", {"baseline": False, "exits": [False] * len(self.exits)})
        self._validate()

    def _validate(self) -> None:
        names = [layer.name for layer in self.backbone]
        for branch in self.exits:
            names += [layer.name for layer in branch.layers]
        if len(set(names)) != len(names):
            raise ShapeError("layer names must be unique across backbone and branches")
        if not self.backbone or self.backbone[-1].kind != "softmax":
            raise ShapeError("backbone must end in the final softmax head")
        shapes = infer_shapes(self.backbone, self.input_shape)
        if shapes[-1][1] != (self.n_classes,):
            raise ShapeError(f"final head outputs {shapes[-1][1]}, expected ({self.n_classes},)")
        depth = -1
        for branch in self.exits:
            idx = self.attach_index(branch)
            if idx <= depth:
                raise ShapeError("exits must be ordered by attachment depth")
            if idx >= len(self.backbone) - 1:
                raise ShapeError(f"exit {branch.name} attaches at or after the final head")
            depth = idx
            if not branch.layers or branch.layers[-1].kind != "softmax":
                raise ShapeError(f"exit {branch.name} must end in softmax")
            out = infer_shapes(branch.layers, shapes[idx][1])[-1][1]
            if out != (self.n_classes,):
                raise ShapeError(f"exit {branch.name} outputs {out}, expected ({self.n_classes},)")
        if self.weights is not None:
            check_weights(self.backbone, self.input_shape, self.weights)
            for branch in self.exits:
                check_weights(branch.layers, self.branch_input_shape(branch), self.weights)

    # -- structure -------------------------------------------------------

    def attach_index(self, branch: ExitBranch) -> int:
        for i, layer in enumerate(self.backbone):
            if layer.name == branch.attach:
                return i
        raise ShapeError(f"exit {branch.name}: no backbone layer named {branch.attach!r}")

    @cached_property
    def _backbone_shapes(self):
        return infer_shapes(self.backbone, self.input_shape)

    def branch_input_shape(self, branch: ExitBranch) -> tuple[int, ...]:
        return self._backbone_shapes[self.attach_index(branch)][1]

    @cached_property
    def segments(self) -> list[tuple[int, int]]:
        """Backbone index ranges: one per exit (ending at its attachment) plus the tail."""
        bounds, start = [], 0
        for branch in self.exits:
            end = self.attach_index(branch) + 1
            bounds.append((start, end))
            start = end
        bounds.append((start, len(self.backbone)))
        return bounds

    @cached_property
    def segment_macs(self) -> list[int]:
        shapes = self._backbone_shapes
        return [
            sum(layer_macs(self.backbone[i], shapes[i][0]) for i in range(a, b))
            for a, b in self.segments
        ]

    @cached_property
    def branch_macs(self) -> list[int]:
        out = []
        for branch in self.exits:
            shapes = infer_shapes(branch.layers, self.branch_input_shape(branch))
            out.append(sum(layer_macs(layer, s[0]) for layer, s in zip(branch.layers, shapes)))
        return out

    @property
    def baseline_macs(self) -> int:
        return sum(self.segment_macs)

    def path_macs(self, exit_index: int | None, enabled: Sequence[bool]) -> int:
        """MACs for a sample leaving at ``exit_index`` (None = final head)."""
        n = len(self.exits)
        last = n if exit_index is None else exit_index
        macs = sum(self.segment_macs[: last + 1])
        return macs + sum(self.branch_macs[i] for i in range(min(last + 1, n)) if enabled[i])

    def param_table(self) -> dict[str, int]:
        """Trainable parameters per layer, in execution depth order."""
        table: dict[str, int] = {}
        shapes = self._backbone_shapes
        pending = {self.attach_index(b): b for b in self.exits}
        for i, layer in enumerate(self.backbone):
            if layer.trainable:
                table[layer.name] = layer_params(layer, shapes[i][0])
            if i in pending:
                branch = pending[i]
                bshapes = infer_shapes(branch.layers, shapes[i][1])
                for bl, bs in zip(branch.layers, bshapes):
                    if bl.trainable:
                        table[bl.name] = layer_params(bl, bs[0])
        return table

    def backbone_params(self) -> int:
        shapes = self._backbone_shapes
        return sum(layer_params(layer, s[0]) for layer, s in zip(self.backbone, shapes))

    def branch_params(self, i: int) -> int:
        branch = self.exits[i]
        shapes = infer_shapes(branch.layers, self.branch_input_shape(branch))
        return sum(layer_params(layer, s[0]) for layer, s in zip(branch.layers, shapes))

    def backbone_blocks(self) -> list[str]:
        return layer_blocks(self.backbone)

    def branch_blocks(self, i: int) -> list[str]:
        return layer_blocks(self.exits[i].layers)

    def default_policy(self) -> ExitPolicy:
        return ExitPolicy(tuple(ExitSetting(b.enabled, b.method, b.theta) for b in self.exits))

    # -- weights ---------------------------------------------------------

    def init_weights(self, seed: int = 0, dtype=np.float32) -> "MultiExitModel":
        rng = np.random.default_rng(seed)
        store = init_weights(self.backbone, self.input_shape, rng, dtype)
        for branch in self.exits:
            init_weights(branch.layers, self.branch_input_shape(branch), rng, dtype, store)
        self.weights = store
        return self

    def _require_weights(self) -> WeightStore:
        if self.weights is None:
            raise ValueError("model has no weights; call init_weights() or load a trained model")
        return self.weights

    # -- inference -------------------------------------------------------

    def prepare(self, image) -> np.ndarray:
        """Scale one pixel image (side, side[, 1]) to a float32 batch of one."""
        x = np.asarray(image, dtype=np.float32)
        if x.ndim == 2:
            x = x[..., None]
        if x.ndim == 4 and x.shape[0] == 1:
            x = x[0]
        if x.shape != self.input_shape:
            raise ShapeError(f"image shape {x.shape} does not match model input {self.input_shape}")
        return np.ascontiguousarray(x[None] * np.float32(self.input_scale))

    def baseline_logits(self, image) -> np.ndarray:
        """Final-head logits from the plain backbone, no exits involved."""
        w = self._require_weights()
        return forward(self.backbone[:-1], w, self.prepare(image))[0]

    def baseline_predict(self, images: np.ndarray) -> np.ndarray:
        return np.array([int(np.argmax(self.baseline_logits(im))) for im in images], dtype=np.int64)


def _head_probs(logits: np.ndarray) -> np.ndarray:
    # float64 keeps near-one-hot outputs from collapsing to exact 0/1
    return ops.softmax(logits.astype(np.float64))


def _run_exits(model: MultiExitModel, policy: ExitPolicy, image):
    if len(policy) != len(model.exits):
        raise ValueError(f"policy has {len(policy)} entries, model has {len(model.exits)} exits")
    w = model._require_weights()
    t0 = time.perf_counter_ns()
    x = model.prepare(image)
    macs = 0
    scores: list[tuple[int, float]] = []
    for i, (start, end) in enumerate(model.segments[:-1]):
        x = forward(model.backbone[start:end], w, x)
        macs += model.segment_macs[i]
        setting = policy[i]
        if not setting.enabled:
            continue
        logits = forward(model.exits[i].layers[:-1], w, x)[0]
        macs += model.branch_macs[i]
        probs = _head_probs(logits)
        score = uncertainty_score(probs, setting.method)
        scores.append((i, score))
        if exit_decision(score, setting.method, setting.theta):
            return logits, probs, InferenceTrace(
                i, scores, int(np.argmax(probs)), macs, time.perf_counter_ns() - t0)
    start, end = model.segments[-1]
    logits = forward(model.backbone[start:end - 1], w, x)[0]
    macs += model.segment_macs[-1]
    probs = _head_probs(logits)
    return logits, probs, InferenceTrace(
        None, scores, int(np.argmax(probs)), macs, time.perf_counter_ns() - t0)


def infer_with_exits(model: MultiExitModel, policy: ExitPolicy, image, keep_probs: bool = False):
    """Run the early-exit state machine on one pixel image.

    Stages run in depth order; after each stage with an enabled exit the
    branch scores its softmax output and the sample leaves if the exit test
    passes. Disabled exits cost nothing. Returns ``(predicted_class, trace)``.
    """
    _, probs, trace = _run_exits(model, policy, image)
    if keep_probs:
        trace.probs = probs
    return trace.predicted, trace


def infer_logits_with_exits(model: MultiExitModel, policy: ExitPolicy, image) -> tuple[np.ndarray, InferenceTrace]:
    """Logits of the answering head together with the trace."""
    logits, _, trace = _run_exits(model, policy, image)
    return logits, trace


# -- builders ------------------------------------------------------------


def build_reference_model(
    classes: int = 342,
    input_side: int = 30,
    filters: tuple[int, int, int] = (32, 64, 128),
    branch_filters: int = 8,
    wap_index: Sequence[str] | None = None,
    seed: int | None = 0,
) -> MultiExitModel:
    """Three 2x2 valid conv stages, an output-only exit after stage 1 and a
    conv+output exit after stage 2.

    Pass ``seed=None`` to skip weight allocation (structure and counts only).
    """
    f1, f2, f3 = filters
    backbone = [
        conv("conv2d_1", f1), relu("relu_1"),
        conv("conv2d_2", f2), relu("relu_2"),
        conv("conv2d_3", f3), relu("relu_3"),
        flatten("flatten"), dense("output", classes), softmax("softmax"),
    ]
    exits = [
        ExitBranch("eea1", "relu_1", (
            flatten("eea1_flatten"), dense("eea1_output", classes), softmax("eea1_softmax"),
        )),
        ExitBranch("eea2", "relu_2", (
            conv("conv2d_4", branch_filters), relu("relu_4"),
            flatten("eea2_flatten"), dense("eea2_output", classes), softmax("eea2_softmax"),
        )),
    ]
    model = MultiExitModel((input_side, input_side, 1), backbone, exits, classes,
                           wap_index=wap_index, meta={"arch": "reference"})
    if seed is not None:
        model.init_weights(seed)
    return model


def build_depth_baseline(
    depth: int,
    classes: int,
    input_side: int,
    filters: Sequence[int] = (32, 64, 128),
    seed: int | None = 0,
) -> MultiExitModel:
    """Exit-free baseline with the first ``depth`` conv stages of the reference model."""
    if not 1 <= depth <= len(filters):
        raise ValueError(f"depth must lie in [1, {len(filters)}]")
    backbone: list[LayerSpec] = []
    for i in range(depth):
        backbone += [conv(f"conv2d_{i + 1}", filters[i]), relu(f"relu_{i + 1}")]
    backbone += [flatten("flatten"), dense("output", classes), softmax("softmax")]
    model = MultiExitModel((input_side, input_side, 1), backbone, [], classes,
                           meta={"arch": f"depth{depth}"})
    if seed is not None:
        model.init_weights(seed)
    return model


@dataclass(frozen=True)
class DscpConfig:
    """Stem convolution followed by depthwise/pointwise pairs."""

    stem_filters: int = 32
    pointwise_filters: tuple[int, ...] = (64, 64)
    kernel: int = 2

    def __post_init__(self):
        if self.stem_filters < 1 or not self.pointwise_filters or min(self.pointwise_filters) < 1:
            raise ValueError("DSCP needs a stem and at least one depthwise/pointwise pair")
        if self.kernel < 1:
            raise ValueError("kernel must be >= 1")


def build_dscp_variant(
    classes: int = 342,
    input_side: int = 30,
    config: DscpConfig = DscpConfig(),
    seed: int | None = 0,
) -> MultiExitModel:
    k = config.kernel
    backbone = [conv("conv2d_1", config.stem_filters, k), relu("relu_1")]
    for i, f in enumerate(config.pointwise_filters, start=1):
        backbone += [
            depthwise(f"dw_{i}", k), relu(f"dw_relu_{i}"),
            pointwise(f"pw_{i}", f), relu(f"pw_relu_{i}"),
        ]
    backbone += [flatten("flatten"), dense("output", classes), softmax("softmax")]
    exits = [ExitBranch("ee1", "relu_1", (
        flatten("ee1_flatten"), dense("ee1_output", classes), softmax("ee1_softmax"),
    ), method=UncertaintyMethod.ENTROPY, theta=0.03)]
    model = MultiExitModel((input_side, input_side, 1), backbone, exits, classes,
                           meta={"arch": "dscp"})
    if seed is not None:
        model.init_weights(seed)
    return model


@dataclass(frozen=True)
class UjiConfig:
    """Conv/pool stages, one hidden dense layer, and an exit after stage 1."""

    conv_filters: tuple[int, ...] = (32, 64)
    kernel: int = 2
    pool: int = 2
    hidden: int = 128

    def __post_init__(self):
        if not self.conv_filters or min(self.conv_filters) < 1 or self.hidden < 1:
            raise ValueError("invalid UJIndoorLoc model configuration")


def build_ujiloc_variant(
    classes: int = 13,
    input_side: int = 23,
    config: UjiConfig = UjiConfig(),
    seed: int | None = 0,
) -> MultiExitModel:
    backbone: list[LayerSpec] = []
    for i, f in enumerate(config.conv_filters, start=1):
        backbone += [conv(f"conv2d_{i}", f, config.kernel), relu(f"relu_{i}"),
                     maxpool(f"pool_{i}", config.pool)]
    backbone += [
        flatten("flatten"), dense("fc_1", config.hidden), relu("fc_relu"),
        dense("output", classes), softmax("softmax"),
    ]
    exits = [ExitBranch("ee1", "pool_1", (
        flatten("ee1_flatten"), dense("ee1_output", classes), softmax("ee1_softmax"),
    ), method=UncertaintyMethod.ENTROPY, theta=0.03)]
    model = MultiExitModel((input_side, input_side, 1), backbone, exits, classes,
                           meta={"arch": "ujiloc"})
    if seed is not None:
        model.init_weights(seed)
    return model


# -- persistence ---------------------------------------------------------


def save_model(model: MultiExitModel, path: str | Path) -> Path:
    w = model._require_weights()
    names = model.backbone_blocks()
    for i in range(len(model.exits)):
        names += model.branch_blocks(i)
    manifest = {
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "input_scale": model.input_scale,
        "wap_index": list(model.wap_index) if model.wap_index is not None else None,
        "coords": None if model.coords is None else [
            [None if np.isnan(v) else float(v) for v in row] for row in model.coords
        ],
        "layers": [layer.to_dict() for layer in model.backbone],
        "exits": [b.to_dict() for b in model.exits],
        "meta": model.meta,
    }
    return write_model(path, manifest, [(n, w[n]) for n in names])


def load_model(path: str | Path) -> MultiExitModel:
    doc, blocks = read_model(path)
    try:
        coords = doc.get("coords")
        model = MultiExitModel(
            input_shape=tuple(doc["input_shape"]),
            backbone=[LayerSpec.from_dict(x) for x in doc["layers"]],
            exits=[ExitBranch.from_dict(x) for x in doc.get("exits", [])],
            n_classes=int(doc["n_classes"]),
            weights=WeightStore(blocks),
            wap_index=doc.get("wap_index"),
            coords=None if coords is None else np.array(
                [[np.nan if v is None else v for v in row] for row in coords], dtype=np.float64),
            input_scale=float(doc.get("input_scale", PIXEL_SCALE)),
            meta=doc.get("meta"),
        )
    except KeyError as exc:
        raise ModelFormatError(f"{path}: manifest missing {exc}") from None
    return model
