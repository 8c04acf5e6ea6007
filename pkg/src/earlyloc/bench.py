"""Measurement harness: threshold sweeps, depth study, timing and CSV export."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibrate import evaluate_config
from .exitnet import (
    ExitPolicy,
    HyperParams,
    MultiExitModel,
    UncertaintyMethod,
    build_depth_baseline,
    check_threshold,
    infer_with_exits,
    train_baseline,
    train_exit_branch,
)
from .fingerprint import LabeledDataset, top1_accuracy

WARMUP_ITERATIONS = 10
Z_95 = 1.96


def theta_range(start: float, stop: float, step: float) -> tuple[float, ...]:
    """Inclusive arithmetic grid ``start, start+step, ... <= stop``."""
    if step <= 0:
        raise ValueError("step must be > 0")
    if start > stop:
        raise ValueError("start must be <= stop")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(round(start + k * step, 10) for k in range(count))


@dataclass(frozen=True)
class SweepSpec:
    method: UncertaintyMethod
    thetas: tuple[float, ...]
    enabled: tuple[bool, ...] | None = None  # None: every exit on

    def __post_init__(self):
        object.__setattr__(self, "method", UncertaintyMethod.parse(self.method))
        if not self.thetas:
            raise ValueError("empty threshold range")
        for t in self.thetas:
            check_threshold(self.method, t)

    @classmethod
    def from_range(cls, method, start: float, stop: float, step: float, enabled=None) -> "SweepSpec":
        return cls(method, theta_range(start, stop, step), None if enabled is None else tuple(enabled))


@dataclass
class CurvePoint:
    theta: float
    method: str
    accuracy: float
    error_m: float | None
    mean_macs: float
    mean_ns: float
    exit_rates: tuple[float, ...]  # per exit, final head last

    def as_row(self) -> dict:
        row = {
            "theta": self.theta, "method": self.method, "accuracy": self.accuracy,
            "error_m": self.error_m, "mean_macs": self.mean_macs, "mean_ns": self.mean_ns,
        }
        for i, r in enumerate(self.exit_rates[:-1], start=1):
            row[f"exit{i}_rate"] = r
        row["final_rate"] = self.exit_rates[-1]
        return row


def sweep_threshold(model: MultiExitModel, spec: SweepSpec, dataset: LabeledDataset) -> list[CurvePoint]:
    """Evaluate every threshold (same value on each enabled exit), in grid order."""
    enabled = spec.enabled if spec.enabled is not None else (True,) * len(model.exits)
    images = dataset.images()
    points = []
    for theta in spec.thetas:
        policy = ExitPolicy.uniform(len(model.exits), spec.method, theta, enabled)
        r = evaluate_config(model, policy, dataset, images)
        points.append(CurvePoint(theta, spec.method.value, r.accuracy, r.error_m,
                                 r.mean_macs, r.mean_ns, r.exit_rates))
    return points


@dataclass
class DepthResult:
    depth: int
    accuracy: float
    macs: int
    mean_ns: float

    def as_row(self) -> dict:
        return {"depth": self.depth, "accuracy": self.accuracy, "macs": self.macs, "mean_ns": self.mean_ns}


def depth_study(
    depths: Sequence[int],
    train: LabeledDataset,
    test: LabeledDataset,
    hp: HyperParams = HyperParams(),
    filters: Sequence[int] = (32, 64, 128),
    timing_samples: int = 200,
) -> list[DepthResult]:
    """Train and evaluate exit-free baselines of increasing conv depth on the same data."""
    results = []
    for depth in depths:
        model = build_depth_baseline(depth, train.n_classes, train.image_side, filters, seed=hp.seed)
        model.wap_index = train.wap_index
        train_baseline(model, train, hp)
        images = test.images()
        preds = model.baseline_predict(images)
        stats = time_inference(model, ExitPolicy.all_off(0), test, repetitions=3,
                               max_samples=timing_samples)
        results.append(DepthResult(depth, top1_accuracy(preds, test.labels),
                                   model.baseline_macs, stats.mean_ns))
    return results


@dataclass
class TimingStats:
    label: str
    mean_ns: float
    ci95_ns: float
    std_ns: float
    n: int
    samples_ns: list[float] = field(default_factory=list, repr=False)

    def as_row(self) -> dict:
        return {"policy": self.label, "mean_ns": self.mean_ns, "ci95_ns": self.ci95_ns, "n": self.n}


def ci95_halfwidth(values: Sequence[float]) -> float:
    if len(values) < 2:
        raise ValueError("need at least 2 repetitions for a confidence interval")
    return Z_95 * statistics.stdev(values) / math.sqrt(len(values))


def time_inference(
    model: MultiExitModel,
    policy: ExitPolicy,
    dataset: LabeledDataset,
    repetitions: int = 30,
    warmup: int = WARMUP_ITERATIONS,
    max_samples: int | None = None,
) -> TimingStats:
    """Per-sample wall-clock of :func:`infer_with_exits`.

    Each repetition is one pass over the (possibly truncated) dataset and
    contributes its mean per-sample time; the 95% interval is over
    repetitions. Warm-up inferences are not timed.
    """
    if len(dataset) == 0:
        raise ValueError("cannot time an empty dataset")
    if repetitions < 2:
        raise ValueError("need at least 2 repetitions for a confidence interval")
    images = dataset.images()
    if max_samples is not None:
        images = images[:max_samples]
    for k in range(warmup):
        infer_with_exits(model, policy, images[k % len(images)])
    per_rep = []
    clock = time.perf_counter_ns
    for _ in range(repetitions):
        t0 = clock()
        for image in images:
            infer_with_exits(model, policy, image)
        per_rep.append((clock() - t0) / len(images))
    return TimingStats(
        label=policy.label() if len(policy) else "baseline",
        mean_ns=statistics.fmean(per_rep),
        ci95_ns=ci95_halfwidth(per_rep),
        std_ns=statistics.stdev(per_rep),
        n=repetitions,
        samples_ns=per_rep,
    )


SWEEP_COLUMNS = ("theta", "method", "accuracy", "error_m", "mean_macs", "mean_ns")
DEPTH_COLUMNS = ("depth", "accuracy", "macs", "mean_ns")
TIMING_COLUMNS = ("policy", "mean_ns", "ci95_ns", "n")


def sweep_columns(n_exits: int) -> list[str]:
    return list(SWEEP_COLUMNS) + [f"exit{i}_rate" for i in range(1, n_exits + 1)] + ["final_rate"]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(records: Sequence, path: str | Path, columns: Sequence[str] | None = None) -> Path:
    """Write records (objects with ``as_row()``) as CSV with a stable column order.

    ``columns`` is required for an empty list. Floats use ``repr`` and
    round-trip exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.as_row() for r in records]
    if columns is None:
        if not rows:
            raise ValueError("columns are required to write an empty table")
        columns = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])
    return path


def read_csv(path: str | Path) -> list[dict]:
    """Read an emitted CSV back; numeric cells become int/float, blanks None."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                    continue
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
    return out


@dataclass
class GeneralityResult:
    """Entropy sweep on a held-out set plus the chosen-threshold comparison."""

    points: list[CurvePoint]
    baseline_accuracy: float
    baseline_macs: float
    chosen_theta: float
    chosen: CurvePoint

    @property
    def accuracy_drop(self) -> float:
        return self.baseline_accuracy - self.chosen.accuracy

    @property
    def mac_reduction(self) -> float:
        return 1.0 - self.chosen.mean_macs / self.baseline_macs


def entropy_generality_study(
    model: MultiExitModel,
    train: LabeledDataset,
    test: LabeledDataset,
    hp: HyperParams = HyperParams(),
    branch_hp: HyperParams | None = None,
    thetas: Sequence[float] = theta_range(0.01, 0.50, 0.02),
    chosen_theta: float = 0.03,
) -> GeneralityResult:
    """Train a one-exit model, sweep entropy thresholds on ``test``, compare to baseline."""
    train_baseline(model, train, hp)
    for i in range(len(model.exits)):
        train_exit_branch(model, i, train, branch_hp or hp)
    images = test.images()
    base = evaluate_config(model, ExitPolicy.all_off(len(model.exits)), test, images)
    points = sweep_threshold(model, SweepSpec(UncertaintyMethod.ENTROPY, tuple(thetas)), test)
    chosen = sweep_threshold(model, SweepSpec(UncertaintyMethod.ENTROPY, (chosen_theta,)), test)[0]
    return GeneralityResult(points, base.accuracy, base.mean_macs, chosen_theta, chosen)


def compare_backends(
    shapes: Sequence[tuple[int, int, int, int]] = ((1, 30, 1, 32), (1, 29, 32, 64), (1, 28, 64, 128),
                                                   (32, 29, 32, 64), (32, 28, 64, 128)),
    repeats: int = 20,
    seed: int = 0,
) -> list[dict]:
    """Time compiled vs NumPy conv kernels on (batch, side, Cin, F) float32 inputs.

    Columns for a backend that is not built are None.
    """
    from .tensornn.kernels import available_backends

    impls = available_backends()
    rng = np.random.default_rng(seed)
    rows = []
    for n, side, cin, f in shapes:
        x = rng.random((n, side, side, cin), dtype=np.float32)
        w = rng.random((2, 2, cin, f), dtype=np.float32)
        b = np.zeros(f, dtype=np.float32)
        dy = rng.random((n, side - 1, side - 1, f), dtype=np.float32)
        row = {"batch": n, "side": side, "cin": cin, "filters": f}
        for name in ("compiled", "python"):
            mod = impls.get(name)
            if mod is None:
                row[f"{name}_fwd_us"] = row[f"{name}_bwd_us"] = None
                continue
            row[f"{name}_fwd_us"] = _best_us(lambda: mod.conv2d_forward(x, w, b, 1), repeats)
            row[f"{name}_bwd_us"] = _best_us(lambda: mod.conv2d_backward(x, w, dy, 1), repeats)
        rows.append(row)
    return rows


def compare_model_backends(model: MultiExitModel, policy: ExitPolicy, dataset: LabeledDataset,
                           repetitions: int = 5, max_samples: int | None = 100) -> dict[str, TimingStats]:
    """Per-sample inference timing of one model under each available backend."""
    from .tensornn.kernels import available_backends, use_backend

    out = {}
    for name in available_backends():
        with use_backend(name):
            out[name] = time_inference(model, policy, dataset, repetitions, max_samples=max_samples)
            out[name].label = name
    return out


def _best_us(fn, repeats: int) -> float:
    fn()
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        best = min(best, time.perf_counter_ns() - t0)
    return best / 1e3
