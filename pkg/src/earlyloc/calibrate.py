"""Post-deployment self-configuration of exit switches and thresholds.

Every (switch mask x threshold) configuration is run on a labeled
calibration set, and one is picked by a selection policy. Mean MACs stand in
for latency during selection; wall-clock time is recorded but never used to
choose, so results are reproducible.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exitnet import ExitPolicy, ExitSetting, MultiExitModel, UncertaintyMethod, check_threshold, infer_with_exits
from .fingerprint import LabeledDataset, mean_localization_error, top1_accuracy

BYTES_PER_PARAM = 4

DEFAULT_GRIDS = {
    UncertaintyMethod.MARGIN: tuple(round(0.1 * k, 1) for k in range(1, 10)),
    UncertaintyMethod.LEAST_CONFIDENCE: tuple(round(0.1 * k, 1) for k in range(1, 10)),
    UncertaintyMethod.ENTROPY: tuple(round(0.1 * k, 1) for k in range(1, 10)),
    UncertaintyMethod.RATIO: (1.5, 2.0, 3.0, 5.0, 10.0),
}


@dataclass(frozen=True)
class ConfigSpace:
    """Per-exit switch domains, threshold grids and uncertainty methods."""

    methods: tuple[UncertaintyMethod, ...]
    grids: tuple[tuple[float, ...], ...]
    switches: tuple[tuple[bool, ...], ...]

    def __post_init__(self):
        if not len(self.methods) == len(self.grids) == len(self.switches):
            raise ValueError("methods, grids and switches must have one entry per exit")
        for i, (method, grid, sw) in enumerate(zip(self.methods, self.grids, self.switches)):
            if not sw or not set(sw) <= {False, True}:
                raise ValueError(f"exit {i}: switch domain must be a non-empty subset of (off, on)")
            if True in sw:
                if not grid:
                    raise ValueError(f"exit {i}: empty threshold grid for an exit that can be enabled")
                if list(grid) != sorted(grid):
                    raise ValueError(f"exit {i}: threshold grid must be sorted")
                for theta in grid:
                    check_threshold(method, theta)

    @property
    def n_exits(self) -> int:
        return len(self.methods)

    @classmethod
    def build(
        cls,
        n_exits: int,
        method: "str | UncertaintyMethod | Sequence" = UncertaintyMethod.MARGIN,
        grid: Sequence[float] | Sequence[Sequence[float]] | None = None,
        switches: Sequence[Sequence[bool]] | None = None,
    ) -> "ConfigSpace":
        """Space with one shared or per-exit method and grid; every exit switchable."""
        if isinstance(method, (str, UncertaintyMethod)):
            methods = tuple(UncertaintyMethod.parse(method) for _ in range(n_exits))
        else:
            methods = tuple(UncertaintyMethod.parse(m) for m in method)
        if grid is None:
            grids = tuple(DEFAULT_GRIDS[m] for m in methods)
        elif grid and isinstance(grid[0], (list, tuple)):
            grids = tuple(tuple(float(t) for t in g) for g in grid)
        else:
            grids = tuple(tuple(float(t) for t in grid) for _ in range(n_exits))
        sw = tuple(tuple(s) for s in switches) if switches else tuple((False, True) for _ in range(n_exits))
        return cls(methods, grids, sw)

    def expected_count(self) -> int:
        """Sum over enabled subsets of the product of their grid sizes (plus baseline if absent)."""
        total = 0
        for mask in itertools.product(*self.switches):
            total += math.prod(len(g) for g, on in zip(self.grids, mask) if on)
        if not all(False in sw for sw in self.switches):
            total += 1
        return total


def enumerate_configs(space: ConfigSpace) -> list[ExitPolicy]:
    """All configurations, baseline (all exits off) first."""
    baseline = ExitPolicy(tuple(ExitSetting(False, m) for m in space.methods))
    configs = []
    domains = [sorted(sw) for sw in space.switches]  # off before on
    for mask in itertools.product(*domains):
        choices = [
            [ExitSetting(True, m, t) for t in g] if on else [ExitSetting(False, m)]
            for m, g, on in zip(space.methods, space.grids, mask)
        ]
        for combo in itertools.product(*choices):
            configs.append(ExitPolicy(tuple(combo)))
    if baseline in configs:
        configs.remove(baseline)
    return [baseline] + configs


def footprint_bytes(model: MultiExitModel, enabled: Sequence[bool]) -> int:
    """Resident parameter bytes: backbone and final head plus enabled branches."""
    if len(enabled) != len(model.exits):
        raise ValueError(f"mask length {len(enabled)} != {len(model.exits)} exits")
    params = model.backbone_params()
    params += sum(model.branch_params(i) for i, on in enumerate(enabled) if on)
    return BYTES_PER_PARAM * params


@dataclass
class ConfigReport:
    config: ExitPolicy
    accuracy: float
    error_m: float | None
    mean_macs: float
    mean_ns: float
    exit_rates: tuple[float, ...]  # per exit, then the final head last
    footprint_bytes: int
    n_samples: int
    predictions: np.ndarray = field(repr=False, compare=False, default=None)

    @property
    def n_enabled(self) -> int:
        return self.config.n_enabled

    @property
    def early_exit_rate(self) -> float:
        return float(sum(self.exit_rates[:-1]))


def evaluate_config(model: MultiExitModel, config: ExitPolicy, dataset: LabeledDataset,
                    images: np.ndarray | None = None) -> ConfigReport:
    """Run :func:`infer_with_exits` on every sample and aggregate the metrics."""
    if len(dataset) == 0:
        raise ValueError("empty calibration set")
    if images is None:
        images = dataset.images()
    n_exits = len(model.exits)
    preds = np.empty(len(dataset), dtype=np.int64)
    macs = np.empty(len(dataset), dtype=np.float64)
    ns = np.empty(len(dataset), dtype=np.float64)
    counts = np.zeros(n_exits + 1, dtype=np.int64)
    for k, image in enumerate(images):
        pred, trace = infer_with_exits(model, config, image)
        preds[k] = pred
        macs[k] = trace.macs
        ns[k] = trace.wall_ns
        counts[n_exits if trace.exit_index is None else trace.exit_index] += 1
    coords = dataset.coords if dataset.coords is not None else model.coords
    error = None
    if coords is not None and not np.isnan(coords[np.unique(np.concatenate([preds, dataset.labels]))]).any():
        error = mean_localization_error(preds, dataset.labels, coords)
    return ConfigReport(
        config=config,
        accuracy=top1_accuracy(preds, dataset.labels),
        error_m=error,
        mean_macs=float(macs.mean()),
        mean_ns=float(ns.mean()),
        exit_rates=tuple(float(c) / len(dataset) for c in counts),
        footprint_bytes=footprint_bytes(model, config.enabled),
        n_samples=len(dataset),
        predictions=preds,
    )


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str  # "default", "latency" or "error"
    target: float | None = None

    @classmethod
    def parse(cls, text: "str | SelectionPolicy") -> "SelectionPolicy":
        if isinstance(text, SelectionPolicy):
            return text
        text = text.strip().lower()
        if text == "default":
            return cls("default")
        kind, sep, value = text.partition(":")
        if sep and kind in ("latency", "error"):
            try:
                return cls(kind, float(value))
            except ValueError:
                pass
        raise ValueError(f"policy must be default, latency:<macs> or error:<value>, got {text!r}")

    def __str__(self) -> str:
        return self.kind if self.target is None else f"{self.kind}:{self.target:g}"


def _error_of(report: ConfigReport) -> float:
    return report.error_m if report.error_m is not None else 1.0 - report.accuracy


@dataclass
class CalibrationResult:
    reports: list[ConfigReport]
    selected_index: int
    policy: SelectionPolicy
    improved: bool

    @property
    def baseline(self) -> ConfigReport:
        return self.reports[0]

    @property
    def selected(self) -> ConfigReport:
        return self.reports[self.selected_index]

    @property
    def selected_config(self) -> ExitPolicy:
        return self.selected.config

    def summary(self) -> dict:
        base, sel = self.baseline, self.selected
        return {
            "policy": str(self.policy),
            "improved": self.improved,
            "n_configs": len(self.reports),
            "selected_index": self.selected_index,
            "selected": sel.config.to_dict(),
            "selected_label": sel.config.label(),
            "baseline_metrics": _metrics(base),
            "selected_metrics": _metrics(sel),
            "mac_reduction": 1.0 - sel.mean_macs / base.mean_macs if base.mean_macs else 0.0,
        }


def _metrics(r: ConfigReport) -> dict:
    return {
        "accuracy": r.accuracy,
        "error_m": r.error_m,
        "mean_macs": r.mean_macs,
        "mean_ns": r.mean_ns,
        "exit_rates": list(r.exit_rates),
        "footprint_bytes": r.footprint_bytes,
    }


def select_config(reports: Sequence[ConfigReport], policy="default") -> tuple[int, bool]:
    """Index of the chosen report and whether it improves on the baseline.

    ``reports[0]`` must be the baseline. default: among configs with accuracy
    at least the baseline's, minimize mean MACs; ties go to fewer enabled
    exits, then higher accuracy, then enumeration order. latency:<t>: least
    error with mean MACs <= t. error:<e>: least MACs with error <= e. With no
    feasible improvement the baseline is returned and the flag is False.
    """
    policy = SelectionPolicy.parse(policy)
    if not reports:
        raise ValueError("no reports to select from")
    base = reports[0]
    if base.n_enabled != 0:
        raise ValueError("reports[0] must be the all-off baseline")
    indexed = list(enumerate(reports))
    if policy.kind == "default":
        feasible = [(i, r) for i, r in indexed if r.accuracy >= base.accuracy]
        key = lambda ir: (ir[1].mean_macs, ir[1].n_enabled, -ir[1].accuracy, ir[0])
    elif policy.kind == "latency":
        feasible = [(i, r) for i, r in indexed if r.mean_macs <= policy.target]
        key = lambda ir: (_error_of(ir[1]), ir[1].mean_macs, ir[1].n_enabled, ir[0])
    else:
        feasible = [(i, r) for i, r in indexed if _error_of(r) <= policy.target]
        key = lambda ir: (ir[1].mean_macs, ir[1].n_enabled, _error_of(ir[1]), ir[0])
    if not feasible:
        return 0, False
    best, report = min(feasible, key=key)
    improved = best != 0 and report.n_enabled > 0
    if policy.kind == "default":
        improved = improved and report.mean_macs < base.mean_macs
    return best, improved


def calibrate(
    model: MultiExitModel,
    dataset: LabeledDataset,
    space: ConfigSpace,
    policy="default",
) -> CalibrationResult:
    if space.n_exits != len(model.exits):
        raise ValueError(f"config space covers {space.n_exits} exits, model has {len(model.exits)}")
    images = dataset.images()
    reports = [evaluate_config(model, cfg, dataset, images) for cfg in enumerate_configs(space)]
    policy = SelectionPolicy.parse(policy)
    idx, improved = select_config(reports, policy)
    return CalibrationResult(reports, idx, policy, improved)


def report_columns(n_exits: int) -> list[str]:
    cols = ["index", "label"]
    for i in range(1, n_exits + 1):
        cols += [f"exit{i}_enabled", f"exit{i}_method", f"exit{i}_theta"]
    cols += ["accuracy", "error_m", "mean_macs", "mean_ns"]
    cols += [f"exit{i}_rate" for i in range(1, n_exits + 1)] + ["final_rate", "footprint_bytes"]
    return cols


def write_reports_csv(reports: Sequence[ConfigReport], path: str | Path, n_exits: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if n_exits is None:
        n_exits = len(reports[0].config) if reports else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(report_columns(n_exits))
        for k, r in enumerate(reports):
            row = [k, r.config.label()]
            for s in r.config:
                row += [int(s.enabled), s.method.value, "" if not s.enabled else repr(s.theta)]
            row += [repr(r.accuracy), "" if r.error_m is None else repr(r.error_m),
                    repr(r.mean_macs), repr(r.mean_ns)]
            row += [repr(x) for x in r.exit_rates] + [r.footprint_bytes]
            writer.writerow(row)
    return path


def write_summary_json(result: CalibrationResult, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({**result.summary(), **(extra or {})}, fh, indent=2)
    return path


def load_selected_policy(path: str | Path) -> ExitPolicy:
    """Read the selected configuration back from a calibration summary."""
    with open(path, encoding="utf-8") as fh:
        return ExitPolicy.from_dict(json.load(fh)["selected"])
