"""Command-line entry point: ``earlyloc <command> [flags]``.

Commands run in pipeline order: ``synth`` (optional), ``train``,
``train-exits``, ``calibrate``, then ``eval``/``sweep``/``bench``. Settings
resolve as flags > ``--config`` JSON file > built-in defaults.

Exit status: 0 ok, 2 invalid flags, 3 missing prerequisite, 4 bad data,
5 bad model file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    DEPTH_COLUMNS,
    TIMING_COLUMNS,
    SweepSpec,
    compare_backends,
    depth_study,
    emit_csv,
    sweep_columns,
    sweep_threshold,
    time_inference,
)
from .calibrate import (
    ConfigSpace,
    SelectionPolicy,
    calibrate,
    evaluate_config,
    load_selected_policy,
    write_reports_csv,
    write_summary_json,
)
from .exitnet import (
    ExitPolicy,
    ExitSetting,
    HyperParams,
    TrainingOrderError,
    build_reference_model,
    load_model,
    save_model,
    train_baseline,
    train_exit_branch,
)
from .fingerprint import DatasetError, load_native, load_ujindoorloc, save_native, split, synth_generate
from .tensornn.serialize import FORMAT_VERSION, ModelFormatError

log = logging.getLogger("earlyloc")

EXIT_USAGE = 2
EXIT_PREREQUISITE = 3
EXIT_DATA = 4
EXIT_MODEL = 5

DEFAULTS = {
    "format": "native",
    "seed": 0,
    "split_seed": 0,
    "split": None,
    "lr": 0.01,
    "epochs": 20,
    "batch": 32,
    "classes": 16,
    "waps": 64,
    "samples": 100,
    "easy_fraction": 0.8,
    "noise": 4.0,
    "policy": "default",
    "start": 0.01,
    "stop": 0.50,
    "step": 0.02,
    "repetitions": 30,
    "max_samples": 200,
}
FRACTIONS = (0.8, 0.1, 0.1)
SPLITS = ("train", "calibration", "test", "all")


class CliError(Exception):
    def __init__(self, category: str, message: str, status: int):
        super().__init__(message)
        self.category = category
        self.status = status


def prerequisite(message: str) -> CliError:
    return CliError("prerequisite", message, EXIT_PREREQUISITE)


def usage(message: str) -> CliError:
    return CliError("usage", message, EXIT_USAGE)


# -- option parsing ------------------------------------------------------


def parse_theta(text: str) -> tuple[int | None, float]:
    """``2=0.8`` -> (1, 0.8); ``all=0.8`` or ``0.8`` -> (None, 0.8). Exits are 1-based."""
    key, sep, value = text.partition("=")
    if not sep:
        key, value = "all", key
    try:
        theta = float(value)
    except ValueError:
        raise usage(f"bad threshold {text!r}") from None
    if key.strip().lower() == "all":
        return None, theta
    try:
        index = int(key)
    except ValueError:
        raise usage(f"bad exit index in {text!r}") from None
    if index < 1:
        raise usage(f"exit indices start at 1, got {index}")
    return index - 1, theta


def parse_mask(text: str, n_exits: int) -> tuple[bool, ...]:
    """``on``/``off`` or one 0/1 character per exit (``10`` enables only exit 1)."""
    t = text.strip().lower()
    if t in ("on", "all"):
        return (True,) * n_exits
    if t in ("off", "none"):
        return (False,) * n_exits
    if len(t) != n_exits or set(t) - {"0", "1"}:
        raise usage(f"--exits needs on, off or {n_exits} characters of 0/1, got {text!r}")
    return tuple(c == "1" for c in t)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of default settings (flags override it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset CSV")
    data.add_argument("--format", choices=("native", "ujindoorloc", "synth"))
    data.add_argument("--split", choices=SPLITS, help="which split to use")
    data.add_argument("--split-seed", type=int, dest="split_seed")
    for flag, typ in (("--classes", int), ("--waps", int), ("--samples", int),
                      ("--easy-fraction", float), ("--noise", float)):
        data.add_argument(flag, type=typ, help="synthetic data only")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", help="model manifest path")

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--lr", type=float)
    hyper.add_argument("--epochs", type=int)
    hyper.add_argument("--batch", type=int)

    policy = argparse.ArgumentParser(add_help=False)
    policy.add_argument("--calibration", help="calibration summary JSON whose selected config is used")
    policy.add_argument("--method", help="uncertainty method for every exit")
    policy.add_argument("--theta", action="append", metavar="EXIT=V",
                        help="threshold for one exit (1-based) or all=V; repeatable")
    policy.add_argument("--exits", metavar="MASK", help="on, off, or 0/1 per exit")

    p = argparse.ArgumentParser(prog="earlyloc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common, data], help="write a synthetic dataset CSV")
    sub.add_parser("train", parents=[common, data, model, hyper], help="train the baseline")
    sub.add_parser("train-exits", parents=[common, data, model, hyper],
                   help="train exit branches on a frozen backbone")
    sub.add_parser("eval", parents=[common, data, model, policy], help="evaluate one exit configuration")
    c = sub.add_parser("calibrate", parents=[common, data, model],
                       help="enumerate exit configurations and select one")
    c.add_argument("--policy", help="default, latency:<macs> or error:<value>")
    c.add_argument("--method", help="uncertainty method, shared or comma-separated per exit")
    s = sub.add_parser("sweep", parents=[common, data, model], help="threshold sensitivity sweep")
    s.add_argument("--method", required=False)
    s.add_argument("--exits", metavar="MASK")
    for flag in ("--start", "--stop", "--step"):
        s.add_argument(flag, type=float)
    b = sub.add_parser("bench", parents=[common, data, model, policy, hyper], help="timing benchmarks")
    b.add_argument("--repetitions", type=int)
    b.add_argument("--max-samples", type=int, dest="max_samples")
    b.add_argument("--depth", help="comma-separated depths for the depth study, e.g. 1,2,3")
    b.add_argument("--kernels", action="store_true", help="compare compiled and NumPy kernels")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults."""
    settings = dict(DEFAULTS)
    loaded = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise usage(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise usage("config file must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        settings.update(loaded)
    flags = {k: v for k, v in vars(args).items() if v is not None and v is not False and k != "config"}
    settings.update(flags)
    settings["_explicit"] = set(flags) | set(loaded)
    return settings


# -- shared steps --------------------------------------------------------


def load_dataset(cfg: dict):
    fmt = cfg["format"]
    if fmt == "synth":
        return synth_generate(cfg["classes"], cfg["waps"], cfg["samples"],
                              cfg["easy_fraction"], cfg["noise"], seed=cfg["seed"])
    path = cfg.get("data")
    if not path:
        raise usage(f"--data is required for --format {fmt}")
    if not Path(path).exists():
        raise prerequisite(f"dataset not found: {path}")
    return load_native(path) if fmt == "native" else load_ujindoorloc(path)


def select_split(cfg: dict, dataset, default: str):
    name = cfg.get("split") or default
    if name == "all":
        return dataset
    parts = dict(zip(SPLITS, split(dataset, FRACTIONS, seed=cfg["split_seed"])))
    return parts[name]


def need_model(cfg: dict):
    path = cfg.get("model")
    if not path:
        raise usage("--model is required")
    if not Path(path).exists():
        raise prerequisite(f"model not found: {path} (run train first)")
    model = load_model(path)
    run = model.meta.get("run", {})
    # reuse the split the model was trained with unless overridden
    if "split_seed" in run and "split_seed" not in cfg["_explicit"]:
        cfg["split_seed"] = run["split_seed"]
    return model


def require_exits_trained(model) -> None:
    if not model.meta["trained"].get("baseline"):
        raise prerequisite("baseline is not trained (run train first)")
    if not all(model.meta["trained"]["exits"]):
        raise prerequisite("exit branches are not trained (run train-exits first)")


def hyper(cfg: dict) -> HyperParams:
    try:
        return HyperParams(lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch"], seed=cfg["seed"])
    except ValueError as exc:
        raise usage(str(exc)) from None


def provenance(cfg: dict, dataset) -> dict:
    return {
        "seed": cfg["seed"],
        "split_seed": cfg["split_seed"],
        "format_version": FORMAT_VERSION,
        "data_digest": dataset.digest(),
        "data": cfg.get("data"),
        "data_format": cfg["format"],
        "version": __version__,
    }


def policy_from_flags(cfg: dict, model) -> ExitPolicy:
    """Calibrated or model-default policy, then --method, --theta and --exits overrides."""
    n = len(model.exits)
    if cfg.get("calibration"):
        if not Path(cfg["calibration"]).exists():
            raise prerequisite(f"calibration file not found: {cfg['calibration']}")
        base = load_selected_policy(cfg["calibration"])
        if len(base) != n:
            raise usage(f"calibration has {len(base)} exits, model has {n}")
    else:
        base = model.default_policy()
    methods = [s.method for s in base]
    thetas = [s.theta if s.theta is not None else b.theta for s, b in zip(base, model.exits)]
    enabled = list(base.enabled)
    if cfg.get("method"):
        methods = [cfg["method"]] * n
    for text in cfg.get("theta") or []:
        index, value = parse_theta(text)
        if index is None:
            thetas = [value] * n
        elif index >= n:
            raise usage(f"exit {index + 1} does not exist; model has {n}")
        else:
            thetas[index] = value
    if cfg.get("exits"):
        enabled = list(parse_mask(cfg["exits"], n))
    try:
        return ExitPolicy(tuple(
            ExitSetting(on, m, t) for on, m, t in zip(enabled, methods, thetas)
        ))
    except ValueError as exc:
        raise usage(str(exc)) from None


def out_path(cfg: dict, fallback: str) -> Path:
    return Path(cfg.get("out") or fallback)


def write_json(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, default=_json_default)
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# -- commands ------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    cfg = {**cfg, "format": "synth"}
    ds = load_dataset(cfg)
    path = save_native(ds, out_path(cfg, "synth.csv"))
    write_json(path.with_suffix(".json"), {
        "classes": cfg["classes"], "waps": cfg["waps"], "samples": cfg["samples"],
        "easy_fraction": cfg["easy_fraction"], "noise": cfg["noise"],
        "seed": cfg["seed"], "format_version": FORMAT_VERSION, "data_digest": ds.digest(),
    })
    print(f"wrote {len(ds)} samples to {path}")
    return 0


def cmd_train(cfg: dict) -> int:
    ds = load_dataset(cfg)
    train = select_split(cfg, ds, "train")
    model = build_reference_model(ds.n_classes, ds.image_side, wap_index=ds.wap_index, seed=cfg["seed"])
    model.coords = ds.coords
    history = train_baseline(model, train, hyper(cfg))
    model.meta["run"] = provenance(cfg, ds)
    path = save_model(model, out_path(cfg, cfg.get("model") or "model.json"))
    print(json.dumps({"model": str(path), "final_loss": history[-1] if history else None}))
    return 0


def cmd_train_exits(cfg: dict) -> int:
    model = need_model(cfg)
    if not model.meta["trained"].get("baseline"):
        raise prerequisite("baseline is not trained (run train first)")
    ds = load_dataset(cfg)
    train = select_split(cfg, ds, "train")
    hp = hyper(cfg)
    losses = [train_exit_branch(model, i, train, hp)[-1:] for i in range(len(model.exits))]
    model.meta.setdefault("run", {})["exits"] = provenance(cfg, ds)
    path = save_model(model, out_path(cfg, cfg["model"]))
    print(json.dumps({"model": str(path), "final_losses": [l[0] if l else None for l in losses]}))
    return 0


def cmd_eval(cfg: dict) -> int:
    model = need_model(cfg)
    policy = policy_from_flags(cfg, model)
    if policy.n_enabled:
        require_exits_trained(model)
    elif not model.meta["trained"].get("baseline"):
        raise prerequisite("baseline is not trained (run train first)")
    ds = load_dataset(cfg)
    data = select_split(cfg, ds, "test")
    r = evaluate_config(model, policy, data)
    doc = {
        "policy": policy.to_dict(), "label": policy.label(), "split": data.split, "n": r.n_samples,
        "accuracy": r.accuracy, "error_m": r.error_m, "mean_macs": r.mean_macs,
        "baseline_macs": model.baseline_macs, "mean_ns": r.mean_ns,
        "exit_rates": list(r.exit_rates), **provenance(cfg, ds),
    }
    if cfg.get("out"):
        write_json(Path(cfg["out"]), doc)
    print(json.dumps(doc))
    return 0


def cmd_calibrate(cfg: dict) -> int:
    model = need_model(cfg)
    require_exits_trained(model)
    try:
        selection = SelectionPolicy.parse(cfg["policy"])
        methods = str(cfg.get("method") or "margin").split(",")
        space = ConfigSpace.build(len(model.exits), methods[0] if len(methods) == 1 else methods)
    except ValueError as exc:
        raise usage(str(exc)) from None
    ds = load_dataset(cfg)
    data = select_split(cfg, ds, "calibration")
    result = calibrate(model, data, space, selection)
    out = out_path(cfg, "calibration")
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(result.reports, out / "reports.csv", len(model.exits))
    summary = write_summary_json(result, out / "summary.json", provenance(cfg, ds))
    print(json.dumps({"summary": str(summary), "selected": result.selected_config.label(),
                      "improved": result.improved}))
    return 0


def cmd_sweep(cfg: dict) -> int:
    model = need_model(cfg)
    require_exits_trained(model)
    n = len(model.exits)
    try:
        spec = SweepSpec.from_range(cfg.get("method") or "margin", cfg["start"], cfg["stop"], cfg["step"],
                                    parse_mask(cfg["exits"], n) if cfg.get("exits") else None)
    except ValueError as exc:
        raise usage(str(exc)) from None
    ds = load_dataset(cfg)
    data = select_split(cfg, ds, "test")
    points = sweep_threshold(model, spec, data)
    path = emit_csv(points, out_path(cfg, "sweep.csv"), sweep_columns(n))
    print(f"wrote {len(points)} points to {path}")
    return 0


def cmd_bench(cfg: dict) -> int:
    out = out_path(cfg, "bench")
    out.mkdir(parents=True, exist_ok=True)
    if cfg.get("kernels"):
        rows = compare_backends()
        path = out / "kernels.csv"
        _write_plain_csv(rows, path)
        for row in rows:
            print(json.dumps(row))
        return 0
    ds = load_dataset(cfg)
    if cfg.get("depth"):
        try:
            depths = [int(d) for d in str(cfg["depth"]).split(",")]
        except ValueError:
            raise usage(f"bad --depth {cfg['depth']!r}") from None
        train = select_split(cfg, ds, "train")
        test = select_split({**cfg, "split": None}, ds, "test")
        results = depth_study(depths, train, test, hyper(cfg))
        emit_csv(results, out / "depth.csv", DEPTH_COLUMNS)
        for r in results:
            print(json.dumps(r.as_row()))
        return 0
    model = need_model(cfg)
    policy = policy_from_flags(cfg, model)
    if policy.n_enabled:
        require_exits_trained(model)
    data = select_split(cfg, ds, "test")
    try:
        stats = [
            time_inference(model, p, data, cfg["repetitions"], max_samples=cfg["max_samples"])
            for p in (ExitPolicy.all_off(len(model.exits)), policy)
        ]
    except ValueError as exc:
        raise usage(str(exc)) from None
    stats[0].label = "baseline"
    emit_csv(stats, out / "timing.csv", TIMING_COLUMNS)
    for s in stats:
        print(json.dumps(s.as_row()))
    return 0


def _write_plain_csv(rows: list[dict], path: Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "train-exits": cmd_train_exits,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"earlyloc: {exc.category} error: {exc}", file=sys.stderr)
        return exc.status
    except TrainingOrderError as exc:
        print(f"earlyloc: prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except DatasetError as exc:
        print(f"earlyloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelFormatError as exc:
        print(f"earlyloc: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
