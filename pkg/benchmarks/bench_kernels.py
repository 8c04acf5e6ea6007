"""Compiled vs NumPy backend timings: raw conv kernels, then whole-model inference.

    python benchmarks/bench_kernels.py [--repeats 20] [--out bench_out]
"""

import argparse
import json
from pathlib import Path

from earlyloc.bench import compare_backends, compare_model_backends, emit_csv, TIMING_COLUMNS
from earlyloc.exitnet import ExitPolicy, build_reference_model
from earlyloc.fingerprint import synth_generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--samples", type=int, default=50)
    ap.add_argument("--out", default="bench_out")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    print("conv kernels, best of", args.repeats, "(microseconds)")
    for row in compare_backends(repeats=args.repeats):
        speed = ""
        if row["compiled_fwd_us"]:
            speed = "  fwd x%.1f  bwd x%.1f" % (row["python_fwd_us"] / row["compiled_fwd_us"],
                                                row["python_bwd_us"] / row["compiled_bwd_us"])
        print(json.dumps(row) + speed)

    # untrained weights are fine for timing; all exits off runs the full backbone
    data = synth_generate(16, 900, 4, seed=0)
    model = build_reference_model(16, data.image_side, wap_index=data.wap_index, seed=0)
    stats = compare_model_backends(model, ExitPolicy.all_off(len(model.exits)), data,
                                   repetitions=5, max_samples=args.samples)
    for s in stats.values():
        print(f"{s.label:9s} {s.mean_ns / 1e3:9.1f} us/sample  +/- {s.ci95_ns / 1e3:.1f}")
    emit_csv(list(stats.values()), out / "model_backends.csv", TIMING_COLUMNS)


if __name__ == "__main__":
    main()
