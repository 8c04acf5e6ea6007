"""Entropy-exit generality study on a stand-in file in the UJIndoorLoc layout.

The public dataset is not bundled; this checks that the loader, the one-exit
variant and the sweep run together and produce a sensible curve.
"""

import numpy as np

from earlyloc.bench import entropy_generality_study
from earlyloc.exitnet import HyperParams, build_ujiloc_variant
from earlyloc.fingerprint import load_ujindoorloc, split, synth_generate

from ujiformat import write_uji_csv


def test_generality_study_on_uji_layout(tmp_path):
    synth = synth_generate(13, 520, 40, easy_fraction=0.8, seed=3)  # 520 WAPs as in the public file
    rng = np.random.default_rng(3)
    path = write_uji_csv(tmp_path / "trainingData.csv", synth.rssi, synth.labels, rng)
    ds = load_ujindoorloc(path)
    assert ds.n_classes == 13 and ds.image_side == 23 and len(ds) == len(synth)
    train, _, test = split(ds, (0.8, 0.0, 0.2), seed=0)
    model = build_ujiloc_variant(13, ds.image_side, seed=0)
    model.wap_index = ds.wap_index
    res = entropy_generality_study(model, train, test, HyperParams(lr=0.1, epochs=10, batch_size=16, seed=0))

    assert len(res.points) == 25
    assert [p.theta for p in res.points] == sorted(p.theta for p in res.points)
    macs = [p.mean_macs for p in res.points]
    assert all(b <= a for a, b in zip(macs, macs[1:]))  # looser entropy bound exits more
    assert res.baseline_accuracy > 0.7
    # a sample that does not exit pays for the branch on top of the backbone
    stage1 = model.segment_macs[0] + model.branch_macs[0]
    assert stage1 <= res.chosen.mean_macs <= res.baseline_macs + model.branch_macs[0]
    assert res.mac_reduction < 1.0
    assert res.points[-1].exit_rates[0] > 0.5
