import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyloc.tensornn import (
    ShapeError,
    TrainingDiverged,
    WeightStore,
    backward,
    conv,
    dense,
    depthwise,
    flatten,
    forward,
    infer_shapes,
    init_weights,
    layer_macs,
    layer_params,
    mac_count,
    maxpool,
    ops,
    output_shape,
    param_count,
    pointwise,
    predict,
    relu,
    sgd_step,
    softmax,
    train_sgd,
)
from earlyloc.tensornn.layers import LayerSpec
from earlyloc.tensornn.serialize import (
    MAGIC,
    ModelFormatError,
    blob_path_for,
    read_manifest,
    read_model,
    write_model,
)

from gradcheck import max_relative_error


# -- ops -----------------------------------------------------------------


def test_conv_shape_reference_geometry():
    y = ops.conv2d_forward(np.zeros((30, 30, 1)), np.zeros((2, 2, 1, 32)), np.zeros(32))
    assert y.shape == (29, 29, 32)


def test_conv_hand_arithmetic():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 2, 1, 1)
    assert ops.conv2d_forward(x, w, np.zeros(1)).tolist() == [[[5.0]]]


def test_conv_zero_filter_gives_bias(rng):
    y = ops.conv2d_forward(rng.random((5, 6, 3)), np.zeros((2, 2, 3, 4)), np.arange(4.0))
    assert np.array_equal(y, np.broadcast_to(np.arange(4.0), (4, 5, 4)))


def test_conv_errors():
    with pytest.raises(ShapeError):
        ops.conv2d_forward(np.zeros((3, 3, 2)), np.zeros((2, 2, 1, 4)), np.zeros(4))
    with pytest.raises(ShapeError):
        ops.conv2d_forward(np.zeros((1, 1, 1)), np.zeros((2, 2, 1, 4)), np.zeros(4))
    with pytest.raises(ShapeError):
        ops.conv2d_forward(np.zeros((3, 3, 1)), np.zeros((2, 2, 1, 4)), np.zeros(3))
    with pytest.raises(ShapeError):
        ops.conv2d_forward(np.zeros((3, 3)), np.zeros((2, 2, 1, 4)), np.zeros(4))


def test_depthwise_examples():
    y = ops.depthwise_conv2d_forward(np.ones((2, 2, 2)), np.ones((2, 2, 2)), np.zeros(2))
    assert y.tolist() == [[[4.0, 4.0]]]
    x = np.arange(2 * 4 * 4, dtype=np.float64).reshape(4, 4, 2)
    w = np.zeros((2, 2, 2))
    w[0, 0, :] = 1
    assert np.array_equal(ops.depthwise_conv2d_forward(x, w, np.zeros(2)), x[:3, :3])
    assert ops.depthwise_conv2d_forward(np.zeros((28, 28, 64)), np.zeros((2, 2, 64)), np.zeros(64)).shape == (27, 27, 64)
    with pytest.raises(ShapeError):
        ops.depthwise_conv2d_forward(np.zeros((4, 4, 3)), np.zeros((2, 2, 2)), np.zeros(2))


def test_pointwise_examples(rng):
    x = np.array([3.0, 4.0]).reshape(1, 1, 2)
    assert ops.pointwise_conv2d_forward(x, np.ones((2, 1)), np.zeros(1)).item() == 7.0
    x = rng.random((5, 5, 6))
    assert np.array_equal(ops.pointwise_conv2d_forward(x, np.eye(6), np.zeros(6)), x)
    assert ops.pointwise_conv2d_forward(np.zeros((27, 27, 64)), np.zeros((1, 1, 64, 8)), np.zeros(8)).shape == (27, 27, 8)
    with pytest.raises(ShapeError):
        ops.pointwise_conv2d_forward(x, np.zeros((5, 2)), np.zeros(2))


def test_maxpool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert ops.maxpool_forward(x, (2, 2)).item() == 4.0
    assert np.all(ops.maxpool_forward(np.full((6, 6, 2), 3.0), (2, 2), 1) == 3.0)
    assert ops.maxpool_forward(np.zeros((4, 4, 1)), (2, 2), 2).shape == (2, 2, 1)
    with pytest.raises(ShapeError):
        ops.maxpool_forward(np.zeros((1, 1, 1)), (2, 2))


def test_dense_examples(rng):
    x = rng.random(5)
    assert np.array_equal(ops.dense_forward(x, np.eye(5), np.zeros(5)), x)
    assert layer_params(dense("d", 342), (26912,)) == 9_204_246
    assert layer_params(dense("d", 342), (93312,)) == 31_913_046
    with pytest.raises(ShapeError):
        ops.dense_forward(x, np.eye(4), np.zeros(4))


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax([0.0, 0.0]), [0.5, 0.5])
    for c in (-1e4, 0.0, 7.5, 1e4):
        np.testing.assert_allclose(ops.softmax([c] * 4), [0.25] * 4)
    np.testing.assert_allclose(ops.softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)
    assert np.all(np.isfinite(ops.softmax([1000.0, -1000.0])))
    with pytest.raises(ValueError):
        ops.softmax([])


def test_cross_entropy():
    assert ops.cross_entropy_loss(np.array([0.25, 0.75]), 1) == pytest.approx(-math.log(0.75))
    assert ops.cross_entropy_loss(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(IndexError):
        ops.cross_entropy_loss(np.array([0.5, 0.5]), 2)


def test_relu():
    assert ops.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]


# -- shapes and counting -------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(1, 20), w=st.integers(1, 20), c=st.integers(1, 5),
    k=st.integers(1, 4), s=st.integers(1, 3), f=st.integers(1, 6),
)
def test_conv_shape_rule_matches_kernel_output(h, w, c, k, s, f):
    layer = conv("c", f, kernel=k, stride=s)
    if k > h or k > w:
        with pytest.raises(ShapeError):
            output_shape(layer, (h, w, c))
        return
    expected = ((h - k) // s + 1, (w - k) // s + 1, f)
    assert output_shape(layer, (h, w, c)) == expected
    y = ops.conv2d_forward(np.zeros((h, w, c)), np.zeros((k, k, c, f)), np.zeros(f), s)
    assert y.shape == expected


@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 16), w=st.integers(2, 16), c=st.integers(1, 4), k=st.integers(1, 3))
def test_macs_are_nonnegative_and_additive(h, w, c, k):
    layers = [conv("a", 3, kernel=1), relu("r"), depthwise("d", kernel=min(k, h, w)), pointwise("p", 2),
              flatten("f"), dense("o", 4), softmax("s")]
    total = mac_count(layers, (h, w, c))
    parts = [layer_macs(layer, s[0]) for layer, s in zip(layers, infer_shapes(layers, (h, w, c)))]
    assert total == sum(parts) and min(parts) >= 0
    assert mac_count(layers, (h, w, c), prefix=0) == 0


def test_param_counts_reference_layers():
    assert layer_params(conv("c1", 32), (30, 30, 1)) == 160
    assert layer_params(conv("c4", 8), (28, 28, 64)) == 2_056
    assert layer_params(conv("c3", 128), (28, 28, 64)) == 32_896


def test_mac_counts():
    assert layer_macs(dense("d", 3), (4,)) == 12
    assert layer_macs(conv("c1", 32), (30, 30, 1)) == 29 * 29 * 32 * 4 == 107_648
    assert layer_macs(relu("r"), (5, 5, 2)) == 0
    assert layer_macs(maxpool("m"), (4, 4, 2)) == 0
    assert layer_macs(depthwise("d"), (28, 28, 64)) == 27 * 27 * 64 * 4
    with pytest.raises(ValueError):
        mac_count([relu("r")], (2, 2, 1), prefix=3)


def test_param_count_table():
    layers = [conv("c", 4), relu("r"), flatten("f"), dense("o", 3), softmax("s")]
    per, total = param_count(layers, (3, 3, 1))
    assert per == {"c": 2 * 2 * 1 * 4 + 4, "o": 16 * 3 + 3}
    assert total == sum(per.values())


def test_layer_spec_validation_and_roundtrip():
    for layer in (conv("c", 4, stride=2), depthwise("d"), pointwise("p", 3), maxpool("m", 3),
                  dense("o", 5), relu("r"), softmax("s"), flatten("f")):
        assert LayerSpec.from_dict(json.loads(json.dumps(layer.to_dict()))) == layer
    assert maxpool("m", 3).stride == 3
    assert pointwise("p", 3).kernel == (1, 1)
    with pytest.raises(ValueError):
        LayerSpec("x", "lstm")
    with pytest.raises(ValueError):
        LayerSpec("c", "conv2d", kernel=(2, 2))
    with pytest.raises(ValueError):
        conv("c", 4, stride=0)
    with pytest.raises(ShapeError):
        output_shape(dense("o", 3), (2, 2, 1))


# -- network -------------------------------------------------------------


def small_net():
    return [conv("c", 3), relu("r"), maxpool("m", 2, 1), depthwise("d"), pointwise("p", 2),
            flatten("f"), dense("o", 3), softmax("s")]


def test_gradient_single_dense_layer(rng):
    layers = [dense("o", 4), softmax("s")]
    w = init_weights(layers, (6,), seed=0, dtype=np.float64)
    w["o/bias"][:] = rng.standard_normal(4)
    err, blocks = max_relative_error(layers, w, rng.standard_normal((5, 6)), rng.integers(0, 4, 5))
    assert blocks == ["o/bias", "o/kernel"]
    assert err <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_gradient_conv_relu_dense_stack(seed):
    rng = np.random.default_rng(seed)
    layers = [conv("c", 3), relu("r"), flatten("f"), dense("o", 4), softmax("s")]
    w = init_weights(layers, (4, 4, 2), seed=seed, dtype=np.float64)
    w["c/bias"][:] = rng.uniform(0.05, 0.2, 3)
    err, _ = max_relative_error(layers, w, rng.standard_normal((3, 4, 4, 2)), rng.integers(0, 4, 3))
    assert err <= 1e-4


def test_backward_respects_frozen_blocks(rng):
    layers = [conv("c", 3), relu("r"), flatten("f"), dense("o", 2), softmax("s")]
    w = init_weights(layers, (3, 3, 1), seed=0)
    w.freeze(["c/kernel", "c/bias"])
    _, grads = backward(layers, w, rng.random((2, 3, 3, 1)), [0, 1])
    assert sorted(grads) == ["o/bias", "o/kernel"]
    before = w["c/kernel"].copy()
    sgd_step(w, {"c/kernel": np.ones_like(before)}, 1.0)
    assert np.array_equal(w["c/kernel"], before)


def test_backward_errors(rng):
    layers = [flatten("f"), dense("o", 2), softmax("s")]
    w = init_weights(layers, (2, 2, 1), seed=0)
    with pytest.raises(IndexError):
        backward(layers, w, rng.random((1, 2, 2, 1)), [2])
    with pytest.raises(ShapeError):
        backward(layers[:-1], w, rng.random((1, 2, 2, 1)), [0])
    with pytest.raises(ShapeError):
        backward(layers, w, rng.random((2, 2, 2, 1)), [0])


def test_zero_lr_leaves_weights_bit_identical(rng):
    layers = small_net()
    w = init_weights(layers, (5, 5, 1), seed=0)
    before = w.copy()
    train_sgd(layers, w, rng.random((8, 5, 5, 1), dtype=np.float32), rng.integers(0, 3, 8), lr=0.0, epochs=2)
    assert all(np.array_equal(w[k], before[k]) for k in w.keys())


def test_training_is_deterministic_and_learns(rng):
    layers = small_net()
    x = rng.random((48, 5, 5, 1), dtype=np.float32)
    y = (x[:, 0, 0, 0] > 0.5).astype(np.int64) + (x[:, 4, 4, 0] > 0.5)
    runs = []
    for _ in range(2):
        w = init_weights(layers, (5, 5, 1), seed=3)
        hist = train_sgd(layers, w, x, y, lr=0.2, epochs=30, batch_size=8, seed=1)
        runs.append((w, hist))
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0].keys())
    assert runs[0][1][-1] < runs[0][1][0]


def test_training_divergence_is_reported(rng):
    layers = [flatten("f"), dense("o", 2), softmax("s")]
    w = init_weights(layers, (2, 2, 1), seed=0)
    x = np.full((4, 2, 2, 1), np.nan, dtype=np.float32)
    with pytest.raises(TrainingDiverged):
        train_sgd(layers, w, x, np.zeros(4, dtype=np.int64), lr=0.1, epochs=1)
    with pytest.raises(ValueError):
        train_sgd(layers, w, x[:0], np.zeros(0, dtype=np.int64), lr=0.1, epochs=1)


def test_predict_matches_forward_and_batches(rng):
    layers = small_net()
    w = init_weights(layers, (5, 5, 1), seed=0)
    x = rng.random((10, 5, 5, 1), dtype=np.float32)
    np.testing.assert_array_equal(predict(layers, w, x, batch_size=3), forward(layers, w, x))


def test_weight_store_checksum():
    w = WeightStore({"a": np.zeros(3, np.float32), "b": np.ones(2, np.float32)})
    c = w.checksum()
    assert w.checksum(["a"]) != c
    w["a"][0] = 1
    assert w.checksum() != c
    assert w.n_params == 5


# -- serialization -------------------------------------------------------


def test_model_file_roundtrip(tmp_path, rng):
    blocks = [("a/kernel", rng.random((2, 3), dtype=np.float32)), ("a/bias", np.zeros(3, np.float32))]
    path = write_model(tmp_path / "m.json", {"note": "x"}, blocks)
    doc = read_manifest(path)
    assert doc["magic"] == MAGIC and doc["note"] == "x"
    _, loaded = read_model(path)
    for name, arr in blocks:
        assert np.array_equal(loaded[name], arr) and loaded[name].dtype == np.float32
    assert blob_path_for(path).stat().st_size == 4 * (6 + 3)


def test_model_file_corruption_detected(tmp_path, rng):
    path = write_model(tmp_path / "m.json", {}, [("w", rng.random(4, dtype=np.float32))])
    blob = blob_path_for(path)
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ModelFormatError):
        read_model(path)
    doc = json.loads(path.read_text())
    doc["magic"] = "NOPE"
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError):
        read_manifest(path)
    with pytest.raises(ModelFormatError):
        read_manifest(tmp_path / "missing.json")
