import numpy as np
import pytest

from salmap.tensors import CaptureConfig
from salmap.tinycnn import (
    ConvLayer,
    NumericError,
    TinyCnnModel,
    backward_class_score,
    build_model,
    counters,
    default_model,
    forward,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    train_sgd,
)


def small_model(seed=0, in_channels=1, classes=4):
    return build_model(seed, in_channels, (4, 6), classes)


def random_image(seed, c=1, h=16, w=16):
    return np.random.default_rng(seed).random((c, h, w))


def test_forward_shapes_and_trace_layout():
    model = small_model()
    trace = forward(model, random_image(0))
    assert len(trace.layers) == 2
    assert trace.layers[0].values.shape == (4, 8, 8)
    assert trace.layers[1].values.shape == (6, 4, 4)
    assert trace.embedding.shape == (6,)
    assert trace.logits.shape == (4,)


def test_head_is_gap_plus_linear():
    model = small_model(3)
    trace = forward(model, random_image(3))
    gap = trace.layers[-1].values.mean(axis=(1, 2))
    assert np.allclose(trace.embedding, gap, atol=1e-12)
    assert np.allclose(trace.logits, model.head_weight @ gap + model.head_bias, atol=1e-12)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(5)
    x = rng.random((2, 6, 6))
    kernels = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    layer = ConvLayer(kernels=kernels, bias=bias, stride=1, padding=1, relu=False, pool=False)
    model = TinyCnnModel(
        layers=(layer,),
        head_weight=np.zeros((1, 3)),
        head_bias=np.zeros(1),
        seed=0,
    )
    got = forward(model, x).layers[0].values

    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    want = np.zeros((3, 6, 6))
    for o in range(3):
        for i in range(6):
            for j in range(6):
                want[o, i, j] = (
                    np.sum(padded[:, i : i + 3, j : j + 3] * kernels[o]) + bias[o]
                )
    assert np.max(np.abs(got - want)) < 1e-12


def test_pool_keeps_first_max_in_row_major_order():
    # all four window values equal: gradient must land on the top-left slot
    layer = ConvLayer(
        kernels=np.ones((1, 1, 1, 1)),
        bias=np.zeros(1),
        stride=1,
        padding=0,
        relu=True,
        pool=True,
    )
    model = TinyCnnModel(
        layers=(layer,), head_weight=np.ones((1, 1)), head_bias=np.zeros(1), seed=0
    )
    image = np.ones((1, 2, 2))
    trace = forward(model, image)
    g = backward_class_score(
        model, trace, 0, CaptureConfig(layer_index=0, post_activation=False)
    )
    # pooled output is 1x1; its gradient routes to exactly one input cell
    assert g.shape == (1, 2, 2)
    assert g[0, 0, 0] != 0.0
    assert g[0, 0, 1] == g[0, 1, 0] == g[0, 1, 1] == 0.0


def test_last_layer_gradient_is_head_row_over_area():
    model = small_model(7)
    trace = forward(model, random_image(7))
    h, w = trace.layers[-1].values.shape[1:]
    for c in range(model.classes):
        g = backward_class_score(model, trace, c, len(model.layers) - 1)
        want = np.repeat(model.head_weight[c], h * w).reshape(-1, h, w)
        assert np.max(np.abs(g - want / (h * w))) < 1e-15


def test_grad_check_small_models():
    for seed in range(3):
        model = small_model(seed)
        image = random_image(seed + 100)
        report = grad_check(model, image, class_index=seed % 4, epsilon=1e-3, seed=seed)
        assert report.checked >= 100
        assert report.max_rel_err <= 1e-4, report


def test_grad_check_at_the_last_layer():
    # 6x4x4 volume: fewer coordinates, but every one must still agree
    model = small_model(11)
    image = random_image(11)
    report = grad_check(
        model, image, class_index=1, epsilon=1e-3, layer_index=1, seed=2
    )
    assert report.checked >= 50
    assert report.max_rel_err <= 1e-4


def test_backward_counter_increments():
    model = small_model(1)
    trace = forward(model, random_image(1))
    before = counters["backward_passes"]
    backward_class_score(model, trace, 0, 1)
    assert counters["backward_passes"] == before + 1


def test_embed_batch_matches_single_embeds():
    model = small_model(2)
    images = np.stack([random_image(i) for i in range(6)])
    batch = model.embed_batch(images)
    singles = np.stack([model.embed(img) for img in images])
    assert np.max(np.abs(batch - singles)) < 1e-12


def test_init_is_deterministic_per_seed():
    a, b = default_model(123), default_model(123)
    for pa, pb in zip(a._parameters(), b._parameters()):
        assert np.array_equal(pa, pb)
    c = default_model(124)
    assert not np.array_equal(a.layers[0].kernels, c.layers[0].kernels)


def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(0)
    # two blob classes, trivially separable
    data = []
    for i in range(24):
        img = rng.random((1, 12, 12)) * 0.1
        label = i % 2
        if label:
            img[0, :6, :6] += 0.9
        else:
            img[0, 6:, 6:] += 0.9
        data.append((img, label))
    model = build_model(0, 1, (4,), 2)
    r1 = train_sgd(model, data, epochs=5, learning_rate=0.2, batch_size=4, seed=9)
    r2 = train_sgd(model, data, epochs=5, learning_rate=0.2, batch_size=4, seed=9)
    assert r1.epoch_losses[-1] < r1.epoch_losses[0]
    assert r1.epoch_losses == r2.epoch_losses
    for pa, pb in zip(r1.model._parameters(), r2.model._parameters()):
        assert np.array_equal(pa, pb)
    # the input model is left untouched
    assert np.array_equal(model.layers[0].kernels, build_model(0, 1, (4,), 2).layers[0].kernels)


def test_train_rejects_nonfinite_blowups():
    data = [(np.full((1, 8, 8), 10.0), 0), (np.full((1, 8, 8), -10.0), 1)]
    model = build_model(0, 1, (4,), 2)
    with np.errstate(all="ignore"):
        with pytest.raises(NumericError):
            train_sgd(model, data, epochs=60, learning_rate=1e6, batch_size=2, seed=0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = small_model(31)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.seed == model.seed
    for pa, pb in zip(model._parameters(), back._parameters()):
        assert pa.dtype == pb.dtype
        assert np.array_equal(pa, pb)
    for la, lb in zip(model.layers, back.layers):
        assert (la.stride, la.padding, la.relu, la.pool) == (
            lb.stride,
            lb.padding,
            lb.relu,
            lb.pool,
        )


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_model_validation_catches_mismatched_shapes():
    layer = ConvLayer(
        kernels=np.ones((2, 1, 3, 3)), bias=np.zeros(2), stride=1, padding=1,
        relu=True, pool=True,
    )
    with pytest.raises(ValueError):
        TinyCnnModel(layers=(layer,), head_weight=np.ones((3, 5)), head_bias=np.zeros(3), seed=0)
