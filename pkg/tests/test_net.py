import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnq import net
from conftest import TOY_ARCH


def _reference_logits(model, x):
    """Loop-based forward pass that shares no code with the engine."""
    out = []
    for sample in x:
        h = sample
        for i, layer in enumerate(model.layers):
            spec, W, b = layer.spec, layer.weight, layer.bias
            if spec.kind == "dense":
                flat = h.ravel()
                h = np.array([math.fsum(W[o, j] * flat[j] for j in range(len(flat))) + b[o] for o in range(spec.fan_out)])
            else:
                c, hh, ww = h.shape
                kh, kw = spec.kernel
                p, s = spec.padding, spec.stride
                padded = np.zeros((c, hh + 2 * p, ww + 2 * p))
                padded[:, p : p + hh, p : p + ww] = h
                ho = (hh + 2 * p - kh) // s + 1
                wo = (ww + 2 * p - kw) // s + 1
                res = np.zeros((spec.fan_out, ho, wo))
                for o in range(spec.fan_out):
                    for r in range(ho):
                        for q in range(wo):
                            terms = [
                                W[o, ci, a, bb] * padded[ci, r * s + a, q * s + bb]
                                for ci in range(c) for a in range(kh) for bb in range(kw)
                            ]
                            res[o, r, q] = math.fsum(terms) + b[o]
                h = res
            if i < len(model.layers) - 1:
                h = np.maximum(h, 0.0)
        out.append(h.ravel())
    return np.array(out)


def _reference_loss(z, labels):
    total = 0.0
    for row, y in zip(z, labels):
        m = max(row)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def _batch(model, n, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, *model.input_shape))
    y = r.integers(0, model.num_classes, size=n)
    return net.Dataset(x, y, model.num_classes)


def test_uniform_logits_give_log_c():
    model = net.build_model((5,), [{"kind": "dense", "out": 4}], seed=0)
    model.layers[0].weight[...] = 0.0
    batch = net.Dataset(np.ones((3, 5)), [0, 1, 3], 4)
    _, loss = net.forward(model, batch)
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_identity_like_dense_selects_weight_row():
    model = net.build_model((4,), [{"kind": "dense", "out": 3}], seed=1)
    x = np.zeros((1, 4))
    x[0, 2] = 1.0
    z, _ = net.forward(model, net.Dataset(x, [0], 3))
    np.testing.assert_array_equal(z[0], model.layers[0].weight[:, 2])


def test_forward_matches_scripted_reference():
    model = net.build_model((2, 6, 6), TOY_ARCH, seed=42)
    for layer in model.layers:
        layer.bias[...] = np.random.default_rng(7).normal(size=layer.bias.shape) * 0.1
    batch = _batch(model, 5, seed=42)
    z, loss = net.forward(model, batch)
    ref = _reference_logits(model, batch.inputs)
    np.testing.assert_allclose(z, ref, rtol=0, atol=1e-10)
    assert abs(loss - _reference_loss(ref, batch.labels)) < 1e-10


def _numeric_grads(model, batch, h=1e-5):
    out = []
    for layer in model.layers:
        pair = []
        for arr in (layer.weight, layer.bias):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                lp = net.forward(model, batch)[1]
                flat[i] = old - h
                lm = net.forward(model, batch)[1]
                flat[i] = old
                gflat[i] = (lp - lm) / (2 * h)
            pair.append(g)
        out.append(pair)
    return out


ARCHS = {
    "dense": ((7,), [{"kind": "dense", "out": 6}, {"kind": "dense", "out": 5}, {"kind": "dense", "out": 3}]),
    "conv_stride_pad": ((2, 6, 6), TOY_ARCH),
    "conv_plain": ((1, 5, 5), [
        {"kind": "conv2d", "out": 2, "kernel": 3},
        {"kind": "conv2d", "out": 3, "kernel": (2, 1), "stride": 1},
        {"kind": "dense", "out": 4},
    ]),
}


@pytest.mark.parametrize("name", sorted(ARCHS))
def test_gradients_match_central_differences(name):
    shape, arch = ARCHS[name]
    model = net.build_model(shape, arch, seed=3)
    for layer in model.layers:
        layer.bias[...] = np.random.default_rng(11).normal(size=layer.bias.shape) * 0.1
    batch = _batch(model, 4, seed=5)
    _, analytic = net.loss_and_grads(model, batch.inputs, batch.labels)
    numeric = _numeric_grads(model, batch)
    for (dw, db), (nw, nb) in zip(analytic, numeric):
        np.testing.assert_allclose(dw, nw, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(db, nb, rtol=1e-6, atol=1e-9)


def test_zero_input_gives_zero_dense_weight_gradient():
    model = net.build_model((6,), [{"kind": "dense", "out": 3}], seed=0)
    grads = net.backward(model, net.Dataset(np.zeros((4, 6)), [0, 1, 2, 0], 3))
    assert np.all(grads[0] == 0.0)


def test_duplicated_batch_leaves_mean_gradient_unchanged(toy_conv_model):
    batch = _batch(toy_conv_model, 6, seed=9)
    doubled = net.Dataset(np.concatenate([batch.inputs] * 2), np.concatenate([batch.labels] * 2), batch.num_classes)
    for a, b in zip(net.backward(toy_conv_model, batch), net.backward(toy_conv_model, doubled)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_gradient_shapes_match_weights(toy_conv_model):
    grads = net.backward(toy_conv_model, _batch(toy_conv_model, 3, 0))
    assert [g.shape for g in grads] == [l.weight.shape for l in toy_conv_model.layers]


def test_sgd_hand_example():
    model = net.build_model((1,), [{"kind": "dense", "out": 1}], seed=0)
    model.layers[0].weight[...] = 1.0
    net.sgd_step(model, [np.array([[0.5]])], lr=0.1, masks=[np.ones((1, 1))])
    assert model.layers[0].weight[0, 0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_mask_is_bit_identical(toy_conv_model):
    before = [l.weight.copy() for l in toy_conv_model.layers]
    grads = net.backward(toy_conv_model, _batch(toy_conv_model, 4, 1))
    net.sgd_step(toy_conv_model, grads, 0.3, masks=[np.zeros_like(w) for w in before], update_bias=False)
    for b, l in zip(before, toy_conv_model.layers):
        assert b.tobytes() == l.weight.tobytes()


def test_sgd_ones_mask_equals_plain_sgd(toy_conv_model):
    a, b = toy_conv_model.copy(), toy_conv_model.copy()
    grads = net.backward(toy_conv_model, _batch(toy_conv_model, 4, 1))
    net.sgd_step(a, grads, 0.1)
    net.sgd_step(b, grads, 0.1, masks=[np.ones_like(g) for g in grads])
    for la, lb in zip(a.layers, b.layers):
        assert la.weight.tobytes() == lb.weight.tobytes()


@pytest.mark.parametrize("lr", [0.0, -0.1])
def test_sgd_rejects_non_positive_lr(toy_conv_model, lr):
    grads = net.backward(toy_conv_model, _batch(toy_conv_model, 2, 0))
    with pytest.raises(ValueError):
        net.sgd_step(toy_conv_model, grads, lr)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 6), density=st.floats(0.0, 1.0))
def test_masked_entries_never_move(seed, steps, density):
    model = net.build_model((2, 6, 6), TOY_ARCH, seed=seed)
    r = np.random.default_rng(seed)
    masks = [(r.random(l.weight.shape) < density).astype(float) for l in model.layers]
    frozen = [l.weight[m == 0].copy() for l, m in zip(model.layers, masks)]
    for s in range(steps):
        grads = net.backward(model, _batch(model, 3, seed + s))
        net.sgd_step(model, grads, 0.5, masks)
    for l, m, f in zip(model.layers, masks, frozen):
        assert l.weight[m == 0].tobytes() == f.tobytes()


def test_dataset_is_deterministic():
    a = net.make_synthetic_dataset(7, 3, 50, 20)
    b = net.make_synthetic_dataset(7, 3, 50, 20)
    assert a.train.inputs.tobytes() == b.train.inputs.tobytes()
    assert a.eval.labels.tobytes() == b.eval.labels.tobytes()


def test_split_sizes_and_disjointness():
    d = net.make_synthetic_dataset(1, 4, 100, 50)
    assert len(d.train) == 100 and len(d.eval) == 50
    train_rows = {row.tobytes() for row in d.train.inputs}
    assert not any(row.tobytes() in train_rows for row in d.eval.inputs)
    assert d.train.labels.min() >= 0 and d.train.labels.max() < 4


def test_two_class_separable_reaches_95_percent():
    d = net.make_synthetic_dataset(0, 2, 400, 100, shape=(16,), noise=0.3)
    model = net.build_model((16,), [{"kind": "dense", "out": 16}, {"kind": "dense", "out": 2}], seed=0)
    net.train(model, d.train, steps=2000, lr=0.05, batch_size=50, seed=1)
    assert net.accuracy(model, d.train) >= 0.95


def test_training_is_bit_deterministic(small_data):
    arch = [{"kind": "conv2d", "out": 3, "kernel": 3, "padding": 1}, {"kind": "dense", "out": 4}]
    runs = []
    for _ in range(2):
        m = net.build_model((1, 6, 6), arch, seed=4)
        net.train(m, small_data.train, 50, 0.05, 32, seed=9)
        runs.append(net.checkpoint_bytes(m))
    assert runs[0] == runs[1]


def test_checkpoint_round_trip(tmp_path, toy_conv_model):
    path = tmp_path / "m.ckpt"
    net.save_checkpoint(toy_conv_model, path)
    assert path.read_bytes()[:4] == b"DNQ1"
    back = net.load_checkpoint(path)
    assert back.specs == toy_conv_model.specs
    for a, b in zip(back.layers, toy_conv_model.layers):
        assert a.weight.tobytes() == b.weight.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()
    assert net.checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_rejects_bad_magic(toy_conv_model):
    buf = b"XXXX" + net.checkpoint_bytes(toy_conv_model)[4:]
    with pytest.raises(ValueError):
        net.checkpoint_from_bytes(buf)


def test_shape_mismatch_names_the_layer(toy_conv_model):
    with pytest.raises(net.ShapeError, match="conv1"):
        net.forward(toy_conv_model, net.Dataset(np.zeros((2, 2, 5, 5)), [0, 1], 3))


def test_param_count_is_weight_scalars(toy_conv_model):
    for layer in toy_conv_model.layers:
        assert layer.spec.param_count == layer.weight.size


def test_outputs_stay_finite(toy_conv_model):
    z, loss = net.forward(toy_conv_model, _batch(toy_conv_model, 8, 2))
    assert np.all(np.isfinite(z)) and math.isfinite(loss)
