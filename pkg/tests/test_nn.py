"""Tests for the dense network core.

Forward, loss, and gradient values are checked against independent oracles:
nested-loop arithmetic, hand-computed closed forms, and central finite
differences. No expected value below is copied from the implementation.
"""
import numpy as np
import pytest

from dflsim import nn


def loop_forward(model, x):
    """Scalar-loop re-implementation of the network forward pass."""
    out = []
    for row in x:
        a = list(row)
        for layer in model.layers:
            z = []
            for i in range(layer.out_dim):
                s = layer.bias[i]
                for j in range(layer.in_dim):
                    s += layer.weights[i, j] * a[j]
                z.append(s)
            if layer.activation == "relu":
                a = [max(v, 0.0) for v in z]
            else:
                a = z
        out.append(a)
    return np.array(out)


def numeric_grad(objective, arr, step=1e-5):
    """Central finite differences of a scalar objective w.r.t. one array."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        hi = objective()
        arr[idx] = orig - step
        lo = objective()
        arr[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return g


def grad_error(analytic, numeric):
    """Relative error, falling back to absolute near zero."""
    worst = 0.0
    for a, b in zip(np.ravel(analytic), np.ravel(numeric)):
        scale = max(abs(a), abs(b))
        err = abs(a - b) / scale if scale >= 1e-4 else abs(a - b)
        worst = max(worst, err)
    return worst


def test_init_shapes_and_bounds():
    model = nn.init_model([16, 64, 32, 4], split_index=2, seed=7)
    dims = [(64, 16), (32, 64), (4, 32)]
    for layer, (o, i) in zip(model.layers, dims):
        assert layer.weights.shape == (o, i)
        assert layer.bias.shape == (o,)
        assert np.all(layer.bias == 0.0)
        limit = np.sqrt(6.0 / (o + i))
        assert np.all(np.abs(layer.weights) <= limit)
        assert layer.weights.dtype == np.float64
    assert model.layers[0].activation == "relu"
    assert model.layers[1].activation == "relu"
    assert model.layers[2].activation == "identity"
    assert model.feature_dim == 32


def test_init_is_seed_deterministic():
    a = nn.init_model([8, 16, 8, 3], 2, seed=11)
    b = nn.init_model([8, 16, 8, 3], 2, seed=11)
    c = nn.init_model([8, 16, 8, 3], 2, seed=12)
    assert nn.model_equal(a, b)
    assert not nn.model_equal(a, c)


def test_param_counts():
    model = nn.init_model([16, 64, 32, 4], split_index=2, seed=0)
    # 16*64+64 + 64*32+32 = 1088 + 2080
    assert nn.g_param_count(model) == 3168
    # 32*4+4
    assert nn.h_param_count(model) == 132
    assert nn.param_count(model.layers) == 3300


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for trial in range(5):
        model = nn.init_model([6, 9, 5, 4], 2, seed=100 + trial)
        x = rng.normal(size=(7, 6))
        got = nn.forward(model, x)
        want = loop_forward(model, x)
        assert got.shape == (7, 4)
        assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_feature_forward_is_prefix_of_forward():
    rng = np.random.default_rng(4)
    model = nn.init_model([5, 8, 6, 3], 2, seed=21)
    x = rng.normal(size=(4, 5))
    feats = nn.feature_forward(model, x)
    assert feats.shape == (4, 6)
    # Feeding features through the tail alone must reproduce the logits.
    tail = feats.copy()
    for layer in model.layers[2:]:
        z = tail @ layer.weights.T + layer.bias
        tail = np.maximum(z, 0.0) if layer.activation == "relu" else z
    assert np.allclose(tail, nn.forward(model, x), atol=1e-12)


def test_softmax_closed_form():
    # softmax(ln 1, ln 2, ln 3) = (1/6, 2/6, 3/6)
    p = nn.softmax(np.log(np.array([[1.0, 2.0, 3.0]])))
    assert np.allclose(p, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(10, 6)) * 50
    p = nn.softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p > 0)
    assert np.allclose(nn.softmax(z + 123.0), p, atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    p = nn.softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(p).all()
    assert p[0, 0] > 0.999


def test_cross_entropy_direct_summation():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
    labels = np.array([0, 2])
    want = -(np.log(0.7) + np.log(0.1)) / 2
    assert nn.cross_entropy(probs, labels) == pytest.approx(want, abs=1e-15)


def test_cross_entropy_rejects_bad_labels():
    probs = np.full((2, 3), 1 / 3)
    with pytest.raises(IndexError):
        nn.cross_entropy(probs, np.array([0, 3]))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    for trial in range(3):
        model = nn.init_model([5, 7, 4, 3], 2, seed=40 + trial)
        x = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, size=6)
        bundle = nn.backward(model, x, y)

        def objective():
            return nn.cross_entropy(nn.softmax(nn.forward(model, x)), y)

        assert bundle.loss == pytest.approx(objective(), abs=1e-12)
        for k, layer in enumerate(model.layers):
            werr = grad_error(bundle.weight_grads[k], numeric_grad(objective, layer.weights))
            berr = grad_error(bundle.bias_grads[k], numeric_grad(objective, layer.bias))
            assert werr <= 1e-4, f"trial {trial} layer {k} weights err {werr}"
            assert berr <= 1e-4, f"trial {trial} layer {k} bias err {berr}"


def test_backward_with_anchor_matches_finite_differences():
    rng = np.random.default_rng(7)
    model = nn.init_model([4, 6, 5, 3], 2, seed=55)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    unit = np.ones(4)
    target = rng.normal(size=5)
    mu = 0.7
    bundle = nn.backward(model, x, y, unit_tensor=unit, aux_target=target, mu=mu)

    def objective():
        ce = nn.cross_entropy(nn.softmax(nn.forward(model, x)), y)
        phi = nn.feature_forward(model, unit.reshape(1, -1))[0]
        return ce + mu * float((phi - target) @ (phi - target))

    assert bundle.loss == pytest.approx(objective(), abs=1e-12)
    for k, layer in enumerate(model.layers):
        werr = grad_error(bundle.weight_grads[k], numeric_grad(objective, layer.weights))
        berr = grad_error(bundle.bias_grads[k], numeric_grad(objective, layer.bias))
        assert werr <= 1e-4, f"layer {k} weights err {werr}"
        assert berr <= 1e-4, f"layer {k} bias err {berr}"


def test_anchor_gradient_touches_only_feature_layers():
    rng = np.random.default_rng(8)
    model = nn.init_model([4, 6, 5, 3], 2, seed=60)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    unit = np.ones(4)
    target = rng.normal(size=5)
    plain = nn.backward(model, x, y)
    anchored = nn.backward(model, x, y, unit_tensor=unit, aux_target=target, mu=0.9)
    # Classifier gradients are identical; at least one extractor grad moves.
    for k in range(model.split_index, len(model.layers)):
        assert np.array_equal(plain.weight_grads[k], anchored.weight_grads[k])
        assert np.array_equal(plain.bias_grads[k], anchored.bias_grads[k])
    moved = any(
        not np.array_equal(plain.weight_grads[k], anchored.weight_grads[k])
        for k in range(model.split_index)
    )
    assert moved


def test_mu_zero_anchor_is_no_op():
    rng = np.random.default_rng(9)
    model = nn.init_model([4, 6, 5, 3], 2, seed=61)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    plain = nn.backward(model, x, y)
    zeroed = nn.backward(
        model, x, y, unit_tensor=np.ones(4), aux_target=rng.normal(size=5), mu=0.0
    )
    assert plain.loss == zeroed.loss
    for k in range(len(model.layers)):
        assert np.array_equal(plain.weight_grads[k], zeroed.weight_grads[k])


def test_sgd_step_momentum_recurrence():
    # Constant gradient g for two steps from zero buffers:
    #   step 1: buf = g,            param -= lr * g
    #   step 2: buf = m*g + g,      param -= lr * (m + 1) * g
    # Total displacement: -lr * (2 + m) * g.
    model = nn.init_model([3, 4, 4, 2], 2, seed=70)
    start = model.copy()
    opt = nn.init_optimizer(model, learning_rate=0.05, momentum=0.5, decay=0.95)
    g = nn.GradientBundle(
        [np.ones_like(l.weights) for l in model.layers],
        [np.ones_like(l.bias) for l in model.layers],
        loss=0.0,
    )
    model, opt = nn.sgd_step(model, g, opt)
    model, opt = nn.sgd_step(model, g, opt)
    for k in range(len(model.layers)):
        want = start.layers[k].weights - 0.05 * 2.5
        assert np.allclose(model.layers[k].weights, want, atol=1e-15)
        assert np.allclose(opt.weight_buffers[k], 1.5, atol=1e-15)


def test_sgd_step_is_pure():
    model = nn.init_model([3, 4, 4, 2], 2, seed=71)
    before = model.copy()
    opt = nn.init_optimizer(model)
    g = nn.GradientBundle(
        [np.ones_like(l.weights) for l in model.layers],
        [np.ones_like(l.bias) for l in model.layers],
        loss=0.0,
    )
    nn.sgd_step(model, g, opt)
    assert nn.model_equal(model, before)
    assert all(np.all(b == 0) for b in opt.weight_buffers)


def test_split_combine_round_trip():
    model = nn.init_model([5, 8, 6, 3], 2, seed=80)
    g, h = nn.split(model)
    rebuilt = nn.combine(g, h)
    assert nn.model_equal(rebuilt, model)
    # Mutating the split copies must not touch the original.
    g[0].weights[0, 0] += 1.0
    assert nn.model_equal(nn.combine(*nn.split(model)), model)


def test_combine_across_models():
    a = nn.init_model([5, 8, 6, 3], 2, seed=81)
    b = nn.init_model([5, 8, 6, 3], 2, seed=82)
    ga, _ = nn.split(a)
    _, hb = nn.split(b)
    mixed = nn.combine(ga, hb)
    x = np.ones((2, 5))
    feats = nn.feature_forward(mixed, x)
    assert np.allclose(feats, nn.feature_forward(a, x), atol=1e-15)
    # Tail of the mixed model is b's classifier applied to a's features.
    tail = feats.copy()
    for layer in b.layers[2:]:
        z = tail @ layer.weights.T + layer.bias
        tail = np.maximum(z, 0.0) if layer.activation == "relu" else z
    assert np.allclose(nn.forward(mixed, x), tail, atol=1e-15)


def test_combine_rejects_boundary_mismatch():
    a = nn.init_model([5, 8, 6, 3], 2, seed=83)
    b = nn.init_model([5, 8, 7, 3], 2, seed=84)
    ga, _ = nn.split(a)
    _, hb = nn.split(b)
    with pytest.raises(ValueError):
        nn.combine(ga, hb)


def test_layer_validation():
    with pytest.raises(ValueError):
        nn.DenseLayer(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        nn.DenseLayer(np.zeros((3, 2)), np.zeros(3), activation="tanh")
    with pytest.raises(ValueError):
        nn.DenseLayer(np.full((3, 2), np.nan), np.zeros(3))


def test_model_validation():
    l1 = nn.DenseLayer(np.zeros((4, 3)), np.zeros(4))
    l2 = nn.DenseLayer(np.zeros((2, 4)), np.zeros(2), activation="identity")
    nn.LayeredModel([l1, l2], 1)
    with pytest.raises(ValueError):
        nn.LayeredModel([l1, l2], 2)
    l_bad = nn.DenseLayer(np.zeros((2, 5)), np.zeros(2), activation="identity")
    with pytest.raises(ValueError):
        nn.LayeredModel([l1, l_bad], 1)
