import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mjkd_adapt.network import (
    AdaptationModel,
    Batch,
    Dense,
    LossSpec,
    NonFiniteLossError,
    backprop,
    bottleneck,
    classify,
    discriminate,
    forward_features,
    grl_backward,
    init_discriminator,
    init_model,
    load_checkpoint,
    outer_product,
    save_checkpoint,
    softmax,
)


def small_setup(seed=0, condition="product", dropout=0.0):
    rng = np.random.default_rng(seed)
    model = init_model(4, 3, hidden=(6,), bottleneck=4, rng=rng)
    for layer in model.layers:
        layer.bias[:] = rng.normal(scale=0.3, size=layer.bias.shape)
    disc = init_discriminator(4, 3, hidden=5, dropout=dropout, condition=condition, rng=rng)
    for layer in disc.layers:
        layer.bias[:] = rng.normal(scale=0.3, size=layer.bias.shape)
    x = rng.normal(size=(10, 4))
    batch = Batch(x, [0, 2, 1, 1, 0, -1, -1, -1, -1, -1], [1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
    return model, disc, batch


def cls_loss(model, batch):
    rows = batch.labels >= 0
    p = classify(model, batch.x[rows])
    return -np.mean(np.log(p[np.arange(rows.sum()), batch.labels[rows]]))


def dom_loss(model, disc, batch, mask_seed=None):
    rows = batch.domain >= 0
    x = batch.x[rows]
    f = bottleneck(model, x)
    v = outer_product(f, classify(model, x)) if disc.condition == "product" else f
    rng = np.random.default_rng(mask_seed) if mask_seed is not None else None
    d = discriminate(disc, v, train_mode=mask_seed is not None, rng=rng)
    y = batch.domain[rows]
    return -np.mean(y * np.log(d) + (1 - y) * np.log(1 - d))


def central_diff(fn, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = fn()
            p[idx] = old - h
            down = fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def flat_params(layers):
    return [a for l in layers for a in (l.weight, l.bias)]


def flat_grads(grads):
    return [a for pair in grads for a in pair]


def max_rel_err(analytic, numeric, floor=1e-9):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        big = scale > floor
        if np.any(big):
            worst = max(worst, float(np.max(diff[big] / scale[big])))
        assert np.all(diff[~big] < floor)
    return worst


class TestForward:
    def test_zero_model_gives_zero_stack(self):
        model = init_model(3, 2, hidden=(4,), bottleneck=2, rng=np.random.default_rng(0))
        for layer in model.layers:
            layer.weight[:] = 0
            layer.bias[:] = 0
        stack = forward_features(model, np.array([1.0, -2.0, 3.0]))
        assert stack.layer_ids == (1, 2)
        assert all(np.all(a == 0) for a in stack.acts)

    def test_identity_layer(self):
        x = np.array([0.3, 1.5, 2.0])
        ident = Dense(np.eye(3), np.zeros(3), "linear")
        model = AdaptationModel([ident], Dense(np.ones((3, 2)), np.zeros(2), "linear"), (1, 1))
        np.testing.assert_array_equal(forward_features(model, x).acts[0][0], x)

    def test_matches_independent_loop(self):
        rng = np.random.default_rng(11)
        model = init_model(5, 3, hidden=(7, 6), bottleneck=4, rng=rng)
        for layer in model.layers:
            layer.bias[:] = rng.normal(size=layer.bias.shape)
        x = rng.normal(size=5)
        h = list(x)
        expected = []
        for layer in model.extractor:
            nxt = []
            for j in range(layer.fan_out):
                s = layer.bias[j] + sum(h[i] * layer.weight[i, j] for i in range(layer.fan_in))
                nxt.append(max(s, 0.0))
            expected.append(nxt)
            h = nxt
        stack = forward_features(model, x)
        assert stack.layer_ids == (1, 2, 3)
        for got, exp in zip(stack.acts, expected):
            np.testing.assert_allclose(got[0], exp, atol=1e-12, rtol=0)

    def test_width_mismatch(self):
        model = init_model(3, 2, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="width"):
            forward_features(model, np.zeros(4))

    def test_feature_range_includes_input(self):
        model = init_model(3, 2, rng=np.random.default_rng(0), feature_range=(0, 3))
        stack = forward_features(model, np.ones(3))
        assert stack.layer_ids == (0, 1, 2, 3)
        assert stack.widths == (3, 64, 64, 16)


class TestSoftmax:
    def test_zero_logits_uniform(self):
        np.testing.assert_array_equal(softmax(np.zeros(4)), np.full(4, 0.25))

    def test_large_logits_stable(self):
        p = softmax(np.array([1000.0, 0.0]))
        np.testing.assert_array_equal(p, [1.0, 0.0])

    @given(st.integers(0, 10**6))
    @settings(max_examples=50, deadline=None)
    def test_classify_is_distribution(self, seed):
        rng = np.random.default_rng(seed)
        model = init_model(3, 5, hidden=(8,), bottleneck=4, rng=rng)
        p = classify(model, rng.normal(scale=20, size=(7, 3)))
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestOuterProduct:
    def test_example(self):
        np.testing.assert_allclose(outer_product([1, 2], [0.3, 0.7]), [0.3, 0.7, 0.6, 1.4])

    def test_one_hot_block(self):
        f = np.array([1.0, -2.0, 3.0])
        out = outer_product(f, [0.0, 1.0])
        np.testing.assert_array_equal(out.reshape(3, 2)[:, 1], f)
        np.testing.assert_array_equal(out.reshape(3, 2)[:, 0], 0.0)

    def test_norm_and_bilinearity(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            f, g = rng.normal(size=(2, 6))
            p, q = rng.normal(size=(2, 4))
            a = rng.normal()
            np.testing.assert_allclose(np.linalg.norm(outer_product(f, p)),
                                       np.linalg.norm(f) * np.linalg.norm(p), rtol=1e-12)
            np.testing.assert_allclose(outer_product(a * f, p), a * outer_product(f, p),
                                       atol=1e-12)
            np.testing.assert_allclose(outer_product(f, p + q),
                                       outer_product(f, p) + outer_product(f, q), atol=1e-12)

    def test_batched_layout(self):
        f = np.arange(6.0).reshape(2, 3)
        p = np.array([[0.5, 0.5], [1.0, 0.0]])
        out = outer_product(f, p)
        assert out.shape == (2, 6)
        np.testing.assert_array_equal(out[1], outer_product(f[1], p[1]))


class TestDiscriminator:
    def test_zero_weights_half(self):
        disc = init_discriminator(2, 2, hidden=3, rng=np.random.default_rng(0))
        for layer in disc.layers:
            layer.weight[:] = 0
            layer.bias[:] = 0
        assert discriminate(disc, np.ones(4)) == 0.5

    def test_eval_mode_deterministic(self):
        disc = init_discriminator(2, 2, rng=np.random.default_rng(0))
        v = np.random.default_rng(1).normal(size=(5, 4))
        np.testing.assert_array_equal(discriminate(disc, v), discriminate(disc, v))

    def test_dropout_reproducible(self):
        disc = init_discriminator(2, 2, rng=np.random.default_rng(0))
        v = np.random.default_rng(1).normal(size=(5, 4))
        r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
        a = [discriminate(disc, v, True, r1) for _ in range(3)]
        b = [discriminate(disc, v, True, r2) for _ in range(3)]
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a[0], discriminate(disc, v))

    def test_output_strictly_inside(self):
        disc = init_discriminator(2, 2, hidden=3, rng=np.random.default_rng(0))
        disc.layers[-1].bias[:] = 1e4
        d = discriminate(disc, np.zeros(4))
        assert 0 < d < 1

    def test_width_mismatch(self):
        disc = init_discriminator(2, 2, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            discriminate(disc, np.zeros(3))


class TestGRL:
    def test_examples(self):
        np.testing.assert_array_equal(grl_backward([1.0, -2.0], 0.5), [-0.5, 1.0])
        np.testing.assert_array_equal(grl_backward([1.0, -2.0], 0.0), [0.0, 0.0])
        np.testing.assert_array_equal(grl_backward([1.0, -2.0], 1.0), [-1.0, 2.0])


class TestBackprop:
    @pytest.mark.parametrize("condition", ["product", "features_only"])
    @pytest.mark.parametrize("lam", [0.0, 0.7, 1.0])
    def test_matches_finite_differences(self, condition, lam):
        model, disc, batch = small_setup(condition=condition)
        g = backprop(model, disc, batch, LossSpec(1.0, 1.0, lam))
        mp, dp = flat_params(model.layers), flat_params(disc.layers)
        num_cls = central_diff(lambda: cls_loss(model, batch), mp)
        num_dom_g = central_diff(lambda: dom_loss(model, disc, batch), mp)
        num_dom_d = central_diff(lambda: dom_loss(model, disc, batch), dp)
        expected_g = [c - lam * d for c, d in zip(num_cls, num_dom_g)]
        assert max_rel_err(flat_grads(g.model), expected_g) < 1e-4
        assert max_rel_err(flat_grads(g.disc), num_dom_d) < 1e-4

    def test_with_fixed_dropout_masks(self):
        model, disc, batch = small_setup(dropout=0.5)
        g = backprop(model, disc, batch, LossSpec(0.0, 1.0, 1.0, train_mode=True),
                     rng=np.random.default_rng(3))
        num = central_diff(lambda: dom_loss(model, disc, batch, mask_seed=3), flat_params(disc.layers))
        assert max_rel_err(flat_grads(g.disc), num) < 1e-4

    def test_loss_values(self):
        model, disc, batch = small_setup()
        g = backprop(model, disc, batch, LossSpec())
        assert g.cls_loss == pytest.approx(cls_loss(model, batch), rel=1e-12)
        assert g.dom_loss == pytest.approx(dom_loss(model, disc, batch), rel=1e-12)

    def test_zero_weights_zero_grads(self):
        model, disc, batch = small_setup()
        g = backprop(model, disc, batch, LossSpec(0.0, 0.0, 1.0))
        assert all(np.all(a == 0) for a in flat_grads(g.model) + flat_grads(g.disc))

    def test_domain_path_is_reversed_and_scaled(self):
        model, disc, batch = small_setup()
        lam = 0.37
        rev = backprop(model, disc, batch, LossSpec(0.0, 1.0, lam))
        plain = backprop(model, disc, batch, LossSpec(0.0, 1.0, lam, reverse_gradient=False))
        for a, b in zip(flat_grads(rev.model), flat_grads(plain.model)):
            np.testing.assert_allclose(a, -lam * b, rtol=1e-13, atol=1e-16)
        for a, b in zip(flat_grads(rev.disc), flat_grads(plain.disc)):
            np.testing.assert_array_equal(a, b)

    def test_untrained_loss_near_log_c(self):
        model = init_model(2, 5, rng=np.random.default_rng(0))
        for layer in model.layers:
            layer.weight *= 1e-3
        x = np.random.default_rng(1).normal(size=(50, 2))
        g = backprop(model, None, Batch(x, np.arange(50) % 5, -np.ones(50)), LossSpec())
        assert g.cls_loss == pytest.approx(np.log(5), abs=1e-3)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_term(self):
        model, disc, batch = small_setup()
        model.classifier.weight[:] = np.inf
        with pytest.raises(NonFiniteLossError, match="classification"):
            backprop(model, disc, batch, LossSpec())
        model, disc, batch = small_setup()
        disc.layers[-1].weight[:] = np.nan
        with pytest.raises(NonFiniteLossError, match="domain"):
            backprop(model, disc, batch, LossSpec())


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        model, disc, _ = small_setup()
        model.seed = 42
        save_checkpoint(tmp_path / "m.ckpt", model, disc)
        m2, d2 = load_checkpoint(tmp_path / "m.ckpt")
        assert m2.seed == 42 and m2.feature_range == model.feature_range
        for a, b in zip(flat_params(model.layers) + flat_params(disc.layers),
                        flat_params(m2.layers) + flat_params(d2.layers)):
            assert a.tobytes() == b.tobytes()
        assert [l.head for l in m2.layers] == [l.head for l in model.layers]
        assert d2.condition == disc.condition and d2.dropout == disc.dropout

    def test_model_only(self, tmp_path):
        model, _, _ = small_setup()
        save_checkpoint(tmp_path / "m.ckpt", model)
        _, d = load_checkpoint(tmp_path / "m.ckpt")
        assert d is None

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ckpt")
