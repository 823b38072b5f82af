import numpy as np
import pytest

from fecembed import nn
from gradcheck import TOL, head_errors, numeric_grad, rel_error


def test_default_spec_shapes():
    spec = nn.HeadSpec(in_dim=64)
    assert spec.dense_out_dim == 512 + 5 * 64
    params = nn.init_params(spec, 0)
    assert params["proj.w"].shape == (64, 512)
    assert params["dense5.w"].shape == (512 + 4 * 64, 64)
    assert params["fc.w"].shape == (832, 512)
    assert params["emb.w"].shape == (512, 16)
    # biases feeding batchnorm are redundant and omitted
    assert "proj.b" not in params.weights and "fc.b" not in params.weights


def test_xavier_bounds():
    w = nn.xavier_init(300, 100, np.random.default_rng(0))
    bound = np.sqrt(6 / 400)
    assert np.abs(w).max() <= bound
    assert abs(w.std() - bound / np.sqrt(3)) < 0.01 * bound


def test_init_is_seed_deterministic():
    spec = nn.HeadSpec(in_dim=8, emb_dim=4)
    assert nn.init_params(spec, 3).digest() == nn.init_params(spec, 3).digest()
    assert nn.init_params(spec, 3).digest() != nn.init_params(spec, 4).digest()


def test_output_is_unit_norm():
    spec = nn.HeadSpec(in_dim=10, emb_dim=4)
    params = nn.init_params(spec, 1)
    out = nn.embed(spec, params, np.random.default_rng(0).standard_normal((20, 10)))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_degenerate_embedding_raises():
    with pytest.raises(nn.DegenerateEmbedding):
        nn.l2_normalize(np.zeros((2, 3)))


def test_relu6_clips():
    np.testing.assert_array_equal(nn.relu6(np.array([-1.0, 0.5, 7.0])), [0.0, 0.5, 6.0])


def test_batchnorm_train_statistics():
    x = np.random.default_rng(0).standard_normal((50, 4)) * 3 + 2
    out, cache = nn.batchnorm_forward(x, np.ones(4), np.zeros(4), None, None, nn.TRAIN)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), x.var(axis=0) / (x.var(axis=0) + nn.BN_EPS), rtol=1e-12)
    with pytest.raises(ValueError):
        nn.batchnorm_forward(x[:1], np.ones(4), np.zeros(4), None, None, nn.TRAIN)


def test_batchnorm_backward_matches_fd():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((7, 3))
    gamma, beta, w = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal((7, 3))
    _, cache = nn.batchnorm_forward(x, gamma, beta, None, None, nn.TRAIN)
    dx, dg, db = nn.batchnorm_backward(cache, w)
    f = lambda v: float(np.sum(w * nn.batchnorm_forward(v, gamma, beta, None, None)[0]))
    assert rel_error(dx, numeric_grad(f, x)) < TOL
    f = lambda v: float(np.sum(w * nn.batchnorm_forward(x, v, beta, None, None)[0]))
    assert rel_error(dg, numeric_grad(f, gamma)) < TOL


def test_l2_normalize_backward_matches_fd():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    g = nn.l2_normalize_backward(x, w)
    assert rel_error(g, numeric_grad(lambda v: float(np.sum(w * nn.l2_normalize(v))), x)) < TOL


@pytest.mark.parametrize("bn, norm, drop", [(True, True, 0.5), (False, True, 0.0),
                                            (True, False, 0.0), (False, False, 0.3)])
def test_head_gradients(bn, norm, drop):
    errs = head_errors(5, use_batchnorm=bn, normalize=norm, dropout_rate=drop)
    assert max(errs.values()) < TOL, errs


def test_infer_mode_uses_running_stats_and_is_deterministic():
    spec = nn.HeadSpec(in_dim=6, bottleneck_width=16, dense_layers=2, growth=4, fc_width=32, emb_dim=3)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(0).standard_normal((9, 6))
    a = nn.embed(spec, params, x)
    # single rows embed identically to the batch (no batch statistics at inference)
    np.testing.assert_allclose(nn.embed(spec, params, x[:1]), a[:1], atol=1e-12)
    _, trace = nn.head_forward(spec, params, x, nn.INFER)
    with pytest.raises(ValueError):
        nn.head_backward(spec, params, trace, np.ones_like(a))


def test_running_stats_update():
    spec = nn.HeadSpec(in_dim=6, bottleneck_width=16, dense_layers=1, growth=4, fc_width=32, emb_dim=3)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(0).standard_normal((9, 6))
    _, trace = nn.head_forward(spec, params, x, nn.TRAIN, np.random.default_rng(0))
    mean, var = trace.batch_stats()["fc"]
    nn.update_running_stats(params, trace)
    np.testing.assert_allclose(params.buffers["fc.mean"], 0.01 * mean)
    np.testing.assert_allclose(params.buffers["fc.var"], 0.99 + 0.01 * var)


def test_dropout_requires_rng():
    spec = nn.HeadSpec(in_dim=6, bottleneck_width=16, dense_layers=1, growth=4, fc_width=32, emb_dim=3)
    with pytest.raises(ValueError):
        nn.head_forward(spec, nn.init_params(spec, 0), np.ones((4, 6)), nn.TRAIN)


def test_model_roundtrip(tmp_path):
    spec = nn.HeadSpec(in_dim=6, bottleneck_width=16, dense_layers=2, growth=4, fc_width=32, emb_dim=3)
    params = nn.init_params(spec, 0)
    path = tmp_path / "m.fech"
    nn.save_model(path, spec, params, seed=0, config_digest="abc")
    spec2, params2, meta = nn.load_model(path)
    assert spec2 == spec and meta["config_digest"] == "abc"
    for k, v in params.weights.items():
        np.testing.assert_array_equal(params2[k], v.astype(np.float32))
    x = np.random.default_rng(0).standard_normal((5, 6))
    np.testing.assert_allclose(nn.embed(spec2, params2, x), nn.embed(spec, params, x), atol=1e-5)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="not a FECH"):
        nn.load_model(path)


def test_relu6_examples():
    assert nn.relu6(np.array([7.0]))[0] == 6.0
    assert nn.relu6(np.array([-1.0]))[0] == 0.0 and nn.relu6_backward(np.array([-1.0]), np.ones(1))[0] == 0
    assert nn.relu6(np.array([3.0]))[0] == 3.0 and nn.relu6_backward(np.array([3.0]), np.ones(1))[0] == 1
    assert nn.relu6_backward(np.array([0.0, 6.0]), np.ones(2)).tolist() == [0.0, 0.0]


def test_constant_batch_normalizes_to_zero():
    out, _ = nn.batchnorm_forward(np.full((5, 3), 2.5), np.ones(3), np.zeros(3), None, None, nn.TRAIN)
    np.testing.assert_array_equal(out, 0.0)


def test_l2_normalize_example():
    np.testing.assert_allclose(nn.l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])


def test_xavier_mean_is_centred():
    w = nn.xavier_init(1000, 1000, np.random.default_rng(1))
    bound = np.sqrt(6 / 2000)
    se = bound / np.sqrt(3) / np.sqrt(w.size)
    assert abs(w.mean()) < 3 * se


def test_dense_block_without_layers_is_the_bottleneck():
    spec = nn.HeadSpec(in_dim=5, bottleneck_width=7, dense_layers=0, fc_width=16, emb_dim=3)
    params = nn.init_params(spec, 0)
    concat, caches = nn.dense_block_forward(spec, params, np.ones((2, 5)))
    assert concat.shape == (2, 7) and caches == []


def test_zero_dropout_train_matches_infer_with_batch_stats():
    spec = nn.HeadSpec(in_dim=6, bottleneck_width=16, dense_layers=2, growth=4, fc_width=32, emb_dim=3,
                       dropout_rate=0.0)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(0).standard_normal((12, 6))
    out_train, trace = nn.head_forward(spec, params, x, nn.TRAIN)
    for name, (mean, var) in trace.batch_stats().items():
        params.buffers[f"{name}.mean"], params.buffers[f"{name}.var"] = mean, var
    np.testing.assert_allclose(nn.head_forward(spec, params, x, nn.INFER)[0], out_train, atol=1e-12)


def test_backward_is_linear_in_upstream():
    spec = nn.HeadSpec(in_dim=6, bottleneck_width=16, dense_layers=2, growth=4, fc_width=32, emb_dim=3)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(0).standard_normal((8, 6))
    _, trace = nn.head_forward(spec, params, x, nn.TRAIN, np.random.default_rng(1))
    u = np.random.default_rng(2).standard_normal((8, 3))
    g1 = nn.head_backward(spec, params, trace, u)
    g3 = nn.head_backward(spec, params, trace, 3.0 * u)
    g0 = nn.head_backward(spec, params, trace, np.zeros_like(u))
    for k in g1:
        np.testing.assert_allclose(g3[k], 3.0 * g1[k], rtol=1e-10, atol=1e-14)
        assert not np.any(g0[k])


@pytest.mark.parametrize("in_dim", [8, 32])
@pytest.mark.parametrize("layers", [0, 2, 5])
def test_gradient_check_across_specs(in_dim, layers):
    spec = nn.HeadSpec(in_dim=in_dim, bottleneck_width=8, dense_layers=layers, growth=3, fc_width=16,
                       emb_dim=3, dropout_rate=0.25)
    params = nn.init_params(spec, layers)
    rng = np.random.default_rng(in_dim + layers)
    for k in params.weights:
        params.weights[k] = params.weights[k] + 0.2 * rng.standard_normal(params.weights[k].shape)
    x = rng.standard_normal((3, in_dim))
    w = rng.standard_normal((3, 3))

    def loss(p):
        return float(np.sum(w * nn.head_forward(spec, p, x, nn.TRAIN, np.random.default_rng(0))[0]))

    _, trace = nn.head_forward(spec, params, x, nn.TRAIN, np.random.default_rng(0))
    grads = nn.head_backward(spec, params, trace, w)
    for name in params.weights:
        def f(v, name=name):
            p = params.copy()
            p.weights[name] = v
            return loss(p)
        assert rel_error(grads[name], numeric_grad(f, params[name])) < TOL, name


def test_train_forward_is_deterministic():
    spec = nn.HeadSpec(in_dim=6, bottleneck_width=16, dense_layers=2, growth=4, fc_width=32, emb_dim=3)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(0).standard_normal((8, 6))
    a = nn.head_forward(spec, params, x, nn.TRAIN, np.random.default_rng(5))[0]
    b = nn.head_forward(spec, params, x, nn.TRAIN, np.random.default_rng(5))[0]
    np.testing.assert_array_equal(a, b)
