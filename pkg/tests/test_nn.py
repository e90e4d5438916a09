import math

import numpy as np
import pytest

from vfedmh import nn
from oracles import forward_scalar, gradcheck_full, safe_instance, softmax_ce_scalar


def dense_spec(in_f, d_emb, m):
    return nn.NetworkSpec(
        "custom", (nn.Dense(in_f, d_emb), nn.Dense(d_emb, m)), split_index=1, embedding_dim=d_emb
    )


def test_identity_embedding():
    spec = dense_spec(2, 2, 2)
    state = nn.init_state(spec, 0)
    state.params[0][0][:] = np.eye(2)
    state.params[0][1][:] = 0.0
    emb, _ = nn.forward_embedding(state, spec, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(emb, [[1.0, 2.0]])


def test_zero_weights_zero_embedding():
    spec = dense_spec(3, 4, 2)
    state = nn.init_state(spec, 0)
    state.params[0][0][:] = 0.0
    state.params[0][1][:] = 0.0
    emb, _ = nn.forward_embedding(state, spec, np.random.default_rng(1).normal(size=(5, 3)))
    np.testing.assert_array_equal(emb, np.zeros((5, 4)))


def test_embedding_width_mismatch_names_widths():
    spec = dense_spec(3, 4, 2)
    state = nn.init_state(spec, 0)
    with pytest.raises(nn.ShapeError, match="width 3"):
        nn.forward_embedding(state, spec, np.zeros((2, 7)))


def test_random_mlp_matches_scalar_oracle():
    spec = nn.mlp3(8, 6, 3, hidden=5)
    state = nn.init_state(spec, 42)
    batch = np.random.default_rng(7).normal(size=(4, 8))
    emb, _ = nn.forward_embedding(state, spec, batch)
    logits, _ = nn.forward_decision(state, spec, emb)
    full, _ = nn.forward_full(state, spec, batch)
    oracle_rows, _, _ = forward_scalar(spec, state, batch)
    np.testing.assert_allclose(full, np.array(oracle_rows), rtol=0, atol=1e-12)
    np.testing.assert_allclose(logits, full, rtol=0, atol=0)


def test_conv_net_matches_scalar_oracle():
    spec = nn.cnn2(16, 5, 3, channels=(2, 3))
    state = nn.init_state(spec, 3)
    batch = np.random.default_rng(5).normal(size=(3, 16))
    out, _ = nn.forward_full(state, spec, batch)
    oracle_rows, _, _ = forward_scalar(spec, state, batch)
    np.testing.assert_allclose(out, np.array(oracle_rows), atol=1e-12)


def test_lenet_matches_scalar_oracle():
    spec = nn.lenet(196, 6, 4, channels=(2, 3, 4), fc1=10)
    state = nn.init_state(spec, 9)
    batch = np.random.default_rng(11).normal(size=(2, 196))
    out, _ = nn.forward_full(state, spec, batch)
    oracle_rows, _, _ = forward_scalar(spec, state, batch)
    np.testing.assert_allclose(out, np.array(oracle_rows), atol=1e-11)


def test_decision_bias_only():
    spec = dense_spec(2, 2, 2)
    state = nn.init_state(spec, 0)
    state.params[1][0][:] = 0.0
    state.params[1][1][:] = np.array([0.5, -0.5])
    logits, _ = nn.forward_decision(state, spec, np.random.default_rng(0).normal(size=(6, 2)))
    np.testing.assert_array_equal(logits, np.tile([0.5, -0.5], (6, 1)))


def test_identity_decision_layer():
    spec = dense_spec(2, 3, 3)
    state = nn.init_state(spec, 0)
    state.params[1][0][:] = np.eye(3)
    state.params[1][1][:] = 0.0
    emb = np.random.default_rng(2).normal(size=(4, 3))
    logits, _ = nn.forward_decision(state, spec, emb)
    np.testing.assert_array_equal(logits, emb)


def test_forward_deterministic():
    spec = nn.mlp3(10, 8, 4)
    state = nn.init_state(spec, 1)
    batch = np.random.default_rng(3).normal(size=(7, 10))
    a, _ = nn.forward_full(state, spec, batch)
    b, _ = nn.forward_full(state, spec, batch)
    assert (a == b).all()


@pytest.mark.parametrize("builder,seed", [(nn.mlp3, 0), (nn.cnn2, 1), (nn.lenet, 2)])
def test_split_compose_equals_unsplit(builder, seed):
    spec = builder(16, 6, 3)
    state = nn.init_state(spec, seed)
    batch = np.random.default_rng(seed).normal(size=(5, 16))
    emb, _ = nn.forward_embedding(state, spec, batch)
    via_split, _ = nn.forward_decision(state, spec, emb)
    direct, _ = nn.forward_full(state, spec, batch)
    np.testing.assert_array_equal(via_split, direct)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_softmax_ce_uniform():
    loss, grad = nn.softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(grad, [[-0.5, 0.5]], atol=1e-12)


def test_softmax_ce_saturated_no_overflow():
    loss, grad = nn.softmax_cross_entropy(np.array([[1000.0, -1000.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(grad).all()


def test_softmax_ce_matches_scalar_oracle():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(3, 5)) * 3
    labels = rng.integers(0, 5, size=3)
    loss, _ = nn.softmax_cross_entropy(logits, labels)
    oracle = sum(softmax_ce_scalar(list(map(float, row)), int(lab)) for row, lab in zip(logits, labels)) / 3
    assert abs(loss - oracle) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_softmax_grad_rows_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 4)) * 5
    labels = rng.integers(0, 4, size=6)
    _, grad = nn.softmax_cross_entropy(logits, labels)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_softmax_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        nn.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# ---------------------------------------------------------------------------
# backward passes
# ---------------------------------------------------------------------------


def test_backward_decision_zero_grad():
    spec = dense_spec(3, 4, 2)
    state = nn.init_state(spec, 5)
    emb, _ = nn.forward_embedding(state, spec, np.random.default_rng(0).normal(size=(2, 3)))
    _, trace = nn.forward_decision(state, spec, emb)
    grads, grad_emb = nn.backward_decision(state, spec, trace, np.zeros((2, 2)))
    assert all((g == 0).all() for g in grads)
    assert (grad_emb == 0).all()


def test_backward_decision_outer_product_identity():
    spec = dense_spec(3, 4, 2)
    state = nn.init_state(spec, 6)
    emb = np.random.default_rng(1).normal(size=(1, 4))
    _, trace = nn.forward_decision(state, spec, emb)
    g = np.random.default_rng(2).normal(size=(1, 2))
    grads, _ = nn.backward_decision(state, spec, trace, g)
    np.testing.assert_allclose(grads[0], np.outer(emb[0], g[0]), atol=1e-12)
    np.testing.assert_allclose(grads[1], g[0], atol=1e-12)


def test_backward_embedding_zero_grad():
    spec = dense_spec(3, 4, 2)
    state = nn.init_state(spec, 7)
    _, trace = nn.forward_embedding(state, spec, np.random.default_rng(0).normal(size=(2, 3)))
    grads = nn.backward_embedding(state, spec, trace, np.zeros((2, 4)))
    assert all((g == 0).all() for g in grads)


def test_backward_embedding_outer_product_identity():
    spec = dense_spec(3, 3, 2)
    state = nn.init_state(spec, 8)
    x = np.random.default_rng(3).normal(size=(1, 3))
    _, trace = nn.forward_embedding(state, spec, x)
    g = np.random.default_rng(4).normal(size=(1, 3))
    grads = nn.backward_embedding(state, spec, trace, g)
    np.testing.assert_allclose(grads[0], np.outer(x[0], g[0]), atol=1e-12)


def test_stale_trace_rejected():
    spec = dense_spec(3, 4, 2)
    state = nn.init_state(spec, 9)
    _, trace_emb = nn.forward_embedding(state, spec, np.zeros((2, 3)))
    with pytest.raises(nn.TraceError):
        nn.backward_decision(state, spec, trace_emb, np.zeros((2, 2)))


def _make_mlp(seed):
    rng = np.random.default_rng(seed)
    spec = nn.mlp3(6, 5, 3, hidden=4)
    state = nn.init_state(spec, seed)
    batch = rng.normal(size=(4, 6))
    labels = rng.integers(0, 3, size=4)
    return spec, state, batch, labels


def _make_convnet(seed):
    rng = np.random.default_rng(seed)
    spec = nn.cnn2(16, 4, 3, channels=(2, 3))
    state = nn.init_state(spec, seed)
    batch = rng.normal(size=(3, 16))
    labels = rng.integers(0, 3, size=3)
    return spec, state, batch, labels


def _make_lenet(seed):
    rng = np.random.default_rng(seed)
    spec = nn.lenet(16, 4, 3, channels=(1, 2, 2), fc1=6)
    state = nn.init_state(spec, seed)
    batch = rng.normal(size=(2, 16))
    labels = rng.integers(0, 3, size=2)
    return spec, state, batch, labels


@pytest.mark.parametrize("maker", [_make_mlp, _make_convnet, _make_lenet])
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(maker, seed):
    spec, state, batch, labels = safe_instance(maker, seed)
    gradcheck_full(spec, state, batch, labels)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def test_finite_diff_quadratic_exact():
    spec = dense_spec(1, 1, 1)
    state = nn.init_state(spec, 0)
    state.params[0][0][:] = 3.0

    def loss_fn(st):
        return float(st.params[0][0][0, 0] ** 2)

    grads = nn.finite_diff_gradient(state, spec, loss_fn, 1e-3)
    assert grads[0][0, 0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant_zero():
    spec = dense_spec(2, 2, 2)
    state = nn.init_state(spec, 0)
    grads = nn.finite_diff_gradient(state, spec, lambda st: 1.25, 1e-3)
    assert all((g == 0).all() for g in grads)


def test_finite_diff_rejects_bad_step():
    spec = dense_spec(2, 2, 2)
    with pytest.raises(ValueError):
        nn.finite_diff_gradient(nn.init_state(spec, 0), spec, lambda st: 0.0, 0.0)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _count(spec, cls):
    return sum(isinstance(l, cls) for l in spec.layers)


def test_mlp3_is_three_dense_layers():
    spec = nn.mlp3(16, 64, 10)
    assert _count(spec, nn.Dense) == 3 and _count(spec, nn.Conv2D) == 0


@pytest.mark.parametrize("in_features", [16, 196, 784])
def test_cnn2_is_two_conv_two_dense(in_features):
    spec = nn.cnn2(in_features, 64, 10)
    assert _count(spec, nn.Dense) == 2 and _count(spec, nn.Conv2D) == 2


@pytest.mark.parametrize("in_features", [16, 196, 784])
def test_lenet_counts(in_features):
    spec = nn.lenet(in_features, 64, 10)
    assert _count(spec, nn.Dense) == 3
    assert _count(spec, nn.Conv2D) == 3
    assert _count(spec, nn.MaxPool2) == 1


def test_spec_rejects_wrong_embedding_width():
    with pytest.raises(ValueError, match="embedding"):
        nn.NetworkSpec("bad", (nn.Dense(4, 5), nn.Dense(6, 2)), split_index=1, embedding_dim=6)


def test_unknown_architecture():
    with pytest.raises(ValueError, match="unknown architecture"):
        nn.spec_from_name("resnet", 16, 8, 4)
