import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from fedunlearn.data import Dataset
from fedunlearn.errors import NumericError, ShapeError, SpecError
from fedunlearn.nn import (
    FD_EXACT,
    GGN,
    SGD,
    Dense,
    Flatten,
    NetworkSpec,
    ParamSet,
    ReLU,
    forward,
    hessian_diag,
    init_params,
    iter_batches,
    loss_and_grad,
    per_sample_loss,
    predict,
    sgd_train,
    softmax,
)


def fd_grad(spec, params, x, y, step=1e-5):
    work = params.copy()
    out = {}
    for name, block in params.blocks.items():
        g = np.empty(block.size)
        flat = work.blocks[name].reshape(-1)
        for j in range(block.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = loss_and_grad(spec, work, x, y)[0].mean_loss
            flat[j] = orig - step
            lm = loss_and_grad(spec, work, x, y)[0].mean_loss
            flat[j] = orig
            g[j] = (lp - lm) / (2 * step)
        out[name] = g.reshape(block.shape)
    return out


def explicit_logit_jacobian(w1, b1, w2, x):
    """d logits / d (w1, b1, w2, b2) for a Dense-ReLU-Dense net, written out by the chain rule."""
    z1 = w1 @ x + b1
    active = (z1 > 0).astype(float)
    a1 = z1 * active
    c, h = w2.shape
    d = x.size
    cols = []
    for j in range(h):  # w1 row-major
        for i in range(d):
            cols.append(w2[:, j] * active[j] * x[i])
    for j in range(h):
        cols.append(w2[:, j] * active[j])
    for o in range(c):
        for j in range(h):
            e = np.zeros(c)
            e[o] = a1[j]
            cols.append(e)
    for o in range(c):
        e = np.zeros(c)
        e[o] = 1.0
        cols.append(e)
    return np.array(cols).T  # [C, P]


# ---- spec and init


def test_spec_rejects_incompatible_layers():
    with pytest.raises(SpecError):
        NetworkSpec((Dense(3, 4), ReLU(), Dense(5, 2)), 2)
    with pytest.raises(SpecError):
        NetworkSpec((Dense(3, 4),), 2)


def test_mlp_shapes():
    spec = NetworkSpec.mlp([784, 64, 32, 10])
    assert isinstance(spec.layers[0], Flatten)
    assert spec.param_shapes() == {
        "1.weight": (64, 784), "1.bias": (64,), "3.weight": (32, 64), "3.bias": (32,),
        "5.weight": (10, 32), "5.bias": (10,),
    }


def test_init_is_deterministic():
    spec = NetworkSpec((Dense(2, 2),), 2)
    assert init_params(spec, 7).bit_equal(init_params(spec, 7))
    assert not init_params(spec, 7).bit_equal(init_params(spec, 8))


def test_init_biases_zero_and_fan_in_bound():
    spec = NetworkSpec((Dense(3, 5),), 5)
    p = init_params(spec, 1)
    w = p.blocks["0.weight"]
    assert w.shape == (5, 3) and w.size == 15
    assert np.all(np.abs(w) <= 1 / math.sqrt(3))
    assert np.all(p.blocks["0.bias"] == 0)
    assert p.rng_seed == 1


# ---- forward and loss


def test_zero_params_give_zero_logits():
    spec = NetworkSpec.mlp([3, 4, 2])
    p = init_params(spec, 0).zeros_like()
    assert np.all(forward(spec, p, np.ones((2, 3))) == 0)


def test_identity_dense_passes_input():
    spec = NetworkSpec((Dense(3, 3, bias=False),), 3)
    p = ParamSet({"0.weight": np.eye(3)})
    x = np.array([0.1, 0.7, 0.3])
    np.testing.assert_array_equal(forward(spec, p, x)[0], x)


def test_forward_matches_hand_arithmetic():
    spec = NetworkSpec.mlp([2, 2, 2])
    p = ParamSet({
        "1.weight": np.array([[1.0, -2.0], [0.5, 0.25]]), "1.bias": np.array([0.1, -0.2]),
        "3.weight": np.array([[2.0, 1.0], [-1.0, 3.0]]), "3.bias": np.array([0.0, 0.5]),
    })
    x = np.array([[0.4, 0.1]])
    # hidden: relu(0.4-0.2+0.1, 0.2+0.025-0.2) = (0.3, 0.025)
    expected = np.array([[2 * 0.3 + 0.025, -0.3 + 3 * 0.025 + 0.5]])
    np.testing.assert_allclose(forward(spec, p, x), expected, rtol=0, atol=1e-15)


def test_forward_rejects_wrong_width(net242):
    spec, p = net242
    with pytest.raises(ShapeError):
        forward(spec, p, np.ones((1, 3)))


def test_uniform_logits_loss_is_log_classes():
    spec = NetworkSpec((Dense(4, 5),), 5)
    p = init_params(spec, 0).zeros_like()
    loss, _ = loss_and_grad(spec, p, np.ones((3, 4)) * 0.5, [0, 3, 4])
    assert loss.mean_loss == pytest.approx(math.log(5), abs=1e-15)


def test_mean_loss_is_mean_of_per_sample(net242, data8):
    spec, p = net242
    loss, _ = loss_and_grad(spec, p, data8.features, data8.labels)
    np.testing.assert_allclose(loss.mean_loss, loss.per_sample_losses.mean(), rtol=1e-15)
    np.testing.assert_allclose(loss.per_sample_losses, per_sample_loss(spec, p, data8.features, data8.labels))


def test_label_out_of_range_and_empty_batch(net242):
    spec, p = net242
    with pytest.raises(ValueError):
        loss_and_grad(spec, p, np.ones((1, 2)), [2])
    with pytest.raises(ValueError):
        loss_and_grad(spec, p, np.ones((0, 2)), [])


def test_gradient_matches_central_differences(net242, data8):
    spec, p = net242
    _, grad = loss_and_grad(spec, p, data8.features, data8.labels)
    ref = fd_grad(spec, p, data8.features, data8.labels)
    err = max(np.max(np.abs(grad.blocks[k] - ref[k])) for k in ref)
    assert err < 1e-6


def test_duplicating_batch_leaves_loss_and_grad(net242, data8):
    spec, p = net242
    l1, g1 = loss_and_grad(spec, p, data8.features, data8.labels)
    x2 = np.vstack([data8.features, data8.features])
    l2, g2 = loss_and_grad(spec, p, x2, np.concatenate([data8.labels, data8.labels]))
    assert l1.mean_loss == pytest.approx(l2.mean_loss, rel=1e-14)
    for k in g1.blocks:
        np.testing.assert_allclose(g1.blocks[k], g2.blocks[k], rtol=1e-12, atol=1e-16)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_loss_average_decomposes_over_partitions(seed, cuts):
    spec = NetworkSpec.mlp([3, 5, 3])
    p = init_params(spec, seed)
    data = random_dataset(12, 3, 3, seed)
    rng = np.random.default_rng(seed)
    bounds = np.sort(rng.choice(np.arange(1, 12), size=cuts, replace=False))
    whole = loss_and_grad(spec, p, data.features, data.labels)[0].mean_loss
    parts = np.split(np.arange(12), bounds)
    combined = sum(
        len(ix) / 12 * loss_and_grad(spec, p, data.features[ix], data.labels[ix])[0].mean_loss for ix in parts
    )
    assert combined == pytest.approx(whole, rel=1e-12)


def test_predict_breaks_ties_by_lowest_index():
    spec = NetworkSpec((Dense(2, 3, bias=False),), 3)
    p = ParamSet({"0.weight": np.zeros((3, 2))})
    assert predict(spec, p, np.ones((4, 2))).tolist() == [0, 0, 0, 0]


# ---- training


def test_sgd_quadratic_step():
    theta = {"w": np.array([0.0])}
    SGD(lr=0.1, momentum=0.0).step(theta, {"w": theta["w"] - 3.0})  # dL/dθ of ½(θ-3)²
    assert theta["w"][0] == pytest.approx(0.3, abs=1e-15)


def test_sgd_momentum_buffer():
    theta = {"w": np.array([1.0])}
    opt = SGD(lr=0.5, momentum=0.9)
    opt.step(theta, {"w": np.array([1.0])})
    opt.step(theta, {"w": np.array([1.0])})
    # buffers 1, 1.9 -> 1 - 0.5 - 0.95
    assert theta["w"][0] == pytest.approx(-0.45, abs=1e-15)


def test_iter_batches_keeps_partial_batch():
    batches = list(iter_batches(10, 4, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_sgd_train_zero_epochs_is_identity(net242, data8):
    spec, p = net242
    out = sgd_train(spec, p, data8, 0)
    assert out.bit_equal(p) and out is not p


def test_sgd_train_is_deterministic(net242, data8):
    spec, p = net242
    a = sgd_train(spec, p, data8, 3, seed=5)
    b = sgd_train(spec, p, data8, 3, seed=5)
    assert a.bit_equal(b)
    assert not a.bit_equal(p)


def test_sgd_train_empty_dataset(net242):
    spec, p = net242
    empty = Dataset(np.zeros((0, 2)), [], 2)
    with pytest.raises(ValueError):
        sgd_train(spec, p, empty, 1)


def test_sgd_train_reduces_loss():
    data = random_dataset(64, 4, 2, seed=2)
    spec = NetworkSpec.mlp([4, 8, 2])
    p = init_params(spec, 0)
    before = loss_and_grad(spec, p, data.features, data.labels)[0].mean_loss
    after = loss_and_grad(spec, sgd_train(spec, p, data, 20, lr=0.1, seed=1), data.features, data.labels)[0].mean_loss
    assert after < before


# ---- curvature


def test_ggn_linear_softmax_closed_form():
    spec = NetworkSpec((Dense(3, 4, bias=False),), 4)
    p = init_params(spec, 4)
    x = np.array([[0.2, 0.9, 0.5]])
    h = hessian_diag(spec, p, Dataset(x, [1], 4))
    prob = softmax(forward(spec, p, x))[0]
    expected = (prob - prob**2)[:, None] * x[0][None, :] ** 2
    np.testing.assert_allclose(h.blocks["0.weight"], expected, rtol=1e-13)


def test_ggn_matches_explicit_jacobian_oracle():
    spec = NetworkSpec((Dense(2, 4), ReLU(), Dense(4, 2)), 2)
    p = init_params(spec, 9)
    p.blocks["0.bias"] = np.array([0.05, -0.1, 0.2, 0.01])
    data = random_dataset(8, 2, 2, seed=21)
    w1, b1, w2 = p.blocks["0.weight"], p.blocks["0.bias"], p.blocks["2.weight"]
    assert np.min(np.abs(data.features @ w1.T + b1)) > 1e-6  # no sample sits on a ReLU kink
    probs = softmax(forward(spec, p, data.features))
    diag = np.zeros(p.size)
    for x, pr in zip(data.features, probs):
        jac = explicit_logit_jacobian(w1, b1, w2, x)
        hl = np.diag(pr) - np.outer(pr, pr)
        diag += np.einsum("cp,cd,dp->p", jac, hl, jac)
    diag /= len(data)
    got = hessian_diag(spec, p, data, GGN).flat()
    rel = np.abs(got - diag) / np.maximum(np.abs(diag), 1e-300)
    assert np.max(rel[diag > 0]) < 1e-8
    assert np.all(got[diag == 0] == 0)


def test_explicit_jacobian_oracle_agrees_with_finite_differences():
    spec = NetworkSpec((Dense(2, 4), ReLU(), Dense(4, 2)), 2)
    p = init_params(spec, 9)
    x = np.array([0.3, 0.8])
    jac = explicit_logit_jacobian(p.blocks["0.weight"], p.blocks["0.bias"], p.blocks["2.weight"], x)
    flat = p.flat()
    fd = np.empty_like(jac)
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += 1e-6
        dn[k] -= 1e-6
        fd[:, k] = (forward(spec, ParamSet(p.unflatten(up)), x)[0] - forward(spec, ParamSet(p.unflatten(dn)), x)[0]) / 2e-6
    np.testing.assert_allclose(jac, fd, atol=1e-8)


def test_ggn_equals_fd_exact_for_linear_model():
    # with no hidden layer the cross-entropy Hessian is exactly the Gauss-Newton matrix
    spec = NetworkSpec((Dense(3, 3),), 3)
    p = init_params(spec, 2)
    data = random_dataset(6, 3, 3, seed=4)
    a = hessian_diag(spec, p, data, GGN)
    b = hessian_diag(spec, p, data, FD_EXACT)
    assert b.mode == FD_EXACT
    for k in a.blocks:
        np.testing.assert_allclose(a.blocks[k], b.blocks[k], rtol=1e-5, atol=1e-9)


def test_ggn_nonnegative_and_chunk_invariant(net242):
    spec, p = net242
    data = random_dataset(50, 2, 2, seed=3)
    a = hessian_diag(spec, p, data, chunk_size=7)
    b = hessian_diag(spec, p, data, chunk_size=256)
    assert all(np.all(v >= 0) for v in a.blocks.values())
    for k in a.blocks:
        np.testing.assert_allclose(a.blocks[k], b.blocks[k], rtol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3]))
def test_hessian_diag_additive_over_disjoint_unions(seed, ways):
    spec = NetworkSpec.mlp([3, 4, 3])
    p = init_params(spec, seed)
    data = random_dataset(15, 3, 3, seed)
    rng = np.random.default_rng(seed)
    cuts = np.sort(rng.choice(np.arange(1, 15), size=ways - 1, replace=False))
    parts = np.split(rng.permutation(15), cuts)
    whole = hessian_diag(spec, p, data)
    acc = {k: np.zeros_like(v) for k, v in whole.blocks.items()}
    for ix in parts:
        part = hessian_diag(spec, p, data.take(ix))
        for k in acc:
            acc[k] += len(ix) * part.blocks[k]
    for k in acc:
        ref = whole.blocks[k]
        got = acc[k] / 15
        assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300)) < 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_curvature_names_block(net242, data8):
    spec, p = net242
    bad = p.copy()
    bad.blocks["3.weight"][0, 0] = np.inf
    with pytest.raises(NumericError, match="weight|bias"):
        hessian_diag(spec, bad, data8)
