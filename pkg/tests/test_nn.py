import numpy as np
import pytest

from trafficlab.nn import (
    AdamOptimizer,
    CheckpointFormatError,
    CheckpointTruncatedError,
    DivergenceError,
    Gradients,
    KfacStats,
    Layer,
    Mlp,
    SgdOptimizer,
    SingularCurvatureError,
    make_optimizer,
)


def small_net(seed=0, sizes=(3, 4, 2), activations=("tanh", "identity")):
    return Mlp.create(list(sizes), list(activations), seed=seed)


def loss_and_grad(net, x, target):
    """Half squared error against a fixed target; returns loss and d/d output."""
    out, cache = net.forward(x)
    diff = np.atleast_2d(out) - np.atleast_2d(target)
    return 0.5 * float(np.sum(diff * diff)), diff, cache


def numeric_gradient(net, x, target, h=1e-5):
    flat = net.flatten()
    grad = np.zeros_like(flat)
    probe = net.clone()
    for i in range(flat.size):
        for sign in (1.0, -1.0):
            bumped = flat.copy()
            bumped[i] += sign * h
            probe.set_flat(bumped)
            loss, _, _ = loss_and_grad(probe, x, target)
            grad[i] += sign * loss
    return grad / (2 * h)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_zero_net_identity_activation_outputs_zero():
    layers = [Layer(np.zeros((2, 3)), np.zeros(2), "identity")]
    net = Mlp(layers)
    out, _ = net.forward(np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(out, np.zeros(2))


def test_single_affine_layer_arithmetic():
    net = Mlp([Layer(np.array([[2.0]]), np.array([1.0]), "identity")])
    out, _ = net.forward(np.array([3.0]))
    assert out[0] == 7.0


def test_forward_matches_dense_algebra_oracle():
    rng = np.random.default_rng(5)
    net = small_net(seed=1, sizes=(4, 5, 3, 2), activations=("tanh", "relu", "identity"))
    x = rng.normal(size=(6, 4))
    out, _ = net.forward(x)
    # independent composition with explicit matrix products
    a = x
    for layer in net.layers:
        s = np.einsum("bi,oi->bo", a, layer.w) + layer.b
        if layer.activation == "tanh":
            a = np.tanh(s)
        elif layer.activation == "relu":
            a = np.where(s > 0, s, 0.0)
        else:
            a = s
    np.testing.assert_allclose(out, a, rtol=0, atol=1e-12)


def test_forward_rejects_wrong_input_size():
    with pytest.raises(ValueError, match="input size"):
        small_net().forward(np.zeros(5))


def test_mismatched_layer_dims_rejected():
    with pytest.raises(ValueError, match="incompatible"):
        Mlp([
            Layer(np.zeros((3, 2)), np.zeros(3), "tanh"),
            Layer(np.zeros((2, 4)), np.zeros(2), "identity"),
        ])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_identity_net_outer_product_structure():
    net = Mlp([Layer(np.zeros((2, 3)), np.zeros(2), "identity")])
    x = np.array([1.0, 2.0, -1.0])
    _, cache = net.forward(x)
    grads = net.backward(cache, np.ones(2))
    np.testing.assert_allclose(grads.dw[0], np.outer(np.ones(2), x))
    np.testing.assert_allclose(grads.db[0], np.ones(2))


def test_zero_output_gradient_gives_zero_gradients():
    net = small_net(seed=2)
    x = np.random.default_rng(0).normal(size=(4, 3))
    _, cache = net.forward(x)
    grads = net.backward(cache, np.zeros((4, 2)))
    assert grads.norm() == 0.0


@pytest.mark.parametrize("activations", [
    ("tanh", "identity"),
    ("relu", "identity"),
    ("tanh", "tanh", "identity"),
    ("identity", "identity"),
])
def test_backward_matches_finite_differences(activations):
    rng = np.random.default_rng(hash(activations) % 2**32)
    sizes = [3] + [4] * (len(activations) - 1) + [2]
    net = Mlp.create(sizes, list(activations), seed=int(rng.integers(1000)))
    x = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 2))
    _, dout, cache = loss_and_grad(net, x, target)
    analytic = net.backward(cache, dout).flatten()
    numeric = numeric_gradient(net, x, target)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert np.max(np.abs(analytic - numeric) / denom) < 1e-4


def test_backward_gradient_exactness_property_family():
    rng = np.random.default_rng(77)
    for trial in range(15):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 5)) for _ in range(depth + 1)]
        acts = [str(rng.choice(["tanh", "relu", "identity"])) for _ in range(depth)]
        net = Mlp.create(sizes, acts, seed=trial)
        # nudge off relu kinks so the numeric derivative is clean
        x = rng.normal(size=(3, sizes[0])) + 0.1
        target = rng.normal(size=(3, sizes[-1]))
        _, dout, cache = loss_and_grad(net, x, target)
        analytic = net.backward(cache, dout).flatten()
        numeric = numeric_gradient(net, x, target)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4


def test_backward_shape_mismatch_rejected():
    net = small_net()
    _, cache = net.forward(np.zeros(3))
    with pytest.raises(ValueError, match="output gradient"):
        net.backward(cache, np.zeros((2, 5)))


# ---------------------------------------------------------------------------
# flatten / determinism
# ---------------------------------------------------------------------------

def test_flatten_round_trip_is_identity():
    net = small_net(seed=9, sizes=(5, 7, 3), activations=("relu", "identity"))
    flat = net.flatten()
    clone = net.clone()
    clone.set_flat(flat)
    np.testing.assert_array_equal(clone.flatten(), flat)
    for a, b in zip(net.layers, clone.layers):
        np.testing.assert_array_equal(a.w, b.w)
        np.testing.assert_array_equal(a.b, b.b)


def test_seeded_init_is_deterministic():
    a = small_net(seed=123)
    b = small_net(seed=123)
    np.testing.assert_array_equal(a.flatten(), b.flatten())
    c = small_net(seed=124)
    assert not np.array_equal(a.flatten(), c.flatten())


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def test_zero_learning_rate_leaves_net_unchanged():
    net = small_net(seed=4)
    before = net.flatten()
    _, cache = net.forward(np.ones(3))
    grads = net.backward(cache, np.ones(2))
    SgdOptimizer(net).step(net, grads, 0.0)
    np.testing.assert_array_equal(net.flatten(), before)


def test_sgd_quadratic_descent_arithmetic():
    # f(w) = w^2 from w=1: gradient 2, descent step 0.1 -> 0.8
    net = Mlp([Layer(np.array([[1.0]]), np.array([0.0]), "identity")])
    grads = Gradients([np.array([[2.0]])], [np.array([0.0])])
    SgdOptimizer(net).step(net, grads.scaled(-1.0), 0.1)
    assert net.layers[0].w[0, 0] == pytest.approx(0.8)


def test_sgd_monotone_decrease_on_convex_quadratic():
    # independent scalar oracle: f(w) = 0.5 c w^2, stable for lr < 2/c
    c = 4.0
    net = Mlp([Layer(np.array([[1.5]]), np.array([0.0]), "identity")])
    opt = SgdOptimizer(net)
    losses = []
    for _ in range(50):
        w = net.layers[0].w[0, 0]
        losses.append(0.5 * c * w * w)
        grads = Gradients([np.array([[c * w]])], [np.array([0.0])])
        opt.step(net, grads.scaled(-1.0), 0.2)  # 0.2 < 2/c = 0.5
    assert all(b < a or a == 0 for a, b in zip(losses, losses[1:]))


def test_adam_zero_gradient_is_a_fixed_point():
    net = small_net(seed=6)
    before = net.flatten()
    opt = AdamOptimizer(net)
    zeros = Gradients([np.zeros_like(l.w) for l in net.layers],
                      [np.zeros_like(l.b) for l in net.layers])
    for _ in range(3):
        opt.step(net, zeros, 0.1)
    np.testing.assert_array_equal(net.flatten(), before)


def test_adam_reduces_quadratic_loss():
    net = Mlp([Layer(np.array([[2.0]]), np.array([0.0]), "identity")])
    opt = AdamOptimizer(net)
    for _ in range(400):
        w = net.layers[0].w[0, 0]
        grads = Gradients([np.array([[2.0 * w]])], [np.array([0.0])])
        opt.step(net, grads.scaled(-1.0), 0.05)
    assert abs(net.layers[0].w[0, 0]) < 1e-3


def test_non_finite_direction_raises_divergence():
    net = small_net(seed=8)
    bad = Gradients([np.full_like(l.w, np.nan) for l in net.layers],
                    [np.zeros_like(l.b) for l in net.layers])
    with pytest.raises(DivergenceError):
        SgdOptimizer(net).step(net, bad, 0.1)
    with pytest.raises(ValueError, match="optimizer"):
        make_optimizer("rmsprop", net)


# ---------------------------------------------------------------------------
# curvature stats
# ---------------------------------------------------------------------------

def one_layer_net(in_dim=2, out_dim=2):
    return Mlp([Layer(np.zeros((out_dim, in_dim)), np.zeros(out_dim), "identity")])


def test_stats_single_sample_outer_product():
    stats = KfacStats(one_layer_net(), damping=0.0, decay=0.0)
    stats.update([np.array([[1.0, 0.0]])], [np.array([[0.5, 0.5]])])
    np.testing.assert_allclose(stats.a_factors[0], np.array([[1.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(stats.s_factors[0], 0.25 * np.ones((2, 2)))


def test_stats_decay_one_leaves_factors_unchanged():
    stats = KfacStats(one_layer_net(), decay=1.0)
    before_a = stats.a_factors[0].copy()
    stats.update([np.random.default_rng(0).normal(size=(8, 2))],
                 [np.random.default_rng(1).normal(size=(8, 2))])
    np.testing.assert_array_equal(stats.a_factors[0], before_a)


def test_stats_batch_mean_matches_dense_oracle():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(16, 3))
    ds = rng.normal(size=(16, 2))
    stats = KfacStats(Mlp([Layer(np.zeros((2, 3)), np.zeros(2), "identity")]),
                      decay=0.0)
    stats.update([a], [ds])
    dense_a = sum(np.outer(row, row) for row in a) / len(a)
    dense_s = sum(np.outer(row, row) for row in ds) / len(ds)
    np.testing.assert_allclose(stats.a_factors[0], dense_a, atol=1e-12)
    np.testing.assert_allclose(stats.s_factors[0], dense_s, atol=1e-12)


def test_stats_stay_symmetric_psd_after_update_sequences():
    rng = np.random.default_rng(12)
    stats = KfacStats(one_layer_net(3, 2), decay=0.9)
    for _ in range(40):
        stats.update([rng.normal(size=(4, 3))], [rng.normal(size=(4, 2))])
    for factor in (stats.a_factors[0], stats.s_factors[0]):
        np.testing.assert_array_equal(factor, factor.T)
        assert np.linalg.eigvalsh(factor).min() >= -1e-10


# ---------------------------------------------------------------------------
# preconditioning
# ---------------------------------------------------------------------------

def grads_for(net, dw):
    return Gradients([np.asarray(dw, dtype=float)],
                     [np.zeros(net.layers[0].w.shape[0])])


def test_identity_curvature_is_identity_preconditioner():
    net = one_layer_net(3, 2)
    stats = KfacStats(net, damping=0.0)
    g = np.arange(6, dtype=float).reshape(2, 3)
    out = stats.precondition(grads_for(net, g))
    np.testing.assert_allclose(out.dw[0], g)


def test_diagonal_curvature_scales_gradient():
    net = one_layer_net(3, 2)
    stats = KfacStats(net, damping=0.0)
    stats.a_factors[0] = 2.0 * np.eye(3)
    stats.s_factors[0] = 4.0 * np.eye(2)
    g = np.ones((2, 3))
    out = stats.precondition(grads_for(net, g))
    np.testing.assert_allclose(out.dw[0], g / 8.0)


def random_spd(rng, n):
    m = rng.normal(size=(n, n))
    return m @ m.T + 0.5 * np.eye(n)


def test_preconditioning_matches_dense_kronecker_inverse():
    rng = np.random.default_rng(42)
    for trial in range(100):
        rows = int(rng.integers(1, 7))
        cols = int(rng.integers(1, 7))
        damping = float(rng.choice([0.0, 1e-2, 0.3]))
        net = one_layer_net(cols, rows)
        stats = KfacStats(net, damping=damping)
        stats.a_factors[0] = random_spd(rng, cols)
        stats.s_factors[0] = random_spd(rng, rows)
        g = rng.normal(size=(rows, cols))
        out = stats.precondition(grads_for(net, g)).dw[0]
        a_d = stats.a_factors[0] + damping * np.eye(cols)
        s_d = stats.s_factors[0] + damping * np.eye(rows)
        # column-stacking convention: vec(S X A) = (A^T kron S) vec(X)
        dense = np.kron(a_d.T, s_d)
        expect = np.linalg.solve(dense, g.ravel(order="F")).reshape(
            (rows, cols), order="F")
        np.testing.assert_allclose(out, expect, rtol=1e-8, atol=1e-10)


def test_bias_preconditioned_by_s_factor_alone():
    net = one_layer_net(3, 2)
    stats = KfacStats(net, damping=0.0)
    stats.s_factors[0] = 4.0 * np.eye(2)
    grads = Gradients([np.zeros((2, 3))], [np.array([2.0, 4.0])])
    out = stats.precondition(grads)
    np.testing.assert_allclose(out.db[0], np.array([0.5, 1.0]))


def test_augmented_bias_mode_matches_dense_oracle():
    rng = np.random.default_rng(7)
    net = one_layer_net(3, 2)
    stats = KfacStats(net, damping=1e-2, augment_bias=True)
    acts = rng.normal(size=(12, 3))
    ds = rng.normal(size=(12, 2))
    stats.update([acts], [ds])
    g_w = rng.normal(size=(2, 3))
    g_b = rng.normal(size=2)
    out = stats.precondition(Gradients([g_w], [g_b]))
    block = np.concatenate([g_w, g_b[:, None]], axis=1)
    a_d = stats.a_factors[0] + 1e-2 * np.eye(4)
    s_d = stats.s_factors[0] + 1e-2 * np.eye(2)
    expect = np.linalg.solve(s_d, block) @ np.linalg.inv(a_d)
    np.testing.assert_allclose(out.dw[0], expect[:, :3], rtol=1e-9)
    np.testing.assert_allclose(out.db[0], expect[:, 3], rtol=1e-9)


def test_singular_factor_without_damping_raises():
    net = one_layer_net(2, 2)
    stats = KfacStats(net, damping=0.0)
    stats.a_factors[0] = np.zeros((2, 2))
    with pytest.raises(SingularCurvatureError):
        stats.precondition(grads_for(net, np.ones((2, 2))))


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = small_net(seed=31, sizes=(4, 6, 2), activations=("tanh", "identity"))
    path = tmp_path / "net.bin"
    net.save(path)
    loaded = Mlp.load(path)
    np.testing.assert_array_equal(loaded.flatten(), net.flatten())
    assert loaded.activations == net.activations
    assert loaded.seed == net.seed


def test_checkpoint_bad_magic_rejected(tmp_path):
    net = small_net(seed=1)
    blob = bytearray(net.to_bytes())
    blob[0] ^= 0xFF
    with pytest.raises(CheckpointFormatError):
        Mlp.from_bytes(bytes(blob))


def test_checkpoint_truncation_rejected():
    blob = small_net(seed=1).to_bytes()
    with pytest.raises(CheckpointTruncatedError):
        Mlp.from_bytes(blob[:-4])


def test_checkpoint_version_mismatch_rejected():
    import struct as _struct
    blob = bytearray(small_net(seed=1).to_bytes())
    blob[4:8] = _struct.pack("<I", 99)
    with pytest.raises(CheckpointFormatError, match="version"):
        Mlp.from_bytes(bytes(blob))


def test_checkpoint_corrupted_header_rejected():
    blob = bytearray(small_net(seed=1).to_bytes())
    blob[14] ^= 0xFF  # inside the JSON header
    with pytest.raises(CheckpointFormatError):
        Mlp.from_bytes(bytes(blob))
