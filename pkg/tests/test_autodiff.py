import numpy as np
import pytest

from sacnf.autodiff import (
    Adam,
    ConfigurationError,
    DenseNet,
    Graph,
    NumericError,
    Var,
    affine,
    affine_const,
    concat,
    inv_softplus,
    softplus,
    vmin,
)
from oracles import fd_grad, rel_err


def test_square_gradient():
    g = Graph()
    x = g.leaf(3.0)
    y = x.square()
    g.backward(y)
    assert y.item() == 9.0
    assert g.grad(x)[0, 0] == 6.0


def test_product_gradient():
    g = Graph()
    xy = g.leaf([2.0, 5.0])
    p = xy[:, 0:1] * xy[:, 1:2]
    g.backward(p)
    assert p.item() == 10.0
    assert g.grad(xy).ravel().tolist() == [5.0, 2.0]


def test_shared_subexpression_accumulates_additively():
    # f = u * u with u = x + x, against the tree-expanded oracle 4x^2
    g = Graph()
    x = g.leaf(1.7)
    u = x + x
    f = u * u
    g.backward(f)
    got = g.grad(x)[0, 0]

    g2 = Graph()
    x2 = g2.leaf(1.7)
    # tree-expanded: (x + x) * (x + x) with fresh nodes per use
    f2 = (x2 + x2) * (x2 + x2)
    g2.backward(f2)
    assert got == g2.grad(x2)[0, 0]
    assert got == pytest.approx(8.0 * 1.7)


def test_diamond_dag_adjoints():
    # y = a*b + a/b shares leaf a and b across two paths
    g = Graph()
    ab = g.leaf([2.0, 4.0])
    a, b = ab[:, 0:1], ab[:, 1:2]
    y = a * b + a / b
    g.backward(y)
    da, db = g.grad(ab).ravel()
    assert da == pytest.approx(4.0 + 1.0 / 4.0)
    assert db == pytest.approx(2.0 - 2.0 / 16.0)


def test_backward_rejects_nonfinite_with_node_id():
    g = Graph()
    x = g.leaf(-1.0)
    y = x.log()
    with pytest.raises(NumericError) as ei:
        g.backward(y)
    assert ei.value.node_id == y.ids[0, 0]


def test_elementwise_broadcasting():
    g = Graph()
    a = g.leaf(np.arange(6.0).reshape(3, 2))
    row = g.leaf([[10.0, 20.0]])
    out = a + row
    assert np.array_equal(out.values, np.arange(6.0).reshape(3, 2) + [10.0, 20.0])
    s = out.rowsum().batch_mean()
    g.backward(s)
    # each row element feeds one of three rows, each weighted 1/3
    assert np.allclose(g.grad(row), [[1.0, 1.0]])
    assert np.allclose(g.grad(a), np.full((3, 2), 1.0 / 3.0))


def test_unary_op_values():
    g = Graph()
    x = g.leaf([[0.5, -0.5]])
    assert np.allclose(x.exp().values, np.exp([0.5, -0.5]))
    assert np.allclose(x.tanh().values, np.tanh([0.5, -0.5]))
    assert np.allclose(x.relu().values, [0.5, 0.0])
    assert np.allclose(x.softplus().values, np.logaddexp(0, [0.5, -0.5]))
    assert np.allclose(x.clip(-0.2, 1.0).values, [0.5, -0.2])


def test_sqrt_guarded_at_zero():
    g = Graph()
    x = g.leaf(0.0)
    y = x.sqrt()
    g.backward(y)
    assert y.item() == 0.0
    assert g.grad(x)[0, 0] == 0.0


def test_vmin_picks_branch():
    g = Graph()
    ab = g.leaf([[3.0, 1.0]])
    m = vmin(ab[:, 0:1], ab[:, 1:2])
    g.backward(m)
    assert m.item() == 1.0
    assert g.grad(ab).ravel().tolist() == [0.0, 1.0]


def test_concat_is_id_reshuffle():
    g = Graph()
    a = g.leaf([[1.0, 2.0]])
    b = g.leaf([[3.0]])
    c = concat([a, b])
    assert c.values.tolist() == [[1.0, 2.0, 3.0]]
    assert g.n == 1 + 3  # no new nodes beyond the two leaves


def test_softplus_inverse_roundtrip():
    x = np.array([-3.0, -0.5, 0.0, 2.0, 10.0])
    assert np.allclose(inv_softplus(softplus(x)), x, atol=1e-12)


# -- DenseNet -----------------------------------------------------------------


def test_net_zero_weights_gives_activated_bias():
    net = DenseNet([3, 2], ["tanh"])
    net.params[:] = 0.0
    net.params[6:] = [0.3, -0.7]  # biases
    out = net.apply_np([[1.0, -2.0, 0.5]])
    assert np.allclose(out, np.tanh([0.3, -0.7]))


def test_net_hand_example_relu():
    net = DenseNet([1, 1], ["relu"])
    net.params[:] = [2.0, 1.0]
    assert net.apply_np([[3.0]]).item() == 7.0


def test_net_identity_map():
    net = DenseNet([2, 2], ["identity"])
    net.params[:] = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
    x = np.array([[0.4, -1.2]])
    assert np.array_equal(net.apply_np(x), x)


def test_net_graph_matches_numpy():
    rng = np.random.default_rng(1)
    net = DenseNet([3, 5, 2], ["tanh", "identity"])
    net.init_params(rng)
    x = rng.normal(size=(4, 3))
    g = Graph()
    out = net.apply(g.const(x), g.leaf(net.params))
    assert np.allclose(out.values, net.apply_np(x), atol=1e-14)
    out2 = net.apply(g.const(x), None)
    assert np.array_equal(out2.values, out.values)


def test_net_dimension_mismatch():
    net = DenseNet([3, 2], ["tanh"])
    with pytest.raises(ConfigurationError):
        net.apply_np(np.zeros((1, 4)))
    g = Graph()
    with pytest.raises(ConfigurationError):
        net.apply(g.const(np.zeros((1, 4))), None)


def test_net_param_count():
    net = DenseNet([2, 8, 2], ["tanh", "identity"])
    assert net.n_params == 2 * 8 + 8 + 8 * 2 + 2


def test_gradients_match_finite_differences_100_networks():
    rng = np.random.default_rng(7)
    acts = ["tanh", "relu", "identity"]
    worst = 0.0
    for trial in range(100):
        sizes = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(2, 4)))]
        tags = [str(rng.choice(acts)) for _ in range(len(sizes) - 1)]
        net = DenseNet(sizes, tags)
        net.init_params(rng)
        x = rng.normal(size=(2, sizes[0]))

        def loss_of(params):
            tmp = DenseNet(sizes, tags, params=params.copy())
            out = tmp.apply_np(x)
            return float(np.sum(out * out) + np.sum(np.tanh(out)))

        g = Graph()
        pv = g.leaf(net.params)
        out = net.apply(g.const(x), pv)
        scalar = (out.square() + out.tanh()).rowsum().batch_mean() * out.shape[0]
        g.backward(scalar)
        analytic = g.grad(pv).ravel()
        numeric = fd_grad(loss_of, net.params, h=1e-5)
        worst = max(worst, rel_err(analytic, numeric, floor=1e-4))
    assert worst < 1e-4


def test_affine_shared_weight_adjoint_is_sum_over_batch():
    g = Graph()
    w = g.leaf([[1.0, 2.0]])
    x = g.const([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    out = affine(x, w, None)
    g.backward(out.batch_mean() * 3.0)
    assert np.allclose(g.grad(w), [[6.0, 6.0]])


def test_affine_const_has_no_weight_nodes():
    g = Graph()
    x = g.leaf([[1.0, 2.0]])
    n_before = g.n
    out = affine_const(x, np.array([[3.0, 4.0]]), np.array([1.0]))
    assert out.item() == pytest.approx(12.0)
    assert g.n == n_before + 1
    g.backward(out)
    assert np.allclose(g.grad(x), [[3.0, 4.0]])


# -- Adam ---------------------------------------------------------------------


def test_adam_first_step_bias_corrected():
    p = np.array([1.0])
    opt = Adam(1, lr=3e-4)
    opt.step(p, np.array([2.0]))
    # bias-corrected first step: lr * g / (|g| + eps)
    assert p[0] == pytest.approx(1.0 - 3e-4 * 2.0 / (2.0 + 1e-8), rel=1e-12)
    assert opt.t == 1


def test_adam_zero_gradient_keeps_params():
    p = np.array([0.5, -0.5])
    opt = Adam(2, lr=3e-4)
    opt.step(p, np.zeros(2))
    assert np.array_equal(p, [0.5, -0.5])


def test_adam_constant_gradient_moves_monotonically():
    p = np.array([1.0])
    opt = Adam(1, lr=1e-2)
    prev = p[0]
    for _ in range(2):
        opt.step(p, np.array([3.0]))
        assert p[0] < prev
        prev = p[0]


def test_adam_lr_zero_is_identity():
    rng = np.random.default_rng(3)
    p = rng.normal(size=8)
    ref = p.copy()
    opt = Adam(8, lr=0.0)
    for _ in range(5):
        opt.step(p, rng.normal(size=8))
    assert np.array_equal(p, ref)


def test_adam_rejects_nonfinite_without_mutation():
    p = np.array([1.0, 2.0])
    opt = Adam(2, lr=1e-3)
    g = np.array([1.0, np.nan])
    with pytest.raises(NumericError):
        opt.step(p, g)
    assert np.array_equal(p, [1.0, 2.0])
    assert opt.t == 0


def test_adam_matches_reference_recurrence():
    # unrolled reference with independent arithmetic
    rng = np.random.default_rng(11)
    p = rng.normal(size=4)
    ref = p.copy()
    opt = Adam(4, lr=1e-3)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        grad = rng.normal(size=4)
        opt.step(p, grad)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad**2
        ref -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p, ref, atol=1e-15)
