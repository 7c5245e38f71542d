import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hotspot.errors import CheckpointError, InvalidArgument, TrainingDivergence
from hotspot.field import (AdamState, Architecture, NeuralField, adam_step, init_geometric, init_quality,
                           init_random, read_checkpoint, write_checkpoint)
from hotspot.validation import gradient_fd_error, reference_value_and_grad


def affine_field():
    arch = Architecture(2, width=1, layers=0)
    return NeuralField(arch, np.array([1.0, 2.0, 0.5]))


def straight_line_value(fld, x):
    """Scalar loops over units and inputs, written without matrix products."""
    arch = fld.arch
    out = []
    for p in x:
        a = list(p)
        layers = fld.layers()
        for W, b in layers[:-1]:
            nxt = []
            for i in range(W.shape[0]):
                z = b[i]
                for j in range(W.shape[1]):
                    z += W[i, j] * a[j]
                if arch.activation == "softplus":
                    bz = arch.beta * z
                    nxt.append((max(bz, 0.0) + np.log1p(np.exp(-abs(bz)))) / arch.beta)
                else:
                    nxt.append(np.sin(arch.omega0 * z))
            a = nxt
        W, b = layers[-1]
        out.append(b[0] + sum(W[0, j] * a[j] for j in range(W.shape[1])))
    return np.array(out)


def test_zero_network_is_zero():
    fld = NeuralField(Architecture(3, width=8, layers=3))
    x = np.random.default_rng(0).standard_normal((10, 3))
    assert np.all(fld.forward(x) == 0.0)


def test_affine_value_and_gradient():
    res = affine_field().forward_with_grad(np.array([[1.0, 1.0]]))
    assert res.value[0] == 3.5
    assert np.array_equal(res.grad[0], [1.0, 2.0])


def test_single_point_returns_scalar():
    assert affine_field().forward([1.0, 1.0]) == 3.5


def test_softplus_unit_slope_at_origin():
    arch = Architecture(1, width=1, layers=1, beta=100.0)
    # u = softplus(x): hidden weight 1, bias 0; output weight 1, bias 0
    fld = NeuralField(arch, np.array([1.0, 0.0, 1.0, 0.0]))
    res = fld.forward_with_grad(np.array([[0.0]]))
    assert res.grad[0, 0] == 0.5
    assert res.value[0] == pytest.approx(np.log(2.0) / 100.0, rel=1e-15)


@pytest.mark.parametrize("activation", ["softplus", "sine"])
def test_matches_straight_line_evaluator(activation):
    arch = Architecture(2, width=6, layers=3, activation=activation, beta=5.0)
    fld = init_random(arch, 4)
    x = np.random.default_rng(1).uniform(-1, 1, (7, 2))
    assert np.max(np.abs(fld.forward(x) - straight_line_value(fld, x))) < 1e-12


@pytest.mark.parametrize("activation", ["softplus", "sine"])
def test_input_gradient_matches_central_differences(activation):
    arch = Architecture(3, width=16, layers=3, activation=activation, beta=10.0)
    fld = init_random(arch, 2)
    x = np.random.default_rng(3).uniform(-1, 1, (20, 3))
    grad = fld.forward_with_grad(x).grad
    step = 1e-6
    fd = np.empty_like(grad)
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        fd[:, k] = (fld.forward(x + e) - fld.forward(x - e)) / (2 * step)
    rel = np.abs(fd - grad) / np.maximum(np.abs(grad), 1e-3)
    assert np.max(rel) < 1e-5


def test_reference_forward_agrees_with_field():
    arch = Architecture(3, width=16, layers=4, beta=10.0)
    fld = init_random(arch, 5)
    x = np.random.default_rng(0).uniform(-1, 1, (30, 3))
    u, g = reference_value_and_grad(arch, fld.theta, x)
    res = fld.forward_with_grad(x)
    assert np.max(np.abs(u - res.value)) < 1e-12
    assert np.max(np.abs(g - res.grad)) < 1e-12


def test_zero_adjoints_give_zero_gradient():
    fld = init_random(Architecture(2, width=8, layers=3), 0)
    x = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    g = fld.param_gradient(x, np.zeros(5), np.zeros((5, 2)))
    assert np.all(g == 0.0)


def test_affine_gradient_adjoint_closed_form():
    fld = affine_field()
    x = np.random.default_rng(0).uniform(-1, 1, (4, 2))
    adj_g = np.tile([1.0, 0.0], (4, 1))
    g = fld.param_gradient(x, np.zeros(4), adj_g)
    # d/dw of sum_i grad u(x_i) . e1 = 4 e1; bias does not enter the gradient
    assert np.array_equal(g, [4.0, 0.0, 0.0])


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("activation", ["softplus", "sine"])
def test_parameter_gradient_full_sweep(seed, activation):
    arch = Architecture(2 + seed % 2, width=8, layers=3, activation=activation, beta=10.0, omega0=3.0)
    assert gradient_fd_error(arch, seed) < 1e-4


def test_value_bitwise_equal_between_paths():
    fld = init_random(Architecture(2, width=32, layers=3), 1)
    x = np.random.default_rng(0).uniform(-1, 1, (300, 2))
    assert np.array_equal(fld.forward(x), fld.forward_with_grad(x).value)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 400))
def test_evaluation_independent_of_batch_composition(seed, n):
    fld = init_random(Architecture(2, width=16, layers=3), 3)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, 2))
    full = fld.forward_with_grad(x)
    perm = rng.permutation(n)
    shuffled = fld.forward_with_grad(x[perm])
    assert np.array_equal(shuffled.value, full.value[perm])
    assert np.array_equal(shuffled.grad, full.grad[perm])
    k = int(rng.integers(0, n))
    single = fld.forward_with_grad(x[k:k + 1])
    assert np.array_equal(single.value, full.value[k:k + 1])


def test_evaluation_independent_of_thread_count():
    fld = init_random(Architecture(3, width=32, layers=3), 0)
    x = np.random.default_rng(0).uniform(-1, 1, (1000, 3))
    one = fld.tape(x, with_grad=True, threads=1)
    four = fld.tape(x, with_grad=True, threads=4)
    assert np.array_equal(one.value, four.value) and np.array_equal(one.grad, four.grad)
    adj_u = np.random.default_rng(1).standard_normal(1000)
    adj_g = np.random.default_rng(2).standard_normal((1000, 3))
    assert np.array_equal(one.backward(adj_u, adj_g), four.backward(adj_u, adj_g))


def test_wrong_parameter_count_rejected():
    with pytest.raises(InvalidArgument):
        NeuralField(Architecture(2, width=4, layers=1), np.zeros(3))


def test_nonfinite_parameters_rejected():
    arch = Architecture(2, width=4, layers=1)
    theta = np.zeros(arch.num_params)
    theta[0] = np.nan
    with pytest.raises(InvalidArgument):
        NeuralField(arch, theta)


@pytest.mark.parametrize("dim", [2, 3])
def test_geometric_init_contract(dim):
    arch = Architecture(dim, width=32, layers=3)
    fld = init_geometric(arch, 0.5, seed=0, steps=300)
    assert fld.forward(np.zeros(dim)) < 0
    agree, corr = init_quality(fld, 0.5, np.random.default_rng(9))
    assert agree >= 0.9 and corr >= 0.9
    d = np.random.default_rng(1).standard_normal((500, dim))
    on = 0.5 * d / np.linalg.norm(d, axis=1, keepdims=True)
    assert np.mean(np.abs(fld.forward(on))) < 0.1


def test_fitted_distance_has_unit_gradient():
    fld = init_geometric(Architecture(2, width=32, layers=3), 0.5, seed=1, steps=600)
    x = np.random.default_rng(2).uniform(-1, 1, (4000, 2))
    r = np.linalg.norm(x, axis=1)
    x = x[(r >= 0.2) & (r <= 1.0)]
    norms = np.linalg.norm(fld.forward_with_grad(x).grad, axis=1)
    assert np.mean((norms >= 0.9) & (norms <= 1.1)) >= 0.95


def test_adam_zero_gradient_fixed_point():
    theta = np.array([1.0, -2.0])
    new, state = adam_step(AdamState.create(2, lr=0.1), theta, np.zeros(2))
    assert np.array_equal(new, theta)
    assert np.all(state.m == 0) and np.all(state.v == 0)


def test_adam_first_step_moves_by_learning_rate():
    new, _ = adam_step(AdamState.create(1, lr=1e-3), np.array([0.0]), np.array([5.0]))
    assert abs(new[0]) == pytest.approx(1e-3, rel=1e-6)


def test_adam_trajectory_on_square():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta = np.array([1.0])
    state = AdamState.create(1, lr=lr)
    # reference recursion written out by hand on plain floats
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        theta, state = adam_step(state, theta, 2.0 * theta)
        assert abs(theta[0] - x) < 1e-10


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(TrainingDivergence):
        adam_step(AdamState.create(2), np.zeros(2), np.array([1.0, np.inf]))


def test_checkpoint_round_trip(tmp_path):
    fld = init_random(Architecture(3, width=16, layers=2, activation="sine"), 0)
    rng = np.random.default_rng(0)
    adam = AdamState(7, rng.standard_normal(fld.arch.num_params), rng.random(fld.arch.num_params), lr=3e-4)
    write_checkpoint(tmp_path / "m.ckpt", fld, adam, iteration=7, extra={"note": "x"})
    back, back_adam, it, extra = read_checkpoint(tmp_path / "m.ckpt")
    assert back.arch == fld.arch and np.array_equal(back.theta, fld.theta)
    assert back_adam.step == 7 and np.array_equal(back_adam.m, adam.m) and np.array_equal(back_adam.v, adam.v)
    assert back_adam.lr == 3e-4 and it == 7 and extra == {"note": "x"}


def test_checkpoint_bad_magic(tmp_path):
    fld = init_random(Architecture(2, width=4, layers=1), 0)
    write_checkpoint(tmp_path / "m.ckpt", fld)
    data = bytearray((tmp_path / "m.ckpt").read_bytes())
    data[0:3] = b"XXX"
    (tmp_path / "m.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_truncated(tmp_path):
    fld = init_random(Architecture(2, width=4, layers=1), 0)
    write_checkpoint(tmp_path / "m.ckpt", fld)
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "m.ckpt")
