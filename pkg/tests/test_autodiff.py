"""Differentiation graph, primitives, MLP, optimizer, checkpoint container."""

import numpy as np
import pytest

from topomesh.autodiff import (
    GraphError,
    Layer,
    MlpParams,
    NonFiniteGradient,
    OptimState,
    Value,
    WrappedMlp,
    concat,
    cross_rows,
    gather,
    grad_check,
    make_mlp,
    max_along_axis,
    min_along_axis,
    mlp_forward,
    optimizer_step,
    repeat_rows,
)
from topomesh.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

TOL = 1e-5
N_INSTANCES = 50


def rand(rng, *shape):
    return rng.standard_normal(shape)


# -- analytic sanity ------------------------------------------------------------


def test_tanh_at_zero():
    x = Value(np.zeros(3))
    y = x.tanh().sum()
    y.backward()
    assert np.all(x.grad == 1.0)


def test_matmul_shape_rule():
    a = Value(np.ones((2, 3)))
    b = Value(np.ones((3, 1)))
    assert (a @ b).shape == (2, 1)
    with pytest.raises(GraphError):
        Value(np.ones((2, 3))) @ Value(np.ones((2, 3)))


def test_sum_of_squares_gradient():
    x = Value(np.array([1.0, 2.0, 3.0]))
    y = x.square().sum()
    y.backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_min_tie_routes_to_lowest_index():
    x = Value(np.array([[3.0, 1.0, 1.0, 5.0]]))
    out, idx = min_along_axis(x, axis=1)
    assert idx.tolist() == [1]
    out.sum().backward()
    assert x.grad.tolist() == [[0.0, 1.0, 0.0, 0.0]]


def test_max_tie_routes_to_lowest_index():
    x = Value(np.array([[2.0, 7.0], [7.0, 2.0]]))
    out, idx = max_along_axis(x, axis=0)
    assert idx.tolist() == [1, 0]
    out.sum().backward()
    assert x.grad.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_broadcast_add_unbroadcasts_gradient():
    a = Value(np.ones((3, 1)))
    b = Value(np.ones((1, 4)))
    (a + b).sum().backward()
    assert a.grad.shape == (3, 1) and np.all(a.grad == 4.0)
    assert b.grad.shape == (1, 4) and np.all(b.grad == 3.0)


def test_gather_accumulates_repeated_indices():
    x = Value(np.arange(6.0).reshape(3, 2))
    out = gather(x, np.array([0, 0, 2]))
    out.sum().backward()
    assert x.grad.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]


def test_gather_rejects_bad_indices():
    with pytest.raises(GraphError):
        gather(Value(np.zeros((3, 2))), np.array([3]))


def test_graph_is_single_use():
    x = Value(np.array([2.0]))
    y = x.square().sum()
    y.backward()
    with pytest.raises(GraphError):
        y.backward()
    with pytest.raises(GraphError):
        y + 1.0


def test_backward_requires_scalar():
    with pytest.raises(GraphError):
        Value(np.zeros(3)).backward()


def test_diamond_graph_accumulates_once():
    # z = x*x + x*x reuses the same subexpression node twice
    x = Value(np.array([3.0]))
    sq = x.square()
    z = (sq + sq).sum()
    z.backward()
    assert x.grad.tolist() == [12.0]


# -- finite-difference checks per primitive --------------------------------------


def fd_cases():
    """(name, builder) pairs; builder(rng) -> (fn, inputs)."""

    def elementwise(op):
        def build(rng):
            a, b = rand(rng, 3, 4), rand(rng, 3, 4)
            return lambda x, y: op(x, y).sum(), [a, b]

        return build

    def build_broadcast(rng):
        a, b = rand(rng, 3, 1), rand(rng, 1, 4)
        return lambda x, y: (x * y + x).sum(), [a, b]

    def build_div(rng):
        a = rand(rng, 3, 4)
        b = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        return lambda x, y: (x / y).sum(), [a, b]

    def build_matmul(rng):
        a, b = rand(rng, 3, 4), rand(rng, 4, 2)
        return lambda x, y: (x @ y).square().sum(), [a, b]

    def build_relu(rng):
        a = rand(rng, 4, 3)
        a[np.abs(a) < 0.05] += 0.1  # keep clear of the kink
        return lambda x: x.relu().sum(), [a]

    def build_tanh(rng):
        return lambda x: x.tanh().square().sum(), [rand(rng, 3, 3)]

    def build_sqrt(rng):
        return lambda x: x.sqrt().sum(), [rng.uniform(0.2, 3.0, (3, 4))]

    def build_abs(rng):
        a = rand(rng, 3, 4)
        a[np.abs(a) < 0.05] += 0.1
        return lambda x: x.abs().sum(), [a]

    def build_sum_axis(rng):
        return lambda x: x.sum(axis=1).square().sum(), [rand(rng, 3, 4)]

    def build_mean(rng):
        return lambda x: x.mean().square().sum(), [rand(rng, 4, 2)]

    def build_reshape(rng):
        return lambda x: x.reshape((2, 6)).square().sum(), [rand(rng, 3, 4)]

    def build_transpose(rng):
        a, b = rand(rng, 3, 4), rand(rng, 3, 2)
        return lambda x, y: (x.transpose() @ y).sum(), [a, b]

    def build_norm_rows(rng):
        a = rand(rng, 5, 3)
        a += np.sign(a.sum(axis=1, keepdims=True)) * 0.5  # keep rows off zero
        return lambda x: x.norm_rows().sum(), [a]

    def build_concat(rng):
        a, b = rand(rng, 3, 2), rand(rng, 3, 4)
        return lambda x, y: concat([x, y], axis=1).square().sum(), [a, b]

    def build_gather(rng):
        a = rand(rng, 5, 3)
        idx = rng.integers(0, 5, size=7)
        return lambda x: gather(x, idx).square().sum(), [a]

    def build_min0(rng):
        return lambda x: min_along_axis(x, axis=0)[0].sum(), [rand(rng, 5, 3)]

    def build_min1(rng):
        return lambda x: min_along_axis(x, axis=1)[0].square().sum(), [rand(rng, 4, 6)]

    def build_max0(rng):
        return lambda x: max_along_axis(x, axis=0)[0].sum(), [rand(rng, 6, 3)]

    def build_cross(rng):
        a, b = rand(rng, 4, 3), rand(rng, 4, 3)
        return lambda x, y: cross_rows(x, y).square().sum(), [a, b]

    def build_repeat_rows(rng):
        a = rand(rng, 4)
        w = rand(rng, 3, 4)
        return lambda x, y: (repeat_rows(x, 3) * y).sum(), [a, w]

    return [
        ("add", elementwise(lambda x, y: x + y)),
        ("sub", elementwise(lambda x, y: x - y)),
        ("mul", elementwise(lambda x, y: x * y)),
        ("neg", elementwise(lambda x, y: -x + y)),
        ("broadcast", build_broadcast),
        ("div", build_div),
        ("matmul", build_matmul),
        ("relu", build_relu),
        ("tanh", build_tanh),
        ("sqrt", build_sqrt),
        ("abs", build_abs),
        ("sum_axis", build_sum_axis),
        ("mean", build_mean),
        ("reshape", build_reshape),
        ("transpose", build_transpose),
        ("norm_rows", build_norm_rows),
        ("concat", build_concat),
        ("gather", build_gather),
        ("min_axis0", build_min0),
        ("min_axis1", build_min1),
        ("max_axis0", build_max0),
        ("cross_rows", build_cross),
        ("repeat_rows", build_repeat_rows),
    ]


@pytest.mark.parametrize("name,builder", fd_cases(), ids=[n for n, _ in fd_cases()])
def test_primitive_matches_finite_differences(name, builder):
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(N_INSTANCES):
        fn, inputs = builder(rng)
        worst = max(worst, grad_check(fn, inputs))
    assert worst < TOL, f"{name}: max relative error {worst:.3e}"


def test_grad_check_on_plain_sum_is_clean():
    rng = np.random.default_rng(0)
    err = grad_check(lambda x: x.sum(), [rand(rng, 3, 3)])
    assert err < 1e-9


# -- MLP --------------------------------------------------------------------------


def test_make_mlp_init_ranges():
    rng = np.random.default_rng(5)
    params = make_mlp([20, 40, 3], ["relu", "tanh"], rng)
    for layer, fan_in in zip(params.layers, [20, 40]):
        bound = 1.0 / np.sqrt(fan_in)
        assert np.all(np.abs(layer.weight) <= bound)
        assert np.all(layer.bias == 0.0)
    assert params.in_dim == 20 and params.out_dim == 3


def test_mlp_rejects_inconsistent_dims():
    with pytest.raises(GraphError):
        make_mlp([4, 5], ["relu", "tanh"], np.random.default_rng(0))
    with pytest.raises(GraphError):
        MlpParams(
            [
                Layer(np.zeros((5, 4)), np.zeros(5), "relu"),
                Layer(np.zeros((3, 6)), np.zeros(3), "none"),
            ]
        )
    with pytest.raises(GraphError):
        Layer(np.zeros((3, 3)), np.zeros(3), "sigmoid")
    with pytest.raises(GraphError):
        Layer(np.full((3, 3), np.nan), np.zeros(3), "relu")


def test_identity_layer_passthrough():
    params = MlpParams([Layer(np.eye(4), np.zeros(4), "none")])
    x = np.random.default_rng(1).standard_normal((6, 4))
    out = mlp_forward(params, Value(x))
    assert np.array_equal(out.data, x)


def test_deform_layout_output_range():
    rng = np.random.default_rng(9)
    feature_dim = 32  # narrow stand-in for the 1024-wide feature
    params = make_mlp(
        [3 + feature_dim, 64, 32, 16, 8, 3],
        ["relu", "relu", "relu", "relu", "tanh"],
        rng,
    )
    x = rng.standard_normal((10, 3 + feature_dim))
    out = mlp_forward(params, Value(x))
    assert out.shape == (10, 3)
    assert np.all(np.abs(out.data) < 1.0)


def test_mlp_forward_rejects_wrong_width():
    params = make_mlp([4, 3], ["none"], np.random.default_rng(0))
    with pytest.raises(GraphError):
        mlp_forward(params, Value(np.zeros((2, 5))))


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(10):
        params = make_mlp([4, 8, 6, 5, 2], ["relu", "relu", "relu", "tanh"], rng)
        x = rng.standard_normal((3, 4))

        arrays = [x]
        for layer in params.layers:
            arrays += [layer.weight, layer.bias]
        acts = [l.activation for l in params.layers]

        def fn(xv, *layer_values):
            wrapped = WrappedMlp.__new__(WrappedMlp)
            wrapped.prefix = "t"
            wrapped.layers = [
                (layer_values[2 * i], layer_values[2 * i + 1], acts[i])
                for i in range(len(acts))
            ]
            return mlp_forward(wrapped, xv).square().sum()

        worst = max(worst, grad_check(fn, arrays))
    assert worst < TOL


def test_wrapped_mlp_exposes_named_grads():
    rng = np.random.default_rng(3)
    params = make_mlp([3, 4, 1], ["relu", "none"], rng)
    wrapped = WrappedMlp(params, prefix="net")
    out = mlp_forward(wrapped, Value(rng.standard_normal((5, 3))))
    out.sum().backward()
    grads = dict(wrapped.named_grads())
    assert set(grads) == {
        "net.layer0.weight",
        "net.layer0.bias",
        "net.layer1.weight",
        "net.layer1.bias",
    }
    assert grads["net.layer0.weight"].shape == (4, 3)


# -- optimizer ---------------------------------------------------------------------


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0])}
    state = OptimState(lr=0.1)
    optimizer_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(params["w"], [1.0, -2.0])
    assert state.step == 1


def test_descent_direction_on_square():
    params = {"w": np.array([1.0])}
    state = OptimState(lr=0.1)
    optimizer_step(params, {"w": 2.0 * params["w"]}, state)
    assert abs(params["w"][0]) < 1.0


def test_quadratic_convergence():
    rng = np.random.default_rng(13)
    target = rng.standard_normal(6)
    params = {"w": np.zeros(6)}
    state = OptimState(lr=0.1)
    for lr, steps in [(0.1, 500), (0.01, 500), (1e-3, 500), (1e-5, 500), (1e-7, 500)]:
        state.lr = lr
        for _ in range(steps):
            grad = 2.0 * (params["w"] - target)
            optimizer_step(params, {"w": grad}, state)
    assert np.abs(params["w"] - target).max() < 1e-6


def test_optimizer_is_deterministic():
    def run():
        rng = np.random.default_rng(4)
        params = {"a": rng.standard_normal(4), "b": rng.standard_normal((2, 2))}
        state = OptimState(lr=0.05)
        for step in range(50):
            grads = {k: np.sin(v + step) for k, v in params.items()}
            optimizer_step(params, grads, state)
        return params

    first, second = run(), run()
    for key in first:
        assert np.array_equal(first[key], second[key])


def test_nonfinite_gradient_names_parameter():
    params = {"deform1.layer0.weight": np.zeros(3)}
    bad = {"deform1.layer0.weight": np.array([1.0, np.nan, 0.0])}
    with pytest.raises(NonFiniteGradient, match="deform1.layer0.weight"):
        optimizer_step(params, bad, OptimState(lr=0.1))


def test_missing_gradient_raises():
    with pytest.raises(KeyError):
        optimizer_step({"w": np.zeros(2)}, {}, OptimState(lr=0.1))


def test_gradient_shape_mismatch_raises():
    with pytest.raises(GraphError):
        optimizer_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimState(lr=0.1))


# -- checkpoint container ------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    arrays = {
        "net.layer0.weight": rng.standard_normal((4, 3)),
        "net.layer0.bias": rng.standard_normal(4),
        "config.taus": np.array([0.1, 0.05]),
        "config.level": np.array(4.0),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(arrays, path)
    back = load_checkpoint(path)
    assert set(back) == set(arrays)
    for key in arrays:
        assert back[key].shape == np.asarray(arrays[key]).shape
        assert np.array_equal(back[key], arrays[key])


def test_checkpoint_is_order_independent(tmp_path):
    a = {"x": np.arange(3.0), "y": np.ones((2, 2))}
    b = {"y": np.ones((2, 2)), "x": np.arange(3.0)}
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, pa)
    save_checkpoint(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint({"w": np.ones((8, 8))}, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint({"w": np.ones(2)}, path)
    path.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
