import numpy as np
import pytest

from mgst import ops
from mgst.convlstm import ConvLSTMParams, ConvLSTMState, InputAttentionParams, attend_input, cell_step
from mgst.fusion import FusionParams, fuse
from mgst.gradcheck import NondeterminismError, finite_diff_check
from mgst.ops import ConvSpec
from mgst.tensor import Parameter, Tensor, backward, default_dtype


# worked examples ------------------------------------------------------------


def test_bilinear_form_gradient(rng):
    x = rng.standard_normal((3, 4))
    w = Parameter(rng.standard_normal((3, 4)), name="w")
    g = backward(ops.sum(ops.hadamard(w, Tensor(x))), [w])
    np.testing.assert_array_equal(g["w"], x)


def test_sigmoid_gradient_at_zero():
    w = Parameter(np.zeros(1))
    assert backward(ops.sum(ops.sigmoid(w)), [w])[w][0] == 0.25


def test_unused_parameter_gets_zero():
    used, unused = Parameter(np.ones(3), name="used"), Parameter(np.ones((2, 2)), name="unused")
    g = backward(ops.sum(ops.scale(used, 2.0)), {"used": used, "unused": unused})
    assert g["unused"].shape == (2, 2) and not g["unused"].any()
    np.testing.assert_array_equal(g["used"], [2, 2, 2])


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError, match="scalar"):
        backward(Parameter(np.ones(3)))


def test_paths_accumulate():
    w = Parameter(np.array([2.0]))
    # w*w + 3w has derivative 2w + 3 = 7
    loss = ops.sum(ops.add(ops.hadamard(w, w), ops.scale(w, 3.0)))
    assert backward(loss, [w])[w][0] == 7.0


def test_fd_quadratic_is_exact():
    err = finite_diff_check(lambda p: ops.sum(ops.hadamard(p, p)), np.array([3.0]), eps=1e-3)
    assert err < 1e-9


def test_fd_linear(rng):
    c = Tensor(rng.standard_normal(6))
    assert finite_diff_check(lambda p: ops.sum(ops.hadamard(p, c)), rng.standard_normal(6)) < 1e-8


def test_fd_sigmoid_at_zero():
    p = Parameter(np.zeros(1))
    assert abs(backward(ops.sum(ops.sigmoid(p)), [p])[p][0] - 0.25) < 1e-6
    assert finite_diff_check(lambda q: ops.sum(ops.sigmoid(q)), np.zeros(1)) < 1e-6


def test_fd_rejects_nondeterministic_function():
    rng = np.random.default_rng(0)
    with pytest.raises(NondeterminismError):
        finite_diff_check(lambda p: ops.scale(ops.sum(p), float(rng.uniform())), np.ones(2))


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: ops.sum(p), np.ones(2), eps=0.0)


# every differentiable op, 20 seeds, at both precisions ----------------------


def _case_conv2d(rng, dt):
    w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(dt))
    b = Tensor(rng.standard_normal(2).astype(dt))
    spec = ConvSpec((3, 3), (1, 2), (1, 1))
    proj = rng.standard_normal((2, 4, 2)).astype(dt)
    return rng.standard_normal((2, 4, 4)), lambda p: ops.sum(ops.bmul(ops.conv2d(p, w, b, spec), Tensor(proj)))


def _case_conv2d_weight(rng, dt):
    x = Tensor(rng.standard_normal((2, 5, 5)).astype(dt))
    proj = rng.standard_normal((3, 3, 3)).astype(dt)
    return rng.standard_normal((3, 2, 3, 3)), lambda p: ops.sum(ops.bmul(ops.conv2d(x, p, None, ConvSpec((3, 3))), Tensor(proj)))


def _case_conv3d(rng, dt):
    w = Tensor(rng.standard_normal((2, 2, 2, 3, 3)).astype(dt))
    spec = ConvSpec((2, 3, 3), (1, 1, 1), (1, 1, 1))
    proj = rng.standard_normal((2, 3, 2, 4)).astype(dt)
    return rng.standard_normal((2, 2, 2, 4)), lambda p: ops.sum(ops.bmul(ops.conv3d(p, w, None, spec), Tensor(proj)))


def _case_maxpool(rng, dt):
    spec = ConvSpec((3, 3), (2, 2), (1, 1))
    proj = rng.standard_normal((2, 3, 3)).astype(dt)
    # a shuffled grid keeps every window free of near-ties
    x = rng.permutation(50).reshape(2, 5, 5) * 0.1
    return x, lambda p: ops.sum(ops.bmul(ops.maxpool(p, spec), Tensor(proj)))


def _case_avgpool(rng, dt):
    proj = rng.standard_normal((2, 1, 2, 2)).astype(dt)
    return rng.standard_normal((2, 1, 4, 4)), lambda p: ops.sum(ops.bmul(ops.avgpool(p, (1, 2, 2)), Tensor(proj)))


def _case_upsample(rng, dt):
    proj = rng.standard_normal((2, 5, 7)).astype(dt)
    return rng.standard_normal((2, 3, 4)), lambda p: ops.sum(ops.bmul(ops.upsample_nearest(p, (5, 7)), Tensor(proj)))


def _elementwise(fn):
    def case(rng, dt):
        proj = rng.standard_normal((4, 6)).astype(dt)
        return rng.standard_normal((4, 6)), lambda p: ops.sum(ops.bmul(fn(p), Tensor(proj)))

    return case


def _case_hadamard(rng, dt):
    other = Tensor(rng.standard_normal((4, 6)).astype(dt))
    return rng.standard_normal((4, 6)), lambda p: ops.sum(ops.hadamard(ops.tanh(p), other))


def _case_linear(rng, dt):
    x = Tensor(rng.standard_normal(6).astype(dt))
    b = Tensor(rng.standard_normal(4).astype(dt))
    proj = Tensor(rng.standard_normal(4).astype(dt))
    return rng.standard_normal((4, 6)), lambda p: ops.sum(ops.hadamard(ops.linear(x, p, b), proj))


def _case_batchnorm(rng, dt):
    gamma = Tensor(rng.uniform(0.5, 1.5, 2).astype(dt))
    beta = Tensor(rng.standard_normal(2).astype(dt))
    proj = rng.standard_normal((4, 2, 3)).astype(dt)

    def f(p):
        out = ops.batchnorm(p, gamma, beta, np.zeros(2), np.ones(2), True, 0.1, 1e-5)
        return ops.sum(ops.bmul(out, Tensor(proj)))

    return rng.standard_normal((4, 2, 3)), f


def _case_cross_entropy(rng, dt):
    labels = rng.integers(0, 5, 3)
    return rng.standard_normal((3, 5)), lambda p: ops.cross_entropy(p, labels)


def _case_fuse(rng, dt):
    p_fuse = FusionParams(2, rng)
    s = Tensor(rng.standard_normal((2, 2, 2, 2)).astype(dt))
    proj = rng.standard_normal((2, 2, 2, 2)).astype(dt)
    return rng.standard_normal((2, 2, 2, 2)), lambda p: ops.sum(ops.bmul(fuse(s, p, p_fuse), Tensor(proj)))


def _case_fuse_structure(rng, dt):
    p_fuse = FusionParams(2, rng)
    t = Tensor(rng.standard_normal((2, 2, 2, 2)).astype(dt))
    proj = rng.standard_normal((2, 2, 2, 2)).astype(dt)
    return rng.standard_normal((2, 2, 2, 2)), lambda p: ops.sum(ops.bmul(fuse(p, t, p_fuse), Tensor(proj)))


def _case_attend(rng, dt):
    att = InputAttentionParams(2, 2, 3, rng)
    h = Tensor(rng.standard_normal((2, 3, 3)).astype(dt))
    proj = rng.standard_normal((2, 3, 3)).astype(dt)
    return rng.standard_normal((2, 3, 3)), lambda p: ops.sum(ops.bmul(attend_input(p, h, att), Tensor(proj)))


def _case_cell(rng, dt):
    cell = ConvLSTMParams(2, 2, (3, 3), 3, rng)
    for name in ("W_ci", "W_cf", "W_co"):
        getattr(cell, name).data = (rng.standard_normal((2, 3, 3)) * 0.5).astype(dt)
    c = Tensor(rng.standard_normal((2, 3, 3)).astype(dt))
    h = Tensor(rng.standard_normal((2, 3, 3)).astype(dt))
    pc, ph = rng.standard_normal((2, 3, 3)).astype(dt), rng.standard_normal((2, 3, 3)).astype(dt)

    def f(p):
        st = cell_step(p, ConvLSTMState(c, h), cell)
        return ops.add(ops.sum(ops.bmul(st.C, Tensor(pc))), ops.sum(ops.bmul(st.H, Tensor(ph))))

    return rng.standard_normal((2, 3, 3)), f


def _case_cell_state(rng, dt):
    cell = ConvLSTMParams(2, 2, (2, 2), 3, rng)
    for name in ("W_ci", "W_cf", "W_co"):
        getattr(cell, name).data = (rng.standard_normal((2, 2, 2)) * 0.5).astype(dt)
    x = Tensor(rng.standard_normal((2, 2, 2)).astype(dt))
    h = Tensor(rng.standard_normal((2, 2, 2)).astype(dt))
    ph = rng.standard_normal((2, 2, 2)).astype(dt)
    return rng.standard_normal((2, 2, 2)), lambda p: ops.sum(ops.bmul(cell_step(x, ConvLSTMState(p, h), cell).H, Tensor(ph)))


CASES = {
    "conv2d_input": _case_conv2d,
    "conv2d_weight": _case_conv2d_weight,
    "conv3d": _case_conv3d,
    "maxpool": _case_maxpool,
    "avgpool": _case_avgpool,
    "upsample": _case_upsample,
    "sigmoid": _elementwise(ops.sigmoid),
    "tanh": _elementwise(ops.tanh),
    "relu": _elementwise(lambda p: ops.relu(ops.badd(p, 0.05))),
    "exp": _elementwise(ops.exp),
    "log_softmax": _elementwise(lambda p: ops.log_softmax(p, axis=1)),
    "hadamard": _case_hadamard,
    "linear": _case_linear,
    "batchnorm": _case_batchnorm,
    "cross_entropy": _case_cross_entropy,
    "fuse_temporal": _case_fuse,
    "fuse_structure": _case_fuse_structure,
    "attend_input": _case_attend,
    "cell_step_input": _case_cell,
    "cell_step_memory": _case_cell_state,
}


# at f64 a larger step balances rounding in the difference quotient against truncation
@pytest.mark.parametrize("dtype,tol,eps", [(np.float32, 1e-3, 1e-6), (np.float64, 1e-6, 1e-4)], ids=["f32", "f64"])
@pytest.mark.parametrize("name", sorted(CASES))
def test_fd_every_op_twenty_seeds(name, dtype, tol, eps):
    worst = 0.0
    with default_dtype(dtype):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x0, f = CASES[name](rng, dtype)
            assert x0.size <= 64
            worst = max(worst, finite_diff_check(f, x0.astype(dtype), eps=eps))
    assert worst < tol, f"{name}: {worst:.3e}"


# structural properties ------------------------------------------------------


def test_gradient_of_sum_is_sum_of_gradients(rng):
    w = Parameter(rng.standard_normal((3, 3)))
    x = Tensor(rng.standard_normal((3, 3)))
    f1 = ops.sum(ops.sigmoid(ops.hadamard(w, x)))
    f2 = ops.sum(ops.tanh(w))
    g1, g2 = backward(f1, [w])[w], backward(f2, [w])[w]
    g12 = backward(ops.add(f1, f2), [w])[w]
    np.testing.assert_array_equal(g12, g1 + g2)


def test_backward_twice_is_identical(rng):
    w = Parameter(rng.standard_normal((2, 3, 3)).astype(np.float32), name="w")
    x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
    loss = ops.sum(ops.tanh(ops.conv2d(x, ops.reshape(w, (1, 2, 3, 3)), None, ConvSpec((3, 3)))))
    a, b = backward(loss, [w]), backward(loss, [w])
    np.testing.assert_array_equal(a["w"], b["w"])


def test_gradient_shape_and_coverage(rng):
    cell = ConvLSTMParams(2, 3, (3, 3), 3, rng)
    cell.name_parameters()
    st = cell_step(Tensor(rng.standard_normal((2, 3, 3)).astype(np.float32)),
                   ConvLSTMState(Tensor(np.zeros((3, 3, 3), np.float32)), Tensor(np.zeros((3, 3, 3), np.float32))), cell)
    named = dict(cell.named_parameters())
    g = backward(ops.sum(st.H), named)
    for name, p in named.items():
        assert g[name].shape == p.shape


def test_no_grad_records_nothing():
    from mgst.tensor import no_grad

    w = Parameter(np.ones(2))
    with no_grad():
        out = ops.sigmoid(w)
    assert not out.requires_grad
