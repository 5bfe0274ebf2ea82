import numpy as np
import pytest

from lgdg import autodiff as ad
from lgdg.autodiff import (
    DomainError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    apply_elementwise,
    backward,
    grad_check,
)


def test_sigmoid_of_zero_is_half():
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_add_vectors():
    out = apply_elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_log_rejects_nonpositive():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))


def test_square_derivative_via_backward():
    x = ad.parameter([3.0])
    with Tape():
        y = ad.mul(x, x)
        backward(y)
    assert x.grad[0] == pytest.approx(6.0, abs=1e-12)


def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(Tensor(np.eye(2)), m)
    assert np.array_equal(out.data, m.data)


def test_matmul_values():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_dim_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    b = ad.constant(rng.normal(size=(3, 2)))
    a = ad.parameter(rng.normal(size=(2, 3)))
    err = grad_check(lambda t: ad.sum_all(ad.matmul(t, b)), a, eps=1e-5)
    assert err < 1e-6


def test_resize_preserves_constant_maps():
    m = Tensor(np.full((2, 3, 3), 0.7))
    out = ad.resize_bilinear(m, 5, 4)
    assert np.allclose(out.data, 0.7, atol=1e-12)


def test_resize_replicates_single_pixel():
    m = Tensor(np.full((1, 1, 1), 2.5))
    out = ad.resize_bilinear(m, 4, 6)
    assert np.array_equal(out.data, np.full((1, 4, 6), 2.5))


def test_resize_center_of_two_by_two():
    # corner-aligned sampling of [[0,1],[2,3]] at (0.5, 0.5)
    m = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    out = ad.resize_bilinear(m, 3, 3)
    assert out.data[0, 1, 1] == pytest.approx(1.5, abs=1e-12)


def test_resize_rejects_empty_output():
    with pytest.raises(ShapeError):
        ad.resize_bilinear(Tensor(np.ones((1, 2, 2))), 0, 3)


def test_backward_constant_chain_leaves_grads_zero():
    w = ad.parameter([1.0, 2.0])
    c = ad.constant([4.0])
    with Tape():
        loss = ad.mean_all(ad.mul(c, c))
        backward(loss)
    assert w.grad is None
    assert np.array_equal(w.grad_array(), [0.0, 0.0])


def test_backward_of_sum_gives_ones():
    w = ad.parameter([1.0, -2.0, 3.0])
    with Tape():
        backward(ad.sum_all(w))
    assert np.array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_rejects_nonscalar():
    w = ad.parameter([1.0, 2.0])
    with Tape():
        y = ad.mul(w, w)
        with pytest.raises(ShapeError):
            backward(y)


def test_consumed_tape_errors():
    w = ad.parameter([1.0])
    with Tape() as tape:
        y = ad.sum_all(ad.mul(w, w))
        backward(y)
        with pytest.raises(TapeError):
            backward(y)
    tape.reset()
    assert len(tape) == 0 and not tape.consumed


def test_grad_check_linear():
    x = ad.parameter(np.linspace(-1, 1, 5))
    assert grad_check(lambda t: ad.sum_all(t), x) < 1e-10


def test_grad_check_quadratic():
    x = ad.parameter(np.random.default_rng(3).normal(size=6))
    assert grad_check(lambda t: ad.sum_all(ad.mul(t, t)), x) < 1e-7


def test_grad_check_eps_bounds():
    x = ad.parameter([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda t: ad.sum_all(t), x, eps=1e-2)


def test_grad_check_rejects_nonscalar_function():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        grad_check(lambda t: ad.mul(t, t), x)


def _op_cases(rng):
    """(name, scalar-valued closure, leaf) triples exercising every op."""
    n = int(rng.integers(2, 8))
    v = ad.parameter(rng.normal(size=n))
    w = ad.constant(rng.normal(size=n))
    m = ad.parameter(rng.normal(size=(3, 4)))
    chw = ad.parameter(rng.normal(size=(2, 4, 4)))
    pos = ad.parameter(rng.uniform(0.5, 2.0, size=n))
    mm = ad.constant(rng.normal(size=(4, 2)))
    idx = rng.integers(0, 12, size=7)
    cases = [
        ("add", lambda t: ad.sum_all(ad.mul(ad.add(t, w), w)), v),
        ("sub", lambda t: ad.sum_all(ad.mul(ad.sub(t, w), w)), v),
        ("mul", lambda t: ad.sum_all(ad.mul(ad.mul(t, w), t)), v),
        ("scale", lambda t: ad.sum_all(ad.mul(ad.scale(t, 1.7), t)), v),
        ("relu", lambda t: ad.sum_all(ad.mul(ad.relu(t), w)), v),
        ("sigmoid", lambda t: ad.sum_all(ad.mul(ad.sigmoid(t), w)), v),
        ("softplus", lambda t: ad.sum_all(ad.mul(ad.softplus(t), w)), v),
        ("log", lambda t: ad.sum_all(ad.mul(ad.log(t), ad.log(t))), pos),
        ("matmul", lambda t: ad.sum_all(ad.mul(ad.matmul(t, mm), ad.matmul(t, mm))), m),
        ("transpose", lambda t: ad.sum_all(ad.mul(ad.transpose2d(t), ad.transpose2d(t))), m),
        ("reshape", lambda t: ad.sum_all(ad.mul(ad.reshape(t, (4, 3)), ad.reshape(t, (4, 3)))), m),
        ("concat", lambda t: ad.sum_all(ad.mul(ad.concat([t, t], axis=1), ad.concat([t, t], axis=1))), m),
        ("take", lambda t: ad.sum_all(ad.mul(ad.take(t, idx), ad.take(t, idx))), m),
        ("mean", lambda t: ad.mean_all(ad.mul(t, t)), v),
        ("pad", lambda t: ad.sum_all(ad.mul(ad.pad_chw(t, 1, 1), ad.pad_chw(t, 1, 1))), chw),
        ("interleave", lambda t: ad.sum_all(ad.mul(ad.zero_interleave_chw(t, 2), ad.zero_interleave_chw(t, 2))), chw),
        ("avg_pool", lambda t: ad.sum_all(ad.mul(ad.avg_pool_chw(t, 2), ad.avg_pool_chw(t, 2))), chw),
        ("resize", lambda t: ad.sum_all(ad.mul(ad.resize_bilinear(t, 6, 3), ad.resize_bilinear(t, 6, 3))), chw),
    ]
    return cases


@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_grad_check(seed):
    rng = np.random.default_rng(seed)
    # relu kinks: keep inputs away from zero so central differences are valid
    for name, f, leaf in _op_cases(rng):
        if name == "relu":
            leaf.data[np.abs(leaf.data) < 1e-3] = 0.5
        err = grad_check(f, leaf, eps=1e-5)
        assert err < 1e-5, f"{name} failed grad check at seed {seed}: {err}"


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(11)
    w = ad.parameter(rng.normal(size=5))
    a = ad.constant(rng.normal(size=5))

    def l1(t):
        return ad.sum_all(ad.mul(ad.sigmoid(t), a))

    def l2(t):
        return ad.mean_all(ad.mul(t, ad.mul(t, t)))

    with Tape():
        backward(ad.add(l1(w), l2(w)))
    joint = w.grad.copy()

    w.grad = None
    with Tape():
        backward(l1(w))
    with Tape():
        backward(l2(w))
    separate = w.grad.copy()

    denom = np.maximum(np.abs(joint), np.abs(separate))
    rel = np.abs(joint - separate) / np.where(denom > 0, denom, 1.0)
    assert rel.max() <= 1e-12


def test_forward_and_gradients_are_deterministic():
    def run():
        rng = np.random.default_rng(42)
        w = ad.parameter(rng.normal(size=(4, 4)))
        x = ad.constant(rng.normal(size=(4, 4)))
        with Tape():
            y = ad.sum_all(ad.sigmoid(ad.matmul(w, x)))
            backward(y)
        return y.data.copy(), w.grad.copy()

    y1, g1 = run()
    y2, g2 = run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(g1, g2)


def test_apply_elementwise_unknown_kind():
    with pytest.raises(ValueError):
        apply_elementwise("cosh", Tensor([1.0]))


def test_debug_checks_flag_catches_nonfinite():
    ad.set_debug_checks(True)
    try:
        with pytest.raises(DomainError):
            ad.scale(Tensor([1e308]), 1e308)
    finally:
        ad.set_debug_checks(False)


def test_interleave_and_pool_shapes():
    x = Tensor(np.arange(8.0).reshape(2, 2, 2))
    up = ad.zero_interleave_chw(x, 2)
    assert up.shape == (2, 4, 4)
    assert up.data[0, 0, 0] == 0.0 and up.data[0, 2, 2] == 3.0
    assert up.data[0, 1, 1] == 0.0
    down = ad.avg_pool_chw(up, 2)
    assert np.array_equal(down.data, x.data / 4.0)
