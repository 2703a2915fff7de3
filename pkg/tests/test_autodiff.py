import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from psst import autodiff as ad
from psst.errors import ContractError, DegenerateInputError, DimensionError, DomainError


def grad_of(fn, *values):
    """Analytic gradient of scalar ``fn(*nodes)`` w.r.t. each value."""
    tape = ad.Tape()
    nodes = [tape.param(v) for v in values]
    ad.backward(fn(*nodes))
    return [n.grad for n in nodes]


def fd_of(fn, *values):
    arrs = [np.array(v, dtype=float) for v in values]

    def f(*xs):
        tape = ad.Tape()
        return fn(*[tape.constant(x) for x in xs]).value

    return ad.finite_difference_grad(f, arrs)


def assert_fd(fn, *values, rtol=1e-5, atol=1e-7):
    for g, fd in zip(grad_of(fn, *values), fd_of(fn, *values)):
        np.testing.assert_allclose(g, fd, rtol=rtol, atol=atol)


# ----------------------------------------------------------------- matmul


def test_matmul_identity():
    tape = ad.Tape()
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(tape.constant(np.eye(2)), tape.constant(m))
    np.testing.assert_array_equal(out.value, m)


def test_matmul_dot():
    tape = ad.Tape()
    out = ad.matmul(tape.constant([[1.0, 2.0]]), tape.constant([[3.0], [4.0]]))
    assert out.value.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    tape = ad.Tape()
    with pytest.raises(DimensionError):
        ad.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


def test_matmul_gradient_3x3():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    for g, fd in zip(grad_of(lambda x, y: ad.sum(ad.tanh(x @ y)), a, b), fd_of(lambda x, y: ad.sum(ad.tanh(x @ y)), a, b)):
        np.testing.assert_allclose(g, fd, atol=1e-6, rtol=0)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    tape = ad.Tape()
    np.testing.assert_allclose(ad.softmax(tape.constant([0.0, 0.0, 0.0])).value, [1 / 3] * 3, atol=1e-15)


def test_softmax_dominance():
    tape = ad.Tape()
    np.testing.assert_allclose(ad.softmax(tape.constant([1000.0, 0.0, 0.0])).value, [1, 0, 0], atol=1e-12)


def test_softmax_jacobian():
    z = np.array([1.0, 2.0, 3.0])
    for k in range(3):
        onehot = np.eye(3)[k]
        g = grad_of(lambda x: ad.sum(ad.mul(ad.softmax(x), onehot)), z)[0]
        fd = fd_of(lambda x: ad.sum(ad.mul(ad.softmax(x), onehot)), z)[0]
        np.testing.assert_allclose(g, fd, atol=1e-6, rtol=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(z):
    tape = ad.Tape()
    p = ad.softmax(tape.constant(z)).value
    assert (p > 0).all()
    assert abs(p.sum() - 1.0) <= 1e-12


def test_log_softmax_matches_log_of_softmax():
    tape = ad.Tape()
    z = tape.constant(np.array([[0.3, -1.2, 2.0], [5.0, 5.0, -5.0]]))
    np.testing.assert_allclose(ad.log_softmax(z).value, np.log(ad.softmax(z).value), atol=1e-14)


# ------------------------------------------------------------ elementwise


def test_cosine_examples():
    tape = ad.Tape()
    v = tape.constant([0.3, -2.0, 1.5])
    assert ad.cosine(v, v).value == pytest.approx(1.0, abs=1e-15)
    assert ad.cosine(v, ad.mul(v, 2.0)).value == pytest.approx(1.0, abs=1e-15)
    assert ad.cosine(tape.constant([1.0, 0.0]), tape.constant([0.0, 1.0])).value == 0.0


def test_cosine_zero_vector():
    tape = ad.Tape()
    with pytest.raises(DegenerateInputError):
        ad.cosine(tape.constant([0.0, 0.0]), tape.constant([1.0, 0.0]))


def test_log_domain():
    tape = ad.Tape()
    with pytest.raises(DomainError):
        ad.log(tape.constant([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(tape.constant([-1.0]))


def test_exp_overflow_is_a_domain_error():
    tape = ad.Tape()
    with pytest.raises(DomainError):
        ad.exp(tape.constant([800.0]))


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "log": lambda x: ad.log(ad.add(ad.mul(x, x), 0.5)),
    "softmax": ad.softmax,
    "log_softmax": ad.log_softmax,
    "l2_normalize": ad.l2_normalize,
    "relu": lambda x: ad.relu(ad.add(x, 0.05)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    """100 randomized trials per op at eps=1e-5, relative tolerance 1e-5."""
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    op = UNARY[name]
    for _ in range(100):
        x = rng.normal(size=(2, 3))
        if name == "relu":
            x = np.where(np.abs(x + 0.05) < 1e-3, 0.5, x)  # keep away from the kink
        w = rng.normal(size=(2, 3))
        assert_fd(lambda a: ad.sum(ad.mul(op(a), w)), x)


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "cosine": ad.cosine,
    "cosine_matrix": ad.cosine_matrix,
    "matmul_t": lambda a, b: ad.matmul(a, ad.transpose(b)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    op = BINARY[name]
    for _ in range(100):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert_fd(lambda x, y: ad.sum(ad.tanh(op(x, y))), a, b)


def test_broadcast_add_gradient():
    rng = np.random.default_rng(3)
    assert_fd(lambda x, b: ad.sum(ad.tanh(ad.add(x, b))), rng.normal(size=(4, 3)), rng.normal(size=(3,)))


def test_gather_and_reductions():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 5))
    idx = np.array([0, 4, 2, 2])
    assert_fd(lambda a: ad.sum(ad.tanh(ad.gather(a, idx))), x)
    assert_fd(lambda a: ad.mean(ad.tanh(ad.sum(a, axis=1))), x)
    v = rng.normal(size=6)
    assert_fd(lambda a: ad.sum(ad.tanh(ad.gather(a, np.array([1, 1, 3])))), v)


def test_linear_with_tiled_weights_gives_per_example_grads():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    tape = ad.Tape()
    wt = tape.param(np.broadcast_to(w, (3, 4, 2)).copy())
    out = ad.sum(ad.tanh(ad.linear(tape.constant(x), wt)))
    ad.backward(out)
    for i in range(3):
        gi = grad_of(lambda ww: ad.sum(ad.tanh(ad.linear(ww.tape.constant(x[i : i + 1]), ww))), w)[0]
        np.testing.assert_allclose(wt.grad[i], gi, atol=1e-13)


# ------------------------------------------------------------------ backward


def test_backward_sum_gives_ones():
    tape = ad.Tape()
    p = tape.param(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_needs_scalar_root():
    tape = ad.Tape()
    p = tape.param([1.0, 2.0])
    with pytest.raises(ContractError):
        ad.backward(ad.tanh(p))


def test_repeated_backward_is_identical():
    tape = ad.Tape()
    x = tape.param([0.2, -0.4])
    w = tape.param([[1.0, 2.0], [0.5, -1.0]])
    root = ad.sum(ad.tanh(ad.matmul(ad.reshape(x, (1, 2)), w)))
    ad.backward(root)
    first = (x.grad.copy(), w.grad.copy())
    ad.backward(root)
    np.testing.assert_array_equal(x.grad, first[0])
    np.testing.assert_array_equal(w.grad, first[1])


def test_composite_tanh_xw():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(1, 3)), rng.normal(size=(3, 2))
    for g, fd in zip(grad_of(lambda a, b: ad.sum(ad.tanh(a @ b)), x, w), fd_of(lambda a, b: ad.sum(ad.tanh(a @ b)), x, w)):
        np.testing.assert_allclose(g, fd, atol=1e-6, rtol=0)


def test_gradients_accumulate_over_reuse():
    tape = ad.Tape()
    x = tape.param(3.0)
    ad.backward(ad.add(ad.mul(x, x), x))
    assert x.grad == pytest.approx(7.0)


def test_tape_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        tape = ad.Tape()
        w = tape.param(rng.normal(size=(4, 4)))
        x = tape.constant(rng.normal(size=(2, 4)))
        out = ad.sum(ad.log_softmax(ad.tanh(ad.matmul(x, w))))
        ad.backward(out)
        return out.value.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_tape_is_topological():
    tape = ad.Tape()
    a = tape.param([1.0])
    b = ad.tanh(a)
    c = ad.add(a, b)
    for node in tape.nodes:
        for parent, _ in node.parents:
            assert parent.index < node.index
    assert c.index == len(tape) - 1


# ---------------------------------------------------------- straight-through


def test_straight_through_forward_exact_backward_identity():
    tape = ad.Tape()
    p = tape.param([0.2, 0.5, 0.3])
    st_ = ad.straight_through(np.array([0.0, 1.0, 0.0]), p)
    assert st_.value.tolist() == [0.0, 1.0, 0.0]
    ad.backward(ad.sum(ad.mul(st_, np.array([1.0, 2.0, 3.0]))))
    np.testing.assert_array_equal(p.grad, [1.0, 2.0, 3.0])


def test_detach_blocks_gradient():
    tape = ad.Tape()
    p = tape.param([1.0, 2.0])
    ad.backward(ad.sum(ad.add(p, ad.detach(p))))
    np.testing.assert_array_equal(p.grad, [1.0, 1.0])


# ---------------------------------------------------------------------- GRU


def _gru_weights(tape, rng, n_in, n_hid):
    shapes = {"w": (n_in, n_hid), "u": (n_hid, n_hid), "b": (n_hid,)}
    return {k: tape.param(rng.normal(scale=0.5, size=shapes[k[0]])) for k in ad.GRU_WEIGHTS}


@pytest.mark.parametrize("masked", [False, True])
def test_fused_gru_matches_reference(masked):
    rng = np.random.default_rng(8)
    mask = np.array([1.0, 0.0, 1.0]) if masked else None
    x0, h0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
    results = []
    for cell in (ad.gru_cell, ad.gru_cell_reference):
        tape = ad.Tape()
        w = _gru_weights(tape, np.random.default_rng(9), 4, 5)
        x, h = tape.param(x0), tape.param(h0)
        h1 = cell(x, h, w, mask)
        h2 = cell(x, h1, w, mask)
        ad.backward(ad.sum(ad.tanh(h2)))
        results.append((h2.value, x.grad, h.grad, {k: v.grad for k, v in w.items()}))
    (a, ax, ah, aw), (b, bx, bh, bw) = results
    np.testing.assert_allclose(a, b, atol=1e-13)
    np.testing.assert_allclose(ax, bx, atol=1e-12)
    np.testing.assert_allclose(ah, bh, atol=1e-12)
    for k in ad.GRU_WEIGHTS:
        np.testing.assert_allclose(aw[k], bw[k], atol=1e-12)


def test_fused_gru_finite_differences():
    rng = np.random.default_rng(10)
    x0, h0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    ws = {k: rng.normal(scale=0.5, size=(3, 4) if k[0] == "w" else (4, 4) if k[0] == "u" else (4,)) for k in ad.GRU_WEIGHTS}
    names = list(ad.GRU_WEIGHTS)

    def fn(x, h, *wv):
        return ad.sum(ad.tanh(ad.gru_cell(x, h, dict(zip(names, wv)))))

    assert_fd(fn, x0, h0, *[ws[k] for k in names])
