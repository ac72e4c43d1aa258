import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorgk import diff
from anchorgk.diff import ShapeError, Tape, tensor


def leaf(value):
    return tensor(np.asarray(value, dtype=float), requires_grad=True)


def test_forward_basics():
    x = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(diff.matmul(np.eye(3), x).value, x)
    np.testing.assert_allclose(diff.softmax_rows(np.zeros((2, 4))).value, 0.25)
    assert diff.relu(np.array([-2.0, 3.0])).value.tolist() == [0.0, 3.0]


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        diff.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        diff.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        diff.reshape(np.ones((2, 3)), (4, 2))
    with pytest.raises(ShapeError):
        diff.concat_cols([np.ones((2, 1)), np.ones((3, 1))])


def test_row_and_column_broadcasting():
    a = leaf(np.ones((3, 4)))
    row = leaf(np.arange(4.0).reshape(1, 4))
    col = leaf(np.arange(3.0).reshape(3, 1))
    with Tape() as tape:
        loss = diff.sum(a * row + col)
    tape.backward(loss)
    np.testing.assert_allclose(row.grad, np.full((1, 4), 3.0))
    np.testing.assert_allclose(col.grad, np.full((3, 1), 4.0))
    np.testing.assert_allclose(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_sum_gradient_is_ones():
    w = leaf(np.random.default_rng(0).normal(size=(3, 2)))
    with Tape() as tape:
        loss = diff.sum(w)
    tape.backward(loss)
    assert np.array_equal(w.grad, np.ones((3, 2)))


def test_mean_square_gradient():
    rng = np.random.default_rng(1)
    w = leaf(rng.normal(size=(4, 3)))
    t = rng.normal(size=(4, 3))
    with Tape() as tape:
        loss = diff.mean(diff.square(w - t))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, 2 * (w.value - t) / 12, rtol=1e-14)


def test_non_scalar_loss():
    with pytest.raises(ValueError):
        diff.backward(leaf(np.ones((2, 2))))


def test_constants_get_no_gradient():
    w = leaf([[1.0, 2.0]])
    c = tensor(np.array([[3.0, 4.0]]))
    with Tape() as tape:
        loss = diff.sum(w * c)
    tape.backward(loss)
    assert c.grad is None
    assert w.grad.tolist() == [[3.0, 4.0]]


def test_accumulation_and_zeroing():
    w = leaf([[1.0, -2.0]])

    def run():
        with Tape() as tape:
            loss = diff.sum(diff.square(w))
        tape.backward(loss)

    run()
    first = w.grad.copy()
    run()
    np.testing.assert_allclose(w.grad, 2 * first)
    w.zero_grad()
    run()
    np.testing.assert_allclose(w.grad, first)


def test_tape_and_topological_order_agree():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 1)))
    with Tape() as tape:
        h = diff.sigmoid(a @ b)
        loss = diff.sum(h * h + diff.relu(a @ h))
    tape.backward(loss)
    ga, gb = a.grad.copy(), b.grad.copy()
    a.zero_grad()
    b.zero_grad()
    diff.backward(loss)
    np.testing.assert_allclose(a.grad, ga, rtol=1e-14)
    np.testing.assert_allclose(b.grad, gb, rtol=1e-14)
    # every node's parents that are non-leaves precede it on the tape
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        assert all(pos[id(p)] < i for p in node.parents if id(p) in pos)


def test_grad_check_quadratic_and_sigmoid_chain():
    x = leaf([[0.7]])
    report = diff.grad_check(lambda v: diff.sum(diff.square(v) * 3.0 + v), [x], tol=1e-8)
    assert report["passed"] and report["max_rel_error"][0] < 1e-8
    y = leaf(np.random.default_rng(3).uniform(-2, 2, (2, 3)))
    report = diff.grad_check(lambda v: diff.sum(diff.sigmoid(diff.sigmoid(diff.sigmoid(v)))), [y])
    assert report["passed"]
    with pytest.raises(ValueError):
        diff.grad_check(lambda v: diff.sum(v), [y], step=0)


def test_grad_check_detects_wrong_rule():
    def bad_square(a):
        return diff.make_node(a.value**2, (a,), lambda g: (g * a.value,), "bad")

    report = diff.grad_check(lambda v: diff.sum(bad_square(v)), [leaf([[1.5, -0.5]])])
    assert not report["passed"]


def test_softmax_rows_sum_to_one():
    s = diff.softmax_rows(np.random.default_rng(4).normal(scale=30, size=(5, 7))).value
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


OPS = {
    "add": lambda a, b: diff.add(a, b),
    "sub": lambda a, b: diff.sub(a, b),
    "mul": lambda a, b: diff.mul(a, b),
    "matmul": lambda a, b: diff.matmul(a, diff.transpose(b)),
    "scale": lambda a, b: diff.scale(a, -1.7) + b,
    "relu": lambda a, b: diff.relu(a) * b,
    "sigmoid": lambda a, b: diff.sigmoid(a) * b,
    "softmax": lambda a, b: diff.softmax_rows(a) * b,
    "reshape": lambda a, b: diff.reshape(a, (a.shape[1], a.shape[0])) @ b,
    "concat": lambda a, b: diff.concat_cols([a, b]),
    "stack": lambda a, b: diff.stack_rows([a, b]),
    "square": lambda a, b: diff.square(a - b),
    "sqrt": lambda a, b: diff.sqrt(diff.square(a) + 1.0) * b,
    "abs": lambda a, b: diff.abs(a) * b,
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.uniform(-2, 2, (3, 4)))
    b = leaf(rng.uniform(-2, 2, (3, 4)))
    if name in ("relu", "abs") and np.min(np.abs(a.value)) < 1e-3:
        return  # too close to the kink for a central difference
    weights = rng.normal(size=(64,))

    def f(x, y):
        out = OPS[name](x, y)
        w = tensor(weights[: out.size].reshape(out.shape))
        return diff.sum(out * w)

    report = diff.grad_check(f, [a, b])
    assert report["passed"], report


def test_mean_and_sum_gradients_fd():
    a = leaf(np.random.default_rng(5).uniform(-2, 2, (2, 5)))
    assert diff.grad_check(lambda v: diff.mean(diff.square(v)) + diff.sum(v), [a])["passed"]
