import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gammt import autodiff as ad
from gammt.errors import ContractViolation, NumericError, ShapeError

from oracles import central_diff, rel_err

rng = np.random.default_rng(20240601)


def test_product_rule_example():
    tape = ad.Tape()
    x = tape.leaf([[2.0]])
    y = tape.leaf([[3.0]])
    grads = ad.backward(ad.mul(x, y))
    assert grads[x.node].data[0, 0] == 3.0
    assert grads[y.node].data[0, 0] == 2.0


def test_matmul_identity():
    A = rng.normal(size=(3, 4))
    out = ad.matmul(np.eye(3), A)
    np.testing.assert_array_equal(out.data, A)


def test_uniform_softmax():
    out = ad.row_softmax([[0.0, 0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(out.data, [[0.25] * 4])


def test_layer_norm_constant_column_gives_offset():
    offset = np.array([0.3, -1.0, 2.0])
    out = ad.layer_norm(np.full((3, 1), 7.5), np.array([1.5, 2.0, -0.5]), offset)
    np.testing.assert_allclose(out.data[:, 0], offset, atol=1e-12)


def test_unused_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=(2, 3)))
    unused = tape.leaf(rng.normal(size=(4, 5)))
    grads = tape.backward(ad.total(ad.mul(x, x)))
    assert grads[unused.node].shape == (4, 5)
    assert not grads[unused.node].data.any()


def test_nll_of_softmax_matches_finite_differences():
    z = rng.normal(size=(1, 5))
    k = 3

    def f(tape=None):
        zt = tape.leaf(z) if tape else ad.Tensor(z)
        return ad.scale(ad.log(ad.index(ad.row_softmax(zt), [0], [k])), -1.0), zt

    tape = ad.Tape()
    loss, zt = f(tape)
    analytic = tape.backward(loss)[zt.node].data
    (numeric,) = central_diff(lambda: f()[0].item(), [z])
    assert rel_err(analytic, numeric).max() < 1e-6


def _weighted(out, W):
    return ad.total(ad.mul(out, W))


# (name, builder(tensors) -> Tensor, input arrays)
PRIMITIVE_CASES = [
    ("matmul", lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    ("add", lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: ad.add(a, b), [(3, 4), (3, 1)]),
    ("mul", lambda a, b: ad.mul(a, b), [(2, 5), (2, 5)]),
    ("scale", lambda a: ad.scale(a, -1.7), [(3, 3)]),
    ("transpose", lambda a: ad.transpose(a), [(2, 5)]),
    ("row_softmax", lambda a: ad.row_softmax(a), [(3, 5)]),
    ("row_softmax_causal", lambda a: ad.row_softmax(a, causal=True), [(4, 4)]),
    ("gelu", lambda a: ad.gelu(a), [(3, 4)]),
    ("relu", lambda a: ad.relu(a), [(3, 4)]),
    ("layer_norm", lambda x, g, b: ad.layer_norm(x, g, b), [(6, 3), (6,), (6,)]),
    ("embedding_lookup", lambda w: ad.embedding_lookup(w, [2, 0, 2, 1]), [(4, 3)]),
    ("concat_columns", lambda a, b: ad.concat_columns(a, b), [(3, 2), (3, 4)]),
    ("index", lambda a: ad.index(a, [0, 2, 2], [1, 0, 1]), [(3, 2)]),
]


@pytest.mark.parametrize("name,build,shapes", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
@pytest.mark.parametrize("trial", range(3))
def test_primitive_gradients(name, build, shapes, trial):
    inputs = [rng.normal(size=s) for s in shapes]
    if name == "relu":
        # keep clear of the kink
        inputs[0] = np.where(np.abs(inputs[0]) < 0.1, 0.5, inputs[0])
    out_shape = build(*inputs).shape
    W = rng.normal(size=out_shape)

    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in inputs]
    grads = tape.backward(_weighted(build(*leaves), W))
    numeric = central_diff(lambda: _weighted(build(*inputs), W).item(), inputs)
    for leaf, num in zip(leaves, numeric):
        assert rel_err(grads[leaf.node].data, num).max() < 1e-6


def test_log_gradient():
    x = rng.uniform(0.5, 2.0, size=(2, 3))
    W = rng.normal(size=(2, 3))
    tape = ad.Tape()
    leaf = tape.leaf(x)
    g = tape.backward(_weighted(ad.log(leaf), W))[leaf.node].data
    (num,) = central_diff(lambda: _weighted(ad.log(x), W).item(), [x])
    assert rel_err(g, num).max() < 1e-6


def test_log_floor_clamps_value_and_gradient():
    tape = ad.Tape()
    x = tape.leaf([0.0, 1e-15, 0.5])
    y = ad.log(x, floor=1e-12)
    np.testing.assert_allclose(y.data, [np.log(1e-12), np.log(1e-12), np.log(0.5)])
    g = tape.backward(ad.total(y))[x.node].data
    np.testing.assert_array_equal(g, [0.0, 0.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(z, c):
    a = ad.row_softmax(z).data
    b = ad.row_softmax(z + c).data
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.all(a >= 0)
    assert np.max(np.abs(a.sum(axis=1) - 1.0)) <= 1e-12


def test_causal_softmax_masks_exactly():
    y = ad.row_softmax(rng.normal(size=(5, 5)), causal=True).data
    assert not np.triu(y, 1).any()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_backward_is_deterministic():
    A = rng.normal(size=(4, 4))
    tape = ad.Tape()
    a = tape.leaf(A)
    h = ad.gelu(ad.matmul(a, a))
    loss = ad.total(ad.log(ad.row_softmax(ad.add(h, a))))
    first = tape.backward(loss)[a.node].data
    second = tape.backward(loss)[a.node].data
    assert first.tobytes() == second.tobytes()


def test_fan_out_accumulates():
    tape = ad.Tape()
    x = tape.leaf([1.5, -2.0])
    loss = ad.total(ad.add(ad.mul(x, x), ad.scale(x, 3.0)))
    np.testing.assert_allclose(tape.backward(loss)[x.node].data, [6.0, -1.0])


def test_tape_order_is_topological():
    tape = ad.Tape()
    a = tape.leaf(rng.normal(size=(2, 2)))
    ad.total(ad.matmul(a, ad.transpose(a)))
    for node, rec in enumerate(tape.records):
        assert all(i is None or i < node for i in rec.inputs)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ContractViolation):
        tape.backward(ad.scale(x, 2.0))


def test_non_finite_is_an_error():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        ad.scale([1e308], 10.0)
    with pytest.raises(NumericError):
        ad.log([0.0, 1.0])


def test_mixing_tapes_rejected():
    a = ad.Tape().leaf([[1.0]])
    b = ad.Tape().leaf([[1.0]])
    with pytest.raises(ContractViolation):
        ad.add(a, b)


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("relu_or_gelu", np.array([[-1.0, 2.0]]), kind="relu")
    np.testing.assert_array_equal(out.data, [[0.0, 2.0]])
    with pytest.raises(ContractViolation):
        ad.apply_primitive("conv2d", np.zeros((1, 1)))
