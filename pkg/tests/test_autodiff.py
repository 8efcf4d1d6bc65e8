import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geofield import autodiff as ad
from geofield.autodiff import Parameter, Tensor
from geofield.errors import ContractError, ShapeError

from helpers import assert_grads_close, central_difference


def rand(shape, seed, lo=-2.0, hi=2.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, shape)


class TestMatmul:
    def test_identity_case(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(ad.matmul(a, b).data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_dot_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_of_sum_against_frozen_value(self):
        # d sum(A @ B) / dA with B all-ones: row sums of B^T = [[2,2],[2,2]]
        a = Parameter("a", [[1.0, 2.0], [3.0, 4.0]])
        b = Tensor(np.ones((2, 2)))
        ad.matmul(a.tensor, b).sum().backward()
        assert np.allclose(a.grad, [[2.0, 2.0], [2.0, 2.0]])

    def test_gradient_matches_finite_differences(self):
        a = Parameter("a", rand((3, 4), 0))
        b = Parameter("b", rand((4, 2), 1))
        loss = (ad.matmul(a.tensor, b.tensor) ** 2).sum()
        loss.backward()

        def f():
            return float((ad.matmul(a.tensor, b.tensor) ** 2).sum().item())

        num_a, num_b = central_difference(f, [a.data, b.data])
        assert_grads_close(a.grad, num_a, label="matmul dA")
        assert_grads_close(b.grad, num_b, label="matmul dB")

    def test_batched_matmul_gradient(self):
        a = Parameter("a", rand((2, 3, 4), 2))
        b = Parameter("b", rand((2, 4, 3), 3))
        (ad.matmul(a.tensor, b.tensor) ** 2).sum().backward()

        def f():
            return (ad.matmul(a.tensor, b.tensor) ** 2).sum().item()

        num_a, num_b = central_difference(f, [a.data, b.data])
        assert_grads_close(a.grad, num_a, label="batched dA")
        assert_grads_close(b.grad, num_b, label="batched dB")


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_stabilized_against_overflow(self):
        out = ad.softmax(Tensor([1000.0, 1000.0]), axis=-1)
        assert np.allclose(out.data, [0.5, 0.5])
        assert np.isfinite(out.data).all()

    def test_closed_form_quarter(self):
        out = ad.softmax(Tensor([0.0, np.log(3.0)]), axis=-1)
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_rows_sum_to_one(self):
        x = Tensor(rand((5, 7), 4, lo=-30, hi=30))
        out = ad.softmax(x, axis=1)
        assert np.abs(out.data.sum(axis=1) - 1.0).max() <= 1e-12
        assert (out.data >= 0.0).all()

    def test_gradient(self):
        x = Parameter("x", rand((3, 5), 5))
        w = rand((3, 5), 6)
        (ad.softmax(x.tensor, axis=1) * Tensor(w)).sum().backward()

        def f():
            return (ad.softmax(x.tensor, axis=1) * Tensor(w)).sum().item()

        (num,) = central_difference(f, [x.data])
        assert_grads_close(x.grad, num, label="softmax")


class TestLayerNorm:
    def test_constant_vector_collapses_to_bias(self):
        out = ad.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_already_standardized(self):
        out = ad.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [1.0, -1.0], atol=1e-2)

    def test_gradient_on_random_vector(self):
        x = Parameter("x", rand((4,), 7))
        gain = Parameter("g", rand((4,), 8, lo=0.5, hi=1.5))
        bias = Parameter("b", rand((4,), 9))
        w = rand((4,), 10)
        (ad.layer_norm(x.tensor, gain.tensor, bias.tensor) * Tensor(w)).sum().backward()

        def f():
            return (ad.layer_norm(x.tensor, gain.tensor, bias.tensor) * Tensor(w)).sum().item()

        nx, ng, nb = central_difference(f, [x.data, gain.data, bias.data])
        assert_grads_close(x.grad, nx, rtol=1e-5, label="layer_norm dx")
        assert_grads_close(gain.grad, ng, rtol=1e-5, label="layer_norm dgain")
        assert_grads_close(bias.grad, nb, rtol=1e-5, label="layer_norm dbias")


class TestBackward:
    def test_sum_of_parameter_gives_ones(self):
        p = Parameter("p", rand((3, 2), 11))
        p.tensor.sum().backward()
        assert np.array_equal(p.grad, np.ones((3, 2)))

    def test_analytic_square_derivative(self):
        p = Parameter("p", [1.0, 2.0, 3.0])
        (p.tensor * p.tensor).sum().backward()
        assert np.allclose(p.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        p = Parameter("p", [1.0, 2.0])
        with pytest.raises(ContractError):
            (p.tensor * 2.0).backward()

    def test_unreachable_parameter_has_no_grad(self):
        p = Parameter("p", [1.0])
        q = Parameter("q", [1.0])
        p.tensor.sum().backward()
        assert p.grad is not None
        assert q.grad is None

    def test_diamond_graph_accumulates_once_per_path(self):
        # loss = x*x + x  => dloss/dx = 2x + 1
        p = Parameter("p", [3.0])
        x = p.tensor * 1.0
        loss = (x * x + x).sum()
        loss.backward()
        assert np.allclose(p.grad, [7.0])

    def test_backward_twice_with_zeroed_grads_is_deterministic(self):
        p = Parameter("p", rand((4,), 12))
        q = Parameter("q", rand((4,), 13))
        loss = (ad.gelu(p.tensor * q.tensor) ** 2).sum()
        loss.backward()
        first_p, first_q = p.grad.copy(), q.grad.copy()
        p.zero_grad()
        q.zero_grad()
        loss.backward()
        assert np.array_equal(p.grad, first_p)
        assert np.array_equal(q.grad, first_q)

    def test_leaf_grads_accumulate_across_backward_calls(self):
        p = Parameter("p", [1.0, 2.0])
        loss = p.tensor.sum()
        loss.backward()
        loss.backward()
        assert np.allclose(p.grad, [2.0, 2.0])


class TestStructuralOps:
    def test_concat_then_slice_is_identity(self):
        a = rand((3, 4), 14)
        b = rand((2, 4), 15)
        joined = ad.concat([Tensor(a), Tensor(b)], axis=0)
        back_a = ad.narrow(joined, 0, 0, 3)
        back_b = ad.narrow(joined, 0, 3, 2)
        assert np.array_equal(back_a.data, a)
        assert np.array_equal(back_b.data, b)

    def test_concat_gradient_splits(self):
        a = Parameter("a", rand((2, 3), 16))
        b = Parameter("b", rand((4, 3), 17))
        w = rand((6, 3), 18)
        (ad.concat([a.tensor, b.tensor], axis=0) * Tensor(w)).sum().backward()
        assert np.allclose(a.grad, w[:2])
        assert np.allclose(b.grad, w[2:])

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            ad.narrow(Tensor(np.zeros((3, 3))), 0, 2, 2)

    def test_gather_rows_forward_and_backward(self):
        table = Parameter("t", rand((5, 3), 19))
        idx = np.array([1, 1, 4, 0])
        out = ad.gather_rows(table.tensor, idx)
        assert np.array_equal(out.data, table.data[idx])
        out.sum().backward()
        expected = np.zeros((5, 3))
        np.add.at(expected, idx, 1.0)
        assert np.array_equal(table.grad, expected)

    def test_reshape_transpose_roundtrip_gradient(self):
        p = Parameter("p", rand((2, 6), 20))
        out = ad.transpose(ad.reshape(p.tensor, (3, 4)), (1, 0))
        (out ** 2).sum().backward()
        assert_grads_close(p.grad, 2.0 * p.data, rtol=1e-12, label="reshape/transpose")

    def test_trailing_broadcast_bias(self):
        x = Parameter("x", rand((4, 3), 21))
        b = Parameter("b", rand((3,), 22))
        ((x.tensor + b.tensor) ** 2).sum().backward()

        def f():
            return ((x.tensor + b.tensor) ** 2).sum().item()

        nx, nb = central_difference(f, [x.data, b.data])
        assert_grads_close(x.grad, nx, label="bias dx")
        assert_grads_close(b.grad, nb, label="bias db")

    def test_disallowed_broadcast_raises(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4,))))


@pytest.mark.parametrize(
    "name,fn",
    [
        ("add", lambda x, y: x + y),
        ("sub", lambda x, y: x - y),
        ("mul", lambda x, y: x * y),
        ("div", lambda x, y: x / (y + 3.0)),
        ("gelu", lambda x, y: ad.gelu(x * y)),
        ("relu", lambda x, y: ad.relu(x - y)),
        ("exp", lambda x, y: ad.exp(x * 0.3 + y * 0.1)),
        ("abs", lambda x, y: ad.absolute(x * y + 0.7)),
        ("pow", lambda x, y: (x + 3.0) ** 1.5 + y * y),
        ("mean", lambda x, y: (x * y).mean(axis=0).reshape((1, 4))),
        ("softmax", lambda x, y: ad.softmax(x + y, axis=-1)),
    ],
)
def test_elementwise_gradients_match_finite_differences(name, fn):
    x = Parameter("x", rand((3, 4), hash(name) % 1000))
    y = Parameter("y", rand((3, 4), hash(name) % 1000 + 1))
    w = rand(fn(x.tensor, y.tensor).shape, 99)
    (fn(x.tensor, y.tensor) * Tensor(w)).sum().backward()

    def f():
        return (fn(x.tensor, y.tensor) * Tensor(w)).sum().item()

    nx, ny = central_difference(f, [x.data, y.data])
    assert_grads_close(x.grad, nx, label=f"{name} dx")
    assert_grads_close(y.grad, ny, label=f"{name} dy")


class TestNoGrad:
    def test_no_graph_built(self):
        p = Parameter("p", [1.0, 2.0])
        with ad.no_grad():
            out = (p.tensor * 2.0).sum()
        assert out._parents == ()
        assert not out.requires_grad

    def test_flag_restored_after_block(self):
        assert ad.grad_enabled()
        with ad.no_grad():
            assert not ad.grad_enabled()
        assert ad.grad_enabled()


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8),
)
def test_softmax_simplex_property(values):
    out = ad.softmax(Tensor(np.array(values)), axis=-1).data
    assert (out >= 0.0).all()
    assert abs(out.sum() - 1.0) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5), st.integers(0, 2**31))
def test_concat_slice_identity_property(n_a, n_b, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_a, 3))
    b = rng.normal(size=(n_b, 3))
    joined = ad.concat([Tensor(a), Tensor(b)], axis=0)
    assert np.array_equal(ad.narrow(joined, 0, 0, n_a).data, a)
    assert np.array_equal(ad.narrow(joined, 0, n_a, n_b).data, b)
