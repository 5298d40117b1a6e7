import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from higmae import tensor as T
from higmae.errors import ContractError, DimensionError, NumericError
from higmae.tensor import Tape, Tensor, backward

from conftest import central_difference, relative_error


def grad_of(fn, *arrays):
    """Autodiff gradients of scalar ``fn(*tensors)`` w.r.t. each array."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    backward(out, tape)
    return [t.grad for t in ts]


def fd_of(fn, *arrays, h=1e-6):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        def f():
            return fn(*[Tensor(x) for x in arrays]).item()
        grads.append(central_difference(f, a, h))
    return grads


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.values, [[1, 2], [3, 4]])

    def test_projector(self):
        out = T.matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5], [7]]))
        np.testing.assert_array_equal(out.values, [[5], [0]])

    def test_gradient_matches_finite_differences(self, float64):
        a, b = np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])
        fn = lambda x, y: T.sum_(T.matmul(x, y))  # noqa: E731
        (ga, gb) = grad_of(fn, a, b)
        fa, fb = fd_of(fn, a, b, h=1e-5)
        np.testing.assert_allclose(ga, [[3, 4]], atol=1e-9)
        np.testing.assert_allclose(ga, fa, atol=1e-8)
        np.testing.assert_allclose(gb, fb, atol=1e-8)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).values, [[0.5, 0.5]])

    def test_large_logits_are_stable(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[1000.0, 1000.0]])).values, [[0.5, 0.5]])

    def test_log3(self, float64):
        out = T.softmax_rows(Tensor([[0.0, math.log(3.0)]])).values
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.softmax_rows(Tensor([[np.nan, 0.0]]))

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                      elements=st.floats(-1e6, 1e6)))
    def test_rows_sum_to_one(self, x):
        with T.precision("float64"):
            y = T.softmax_rows(Tensor(x)).values
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


class TestSce:
    def test_identical_rows_zero(self):
        x = Tensor([[1.0, 2.0], [-3.0, 0.5]])
        assert T.sce_loss(x, x, 2.0).item() == pytest.approx(0.0, abs=1e-6)

    def test_antipodal_is_two(self):
        x = np.array([[1.0, 2.0], [-3.0, 0.5]])
        assert T.sce_loss(Tensor(-x), Tensor(x), 1.0).item() == pytest.approx(2.0, abs=1e-6)

    def test_orthogonal_gamma_two(self):
        assert T.sce_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), 2.0).item() == pytest.approx(1.0)

    def test_zero_target_row_warns(self, caplog):
        out = T.sce_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 0.0]]), 2.0)
        assert np.isfinite(out.item())
        assert "all-zero target" in caplog.text

    @pytest.mark.parametrize("gamma", [1.0, 2.0, 3.0])
    def test_gradient(self, float64, gamma):
        rng = np.random.default_rng(0)
        xh, x = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        fn = lambda a, b: T.sce_loss(a, b, gamma)  # noqa: E731
        ga, gb = grad_of(fn, xh, x)
        fa, fb = fd_of(fn, xh, x)
        assert relative_error(ga, fa) < 1e-6
        assert relative_error(gb, fb) < 1e-6

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
           hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
    def test_range(self, a, b):
        with T.precision("float64"):
            v = T.sce_loss(Tensor(a), Tensor(b), 2.0).item()
        assert -1e-12 <= v <= 4.0 + 1e-12


class TestBackward:
    def test_sum(self):
        (g,) = grad_of(lambda x: T.sum_(x), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(g, [1, 1, 1])

    def test_square(self):
        (g,) = grad_of(lambda x: T.sum_(x * x), np.array([2.0]))
        np.testing.assert_array_equal(g, [4])

    def test_fan_out_accumulates(self):
        (g,) = grad_of(lambda x: T.sum_(x + x + x), np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(g, [[3, 3]])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_loss_from_other_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            y = T.sum_(x)
        with pytest.raises(ContractError):
            backward(y, Tape())

    def test_no_recording_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        assert not T.sum_(x).requires_grad

    def test_tape_records_in_order(self):
        x = Tensor([[1.0]], requires_grad=True)
        with Tape() as tape:
            y = x * x
            z = T.sum_(y)
        assert [r.output for r in tape.records] == [y, z]
        assert y.node_id < z.node_id

    def test_replay_deterministic(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        outs = [T.sum_(T.softmax_rows(T.matmul(Tensor(a), Tensor(b)))).values.tobytes() for _ in range(3)]
        assert len(set(outs)) == 1

    def test_tapes_are_thread_local(self):
        seen = {}

        def worker():
            seen["tape"] = T.active_tape()

        with Tape():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["tape"] is None


OPS = {
    "add": (lambda a, b: T.sum_(T.mul(T.add(a, b), T.add(a, b))), [(3, 2), (3, 2)]),
    "mul": (lambda a, b: T.sum_(T.mul(a, b)), [(3, 2), (3, 2)]),
    "add_bias": (lambda a, b: T.sum_(T.mul(T.add_bias(a, b), T.add_bias(a, b))), [(3, 2), (2,)]),
    "transpose": (lambda a, b: T.sum_(T.matmul(T.transpose(a), b)), [(3, 2), (3, 4)]),
    "prelu": (lambda a, b: T.sum_(T.mul(T.prelu(a, b), T.prelu(a, b))), [(4, 3), (1,)]),
    "layer_norm": (lambda a, g, b: T.sum_(T.mul(T.layer_norm(a, g, b), T.layer_norm(a, g, b) * 0.3 + a)),
                   [(3, 4), (4,), (4,)]),
    "gather": (lambda a: T.sum_(T.mul(T.gather_rows(a, [2, 0, 2]), T.gather_rows(a, [1, 1, 0]))), [(3, 2)]),
    "scatter": (lambda a, s: T.sum_(T.mul(T.scatter_add_rows(a, [0, 2, 0], s), T.scatter_add_rows(a, [0, 2, 0], s))),
                [(3, 2), (3, 2)]),
    "mean_rows": (lambda a: T.sum_(T.mul(T.mean(a, axis=0), T.mean(a, axis=0))), [(4, 3)]),
    "mean_all": (lambda a: T.mul(T.mean(a), T.mean(a)), [(4, 3)]),
    "sum_axis": (lambda a: T.sum_(T.mul(T.sum_(a, axis=1), T.sum_(a, axis=1))), [(4, 3)]),
    "concat0": (lambda a, b: T.sum_(T.mul(T.concat([a, b], 0), T.concat([b, a], 0))), [(2, 3), (2, 3)]),
    "concat1": (lambda a, b: T.sum_(T.mul(T.concat([a, b], 1), T.concat([a, b], 1))), [(2, 3), (2, 1)]),
    "cosine": (lambda a, b: T.sum_(T.mul(T.cosine_similarity(a, b), T.cosine_similarity(a, b))), [(3, 4), (3, 4)]),
    "softmax": (lambda a, b: T.sum_(T.mul(T.softmax_rows(a), b)), [(3, 4), (3, 4)]),
    "scalar_mul": (lambda a: T.sum_(T.mul(T.mul(a, 2.5), a)), [(2, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_op_gradients_match_finite_differences(name, seed):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    if name == "prelu":
        arrays[0][np.abs(arrays[0]) < 1e-3] = 0.5  # keep away from the kink
    with T.precision("float64"):
        auto = grad_of(fn, *arrays)
        numeric = fd_of(fn, *arrays)
    for ga, gn in zip(auto, numeric):
        assert relative_error(ga, gn) < 1e-5


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = Tensor([1.0, -2.0])
        state = T.AdamState(lr=0.1)
        T.adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.values, [1.0, -2.0])

    def test_first_step_is_minus_lr(self, float64):
        p = Tensor([0.0])
        T.adam_step([p], [np.array([1.0])], T.AdamState(lr=0.1))
        assert p.values[0] == pytest.approx(-0.1, abs=1e-6)

    def test_moment_decay(self, float64):
        state = T.AdamState(lr=0.01)
        p = Tensor([0.0])
        T.adam_step([p], [np.array([2.0])], state)
        m1, v1 = state.m[0].copy(), state.v[0].copy()
        T.adam_step([p], [np.array([0.0])], state)
        T.adam_step([p], [np.array([0.0])], state)
        np.testing.assert_allclose(state.m[0], m1 * 0.9**2)
        np.testing.assert_allclose(state.v[0], v1 * 0.999**2)
        np.testing.assert_allclose(m1, [0.2])
        np.testing.assert_allclose(v1, [0.004])
        assert state.step == 3

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.adam_step([Tensor([0.0, 1.0])], [np.zeros(3)], T.AdamState())

    def test_optimizer_minimises_quadratic(self, float64):
        w = Tensor([3.0, -2.0], requires_grad=True)
        opt = T.Adam([w], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            with Tape() as tape:
                loss = T.sum_(w * w)
            backward(loss, tape)
            opt.step()
        assert np.abs(w.values).max() < 1e-2


def test_precision_context_restores():
    before = T.get_dtype()
    with T.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_dtype() is before
    assert Tensor([1.0]).dtype == np.float32
