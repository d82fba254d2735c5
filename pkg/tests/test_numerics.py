import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fd import numeric_grad, rel_error
from mvcc import numerics as N
from mvcc.errors import ContractError, DimensionError, TrainingError, VersionError
from mvcc.numerics import AdamState, Tape, Tensor, adam_step, backward, parameter


def grad_check(fn, *arrays, seed=0, eps=1e-5):
    """Compare tape gradients of sum(fn(*x) * R) against central differences."""
    params = [parameter(a) for a in arrays]
    with Tape() as tape:
        out = fn(*params)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    with Tape() as tape:
        loss = N.sum_(N.mul(fn(*params), weights))
    backward(loss, tape)
    errs = []
    for p in params:
        num = numeric_grad(lambda: float((fn(*params).data * weights).sum()), p.data, eps)
        errs.append(rel_error(p.grad, num))
    return max(errs)


class TestMatmul:
    def test_identity(self):
        out = N.matmul(np.eye(2), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projection(self):
        out = N.matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            N.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        assert grad_check(N.matmul, rng.standard_normal((3, 4)), rng.standard_normal((4, 2))) < 1e-6

    def test_batched_gradient(self, rng):
        assert grad_check(N.matmul, rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))) < 1e-6
        assert grad_check(N.matmul, rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(N.softmax(Tensor([0.0, 0, 0, 0])).data, [0.25] * 4, rtol=0, atol=1e-15)

    def test_stable(self):
        out = N.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    def test_known_values(self):
        # exp(k) / (e + e^2 + e^3) evaluated with math.fsum
        z = math.fsum(math.exp(k) for k in (1, 2, 3))
        expected = [math.exp(k) / z for k in (1, 2, 3)]
        np.testing.assert_allclose(N.softmax(Tensor([1.0, 2, 3])).data, expected, rtol=1e-14)
        np.testing.assert_allclose(expected, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        p = N.softmax(Tensor(x)).data
        assert np.all(np.abs(p.sum(-1) - 1) <= 1e-12)
        assert np.all((p >= 0) & (p <= 1))

    def test_masked_positions_get_zero(self):
        mask = np.array([True, False, True])
        p = N.softmax(Tensor([1.0, 50.0, 2.0]), mask).data
        assert p[1] == 0.0 and p.sum() == pytest.approx(1.0)

    def test_gradient(self, rng):
        assert grad_check(N.softmax, rng.standard_normal((4, 5))) < 1e-6
        causal = np.tril(np.ones((5, 5), dtype=bool))
        assert grad_check(lambda x: N.softmax(x, causal), rng.standard_normal((2, 5, 5))) < 1e-6


class TestLayerNorm:
    def test_constant_vector(self):
        out = N.layer_norm(Tensor(np.full(5, 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_two_points(self):
        out = N.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)
        np.testing.assert_array_equal(out.data, [-1.0, 1.0])

    def test_gradient(self, rng):
        err = grad_check(
            lambda x, g, b: N.layer_norm(x, g, b, 1e-5),
            rng.standard_normal((4, 8)),
            rng.standard_normal(8),
            rng.standard_normal(8),
        )
        assert err < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_and_shape_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4))
    y = rng.standard_normal((3, 4))
    ids = rng.integers(0, 5, (2, 3))
    idx = rng.integers(0, 3, (2, 2))
    checks = {
        "add_broadcast": grad_check(N.add, x, y),
        "mul_broadcast": grad_check(N.mul, x, y),
        "gelu": grad_check(N.gelu, x),
        "reshape": grad_check(lambda a: N.reshape(a, (6, 4)), x),
        "transpose": grad_check(lambda a: N.transpose(a, (2, 0, 1)), x),
        "getitem": grad_check(lambda a: a[:, 1:, ::2], x),
        "concat": grad_check(lambda a, b: N.concat([a, b], 1), x, x[:, :2]),
        "keep": grad_check(lambda a: N.keep(a, np.array([True, False, True])[:, None]), x),
        "gather_rows": grad_check(lambda a: N.gather_rows(a, idx), x),
        "embedding": grad_check(lambda t: N.embedding(t, ids), rng.standard_normal((5, 4))),
        "mean": grad_check(lambda a: N.mean(a, axis=1), x),
        "sub_neg": grad_check(lambda a, b: a - b, x, y),
    }
    bad = {k: v for k, v in checks.items() if not v < 1e-6}
    assert not bad


def test_cross_entropy_gradient(rng):
    targets = np.array([[1, 3, 0], [2, 0, 0]])
    fn = lambda z: N.cross_entropy(z, targets, ignore_index=0)  # noqa: E731
    z = parameter(rng.standard_normal((2, 3, 5)))
    with Tape() as tape:
        loss = fn(z)
    backward(loss, tape)
    num = numeric_grad(lambda: fn(z).item(), z.data)
    assert rel_error(z.grad, num) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self, rng):
        w = parameter(rng.standard_normal((3, 2)))
        with Tape() as tape:
            loss = w.sum()
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, np.ones((3, 2)))

    def test_quadratic(self):
        w = parameter([1.0, 2.0, 3.0])
        with Tape() as tape:
            loss = (w * w).sum() * 0.5
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, [1.0, 2.0, 3.0])

    def test_non_scalar_rejected(self):
        w = parameter([1.0, 2.0])
        with Tape() as tape:
            y = w * 2.0
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_loss_from_other_tape_rejected(self):
        w = parameter([1.0, 2.0])
        with Tape():
            loss = w.sum()
        with pytest.raises(ContractError):
            backward(loss, Tape())

    def test_unreachable_leaf_zeroed(self):
        a, b = parameter([1.0, 2.0]), parameter([3.0])
        b.grad[:] = 7.0
        with Tape() as tape:
            loss = a.sum()
            _ = b * 2.0
        backward(loss, tape)
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_reused_tensor_accumulates(self):
        w = parameter([2.0])
        with Tape() as tape:
            loss = (w * w * w).sum()
        backward(loss, tape)
        assert w.grad[0] == pytest.approx(12.0)

    def test_no_tape_no_graph(self):
        w = parameter([1.0])
        y = w * 3.0
        assert y.is_leaf and not y.requires_grad

    def test_deterministic(self, rng):
        x = rng.standard_normal((4, 6))
        grads = []
        for _ in range(2):
            w = parameter(x.copy())
            with Tape() as tape:
                loss = N.softmax(N.gelu(w @ w.transpose())).sum() + N.layer_norm(w, Tensor(np.ones(6)), Tensor(np.zeros(6))).mean()
            backward(loss, tape)
            grads.append(w.grad.copy())
        assert grads[0].tobytes() == grads[1].tobytes()


class TestAdam:
    def test_zero_grad_is_noop(self, rng):
        w = parameter(rng.standard_normal(4))
        before = w.data.copy()
        st = AdamState()
        adam_step({"w": w}, {"w": np.zeros(4)}, st)
        np.testing.assert_array_equal(w.data, before)
        np.testing.assert_array_equal(st.m["w"], 0)
        np.testing.assert_array_equal(st.v["w"], 0)
        assert st.step == 1

    def test_first_step_is_lr_times_sign(self):
        w = parameter(np.zeros(4))
        g = np.array([0.3, -2.0, 1e-3, -50.0])
        adam_step({"w": w}, {"w": g}, AdamState(lr=0.01))
        np.testing.assert_allclose(w.data, -0.01 * np.sign(g), rtol=1e-4)

    def test_converges_on_quadratic(self, rng):
        target = rng.standard_normal(5)
        w = parameter(np.zeros(5))
        st = AdamState(lr=0.05)
        for _ in range(200):
            adam_step({"w": w}, {"w": 2 * (w.data - target)}, st)
        assert np.linalg.norm(w.data - target) < 1e-3
        assert st.step == 200

    def test_nan_names_parameter(self):
        w = parameter(np.zeros(2))
        with pytest.raises(TrainingError, match="'proj.W'"):
            adam_step({"proj.W": w}, {"proj.W": np.array([np.nan, 0.0])}, AdamState())
        np.testing.assert_array_equal(w.data, 0.0)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path, rng):
        tensors = {
            "a": rng.standard_normal((3, 4)),
            "scalar": np.array(2.5),
            "ünï": np.array([np.pi, -0.0, 1e-300, np.finfo(float).max]),
            "deep": rng.standard_normal((2, 1, 3, 2)),
        }
        path = tmp_path / "x.ckpt"
        N.save_checkpoint(path, tensors)
        back = N.load_checkpoint(path)
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].shape == tensors[k].shape
            assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "x.ckpt"
        N.save_checkpoint(path, {"w": np.array([[1.0, 2.0]])})
        raw = path.read_bytes()
        assert raw[:4] == b"MVCC"
        assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert raw[12:14] == (1).to_bytes(2, "little") and raw[14:15] == b"w"
        assert raw[15] == 2
        assert raw[16:32] == (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
        assert np.frombuffer(raw[32:], "<f8").tolist() == [1.0, 2.0]

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(VersionError):
            N.load_checkpoint(path)
        path.write_bytes(b"MVCC" + (9).to_bytes(4, "little") + bytes(4))
        with pytest.raises(VersionError):
            N.load_checkpoint(path)
