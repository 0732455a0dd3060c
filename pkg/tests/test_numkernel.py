import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spm import numkernel as nk
from spm.numkernel import Tensor
from spm.numkernel.checkpoint import dumps, loads


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ m).data, m.data)

    def test_hand_product(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_one_by_one(self):
        assert (Tensor([[2.0]]) @ Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_batched_gradient(self, seed):
        rng = np.random.default_rng(seed)
        a, b, w = param(rng, 2, 3, 4), param(rng, 4, 5), rng.normal(size=(2, 3, 5))
        assert nk.grad_check(lambda: ((a @ b) * w).sum(), [a, b]) < 1e-7


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(nk.row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_known_row(self):
        np.testing.assert_allclose(nk.row_softmax(Tensor([[1.0, 0.0]])).data, [[0.73106, 0.26894]], atol=1e-4)

    def test_single_element(self):
        assert nk.row_softmax(Tensor([[42.0]])).data.tolist() == [[1.0]]

    def test_large_values_stable(self):
        p = nk.row_softmax(Tensor([[1000.0, 0.0, -1000.0]])).data
        assert np.isfinite(p).all() and p[0, 0] == pytest.approx(1.0)

    def test_mask_excludes_exactly(self):
        p = nk.row_softmax(Tensor([[3.0, 1.0, 2.0]]), np.array([[True, False, True]])).data
        assert p[0, 1] == 0.0
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_all_masked_row_rejected(self):
        with pytest.raises(ValueError):
            nk.row_softmax(Tensor([[1.0, 2.0]]), np.array([[False, False]]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
    def test_row_stochastic(self, x):
        p = nk.row_softmax(Tensor(x)).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x, w = param(rng, 3, 5), rng.normal(size=(3, 5))
        mask = rng.random((3, 5)) < 0.7
        mask[:, 0] = True
        assert nk.grad_check(lambda: (nk.row_softmax(x, mask) * w).sum(), x) < 1e-6


class TestLayerNorm:
    def test_constant_row(self):
        out = nk.layer_norm(Tensor([[1.0, 1.0, 1.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_hand_values(self):
        out = nk.layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [[-1.2247, 0.0, 1.2247]], atol=1e-3)

    def test_zero_gain_gives_bias(self):
        b = np.array([0.5, -1.0, 2.0])
        out = nk.layer_norm(Tensor([[4.0, -2.0, 9.0]]), Tensor(np.zeros(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, [b])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b, w = param(rng, 4, 6), param(rng, 6), param(rng, 6), rng.normal(size=(4, 6))
        assert nk.grad_check(lambda: (nk.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-6


class TestCrossEntropy:
    def test_confident_logits_near_zero(self):
        logits = np.full((3, 5), -50.0)
        targets = np.array([0, 3, 4])
        logits[np.arange(3), targets] = 50.0
        assert nk.masked_cross_entropy(Tensor(logits), targets, np.ones(3)).item() < 1e-12

    def test_uniform_logits_give_log_v(self):
        loss = nk.masked_cross_entropy(Tensor(np.zeros((4, 7))), [1, 2, 3, 6], np.ones(4))
        assert loss.item() == pytest.approx(math.log(7), abs=1e-12)

    def test_zero_weights_zero_loss_and_gradient(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        loss = nk.masked_cross_entropy(x, [0, 1, 2], np.zeros(3))
        loss.backward()
        assert loss.item() == 0.0
        assert not x.grad.any()

    def test_target_out_of_vocab(self):
        with pytest.raises(IndexError):
            nk.masked_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3], np.ones(2))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = param(rng, 5, 6)
        t, m = rng.integers(6, size=5), rng.integers(0, 2, size=5).astype(float)
        assert nk.grad_check(lambda: nk.masked_cross_entropy(x, t, m), x) < 1e-6


class TestElementwise:
    @pytest.mark.parametrize("op", [nk.tanh, nk.exp, nk.gelu, lambda t: nk.sqrt(t * t + 1.0), lambda t: nk.log(t * t + 1.0)])
    def test_gradients(self, op):
        rng = np.random.default_rng(1)
        x, w = param(rng, 3, 4), rng.normal(size=(3, 4))
        assert nk.grad_check(lambda: (op(x) * w).sum(), x) < 1e-6

    def test_gelu_tanh_form(self):
        x = np.linspace(-4, 4, 17)
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(nk.gelu(Tensor(x)).data, ref, atol=1e-14)

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(2)
        a, b, c = param(rng, 3, 4), param(rng, 4), param(rng, 3, 1)
        assert nk.grad_check(lambda: ((a * b - c) / (b * b + 1.0)).sum(), [a, b, c]) < 1e-6

    def test_gather_gradients(self):
        rng = np.random.default_rng(3)
        a, w = param(rng, 2, 5, 3), rng.normal(size=(2, 4, 3))
        idx = np.array([[0, 2, 2, 4], [1, 1, 3, 0]])
        assert nk.grad_check(lambda: (nk.take_along(a, idx) * w).sum(), a) < 1e-7
        assert nk.grad_check(lambda: (nk.take(a, [4, 0, 0], axis=1) * w[:, :3]).sum(), a) < 1e-7

    def test_cosine(self):
        assert nk.cosine(Tensor([1.0, 0.0]), Tensor([0.0, 2.0])).item() == 0.0
        assert nk.cosine(Tensor([1.0, 1.0]), Tensor([3.0, 3.0])).item() == pytest.approx(1.0)
        with pytest.raises(ValueError):
            nk.cosine(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_cosine_gradient(self):
        rng = np.random.default_rng(4)
        a, b = param(rng, 3, 5), param(rng, 3, 5)
        assert nk.grad_check(lambda: (nk.cosine(a, b) * np.array([1.0, -2.0, 0.5])).sum(), [a, b]) < 1e-6


class TestFiniteness:
    def test_nan_input_rejected(self):
        with pytest.raises(nk.NonFiniteError):
            Tensor([1.0, float("nan")])

    def test_overflow_rejected(self):
        with pytest.raises(nk.NonFiniteError):
            nk.exp(Tensor([1000.0]))


class TestAdam:
    def test_zero_gradient_is_identity(self):
        p = [np.array([1.0, -2.0]), np.ones((2, 2))]
        before = [x.copy() for x in p]
        state = nk.AdamState(lr=0.1)
        for _ in range(3):
            nk.adam_step(p, [np.zeros(2), np.zeros((2, 2))], state)
        for a, b in zip(p, before):
            np.testing.assert_array_equal(a, b)
        assert state.step == 3

    @pytest.mark.parametrize("g", [3.0, -0.5, 1e-3])
    def test_first_step_is_lr_times_sign(self, g):
        p = [np.array([0.0])]
        nk.adam_step(p, [np.array([g])], nk.AdamState(lr=0.01))
        assert abs(p[0][0] + 0.01 * math.copysign(1, g)) <= 0.01 * 0.01

    def test_matches_reference_update(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=4)
        p = [x.copy()]
        st_ = nk.AdamState(lr=0.05)
        m = v = np.zeros(4)
        for t in range(1, 6):
            g = 2 * p[0]
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            nk.adam_step(p, [g], st_)
            np.testing.assert_allclose(p[0], x, rtol=1e-13)

    def test_two_steps_decrease_quadratic(self):
        w = Tensor([2.5], requires_grad=True)
        opt = nk.Adam([w], lr=0.1)
        start = (w * w).sum().item()
        for _ in range(2):
            opt.zero_grad()
            (w * w).sum().backward()
            opt.step()
        assert (w * w).sum().item() < start

    def test_schedule(self):
        lrs = [nk.linear_warmup_decay(s, 100, 1.0, 0.1) for s in range(100)]
        assert lrs[0] == pytest.approx(0.1)
        assert max(lrs) == pytest.approx(1.0)
        assert np.argmax(lrs) == 9
        assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))


class TestGradCheck:
    def test_square(self):
        x = Tensor([3.0])
        assert nk.grad_check(lambda: (x * x).sum(), x) < 1e-7
        assert x.grad is None

    def test_constant_function(self):
        x = Tensor([1.0, 2.0])
        assert nk.grad_check(lambda: (x * 0.0).sum() + 5.0, x) == 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_two_layer_mlp(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 5))
        w1, b1, w2, b2 = param(rng, 5, 8), param(rng, 8), param(rng, 8, 4), param(rng, 4)
        t = rng.integers(4, size=6)
        f = lambda: nk.masked_cross_entropy(nk.tanh(Tensor(x) @ w1 + b1) @ w2 + b2, t, np.ones(6))
        assert nk.grad_check(f, [w1, b1, w2, b2]) < 1e-4

    def test_five_point_stencil(self):
        # cubic: the central difference is off by h^2, the five-point one is exact
        x = Tensor([2.0])
        f = lambda: (x * x * x).sum()
        assert nk.grad_check(f, x, h=1e-2) > 1e-6
        assert nk.grad_check(f, x, h=1e-2, stencil=4) < 1e-12
        with pytest.raises(ValueError):
            nk.grad_check(f, x, stencil=3)

    def test_detects_wrong_gradient(self):
        x = Tensor([0.7, -1.3], requires_grad=True)

        def broken():
            out = nk.tanh(x)
            out._backward = lambda g: (2 * g,)
            return out.sum()

        assert nk.grad_check(broken, x) > 0.1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(2, 3)), "b.c": rng.normal(size=4).astype(np.float32), "s": np.array(1.5)}
        nk.save_checkpoint(tmp_path / "m.spmw", tensors, {"k": 1})
        back, meta = nk.load_checkpoint(tmp_path / "m.spmw")
        assert list(back) == list(tensors) and meta == {"k": 1}
        for k in tensors:
            assert back[k].dtype == tensors[k].dtype
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_layout(self):
        blob = dumps({"w": np.array([[1.0, 2.0]])})
        assert blob[:4] == b"SPMW"
        assert blob[4:6] == (1).to_bytes(2, "little")
        assert blob[6:10] == (1).to_bytes(4, "little")
        assert blob[10:12] == (1).to_bytes(2, "little") and blob[12:13] == b"w"
        assert blob[13:15] == bytes([0, 2])
        assert np.frombuffer(blob[-16:], "<f8").tolist() == [1.0, 2.0]

    def test_deterministic_bytes(self):
        t = {"x": np.arange(6.0).reshape(2, 3)}
        assert dumps(t) == dumps(dict(t))

    @pytest.mark.parametrize("blob", [b"NOPE" + bytes(6), dumps({"x": np.ones(3)})[:-4], dumps({"x": np.ones(3)}) + b"\0"])
    def test_corrupt(self, blob):
        with pytest.raises(nk.CheckpointError):
            loads(blob)

    def test_unsupported_dtype(self):
        with pytest.raises(nk.CheckpointError):
            dumps({"i": np.arange(3)})
