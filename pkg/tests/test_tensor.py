import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspdet.tensor import (
    SGD, ModelParams, NonFiniteError, Tape, Tensor, add, backward, load_tensor, mul, read_mspt,
    relu, save_tensor, scale, set_debug, sgd_step, tsum, write_mspt, zeros,
)

from oracles import numerical_grad, rel_error


def t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=float).reshape((1,) * (4 - np.ndim(arr)) + np.shape(arr)),
                  requires_grad=grad)


class TestTensor:
    def test_rank_enforced(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 2)))

    def test_data_length_matches_shape(self):
        x = zeros(2, 3, 4, 5)
        assert x.data.size == 2 * 3 * 4 * 5
        assert x.data.dtype == np.float64


class TestAdd:
    def test_additive_identity(self):
        x = t(np.random.default_rng(0).normal(size=(2, 2)))
        out = add(zeros(1, 1, 2, 2), x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_example_sum(self):
        out = add(t([[1, 2], [3, 4]]), t([[4, 3], [2, 1]]))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 1, 2, 2\).*\(1, 1, 3, 3\)"):
            add(zeros(1, 1, 2, 2), zeros(1, 1, 3, 3))

    def test_backward_passes_upstream_exactly(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        weights = Tensor(rng.normal(size=(1, 2, 3, 3)))
        with Tape() as tape:
            loss = tsum(mul(add(a, b), weights))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, weights.data)
        np.testing.assert_array_equal(b.grad, weights.data)

    def test_finite_difference(self):
        rng = np.random.default_rng(2)
        a_arr, b_arr = rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 1, 3, 3))

        def f():
            return tsum(add(Tensor(a_arr), Tensor(b_arr))).item()

        a = Tensor(a_arr, requires_grad=True)
        with Tape() as tape:
            loss = tsum(add(a, Tensor(b_arr)))
        tape.backward(loss)
        num = numerical_grad(f, a_arr, h=1e-6)
        np.testing.assert_allclose(a.grad, num, rtol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(0).normal(size=(1, 2, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(w)
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, np.ones_like(w.data))

    def test_half_square_gives_identity(self):
        w = Tensor(np.random.default_rng(0).normal(size=(1, 2, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = scale(tsum(mul(w, w)), 0.5)
        backward(loss)
        np.testing.assert_allclose(w.grad, w.data, rtol=0, atol=0)

    def test_non_trainable_untouched(self):
        w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        c = Tensor(np.ones((1, 1, 2, 2)))
        with Tape() as tape:
            loss = tsum(mul(w, c))
        tape.backward(loss)
        assert c.grad is None

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            out = relu(w)
        with pytest.raises(ValueError):
            tape.backward(out)

    def test_second_backward_without_reset(self):
        w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(w)
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)
        tape.reset()
        assert len(tape) == 0

    def test_empty_tape_rejected(self):
        with Tape() as tape:
            pass
        with pytest.raises(RuntimeError):
            tape.backward(Tensor(np.zeros((1, 1, 1, 1))))

    def test_each_record_visited_once(self):
        calls = []
        w = Tensor(np.ones((1, 1, 1, 3)), requires_grad=True)
        with Tape() as tape:
            h = relu(w)
            loss = tsum(add(h, h))
        for rec in tape.records:
            fn = rec.backward_fn
            rec.backward_fn = (lambda f, name: (lambda g: (calls.append(name), f(g))[1]))(fn, rec.name)
        tape.backward(loss)
        assert calls == ["sum", "add", "relu"]
        np.testing.assert_array_equal(w.grad, np.full((1, 1, 1, 3), 2.0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_detected_in_debug_mode(self):
        set_debug(True)
        try:
            with pytest.raises(NonFiniteError):
                mul(t([np.inf]), t([0.0]))
        finally:
            set_debug(False)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            w = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
            with Tape() as tape:
                loss = tsum(mul(relu(w), w))
            tape.backward(loss)
            return loss.data.tobytes(), w.grad.tobytes()

        assert run() == run()


class TestSGD:
    def make(self, value, grad):
        params = ModelParams()
        p = params.add("p", Tensor(np.full((1, 1, 1, 1), value)))
        p.grad = np.full((1, 1, 1, 1), grad)
        return params, p

    def test_zero_lr_keeps_params(self):
        params, p = self.make(1.0, 5.0)
        sgd_step(params, lr=0.0, momentum=0.9)
        assert p.item() == 1.0

    def test_closed_form_step(self):
        params, p = self.make(1.0, 2.0)
        sgd_step(params, lr=0.1, momentum=0.0)
        assert p.item() == pytest.approx(0.8, abs=1e-15)
        assert p.grad is None

    def test_missing_grad_names_parameter(self):
        params, p = self.make(1.0, 2.0)
        p.grad = None
        with pytest.raises(ValueError, match="'p'"):
            sgd_step(params, lr=0.1, momentum=0.0)

    def test_bad_momentum(self):
        params, _ = self.make(1.0, 2.0)
        with pytest.raises(ValueError):
            SGD(params, momentum=1.0)

    def test_quadratic_bowl_descends(self):
        params = ModelParams()
        w = params.add("w", Tensor(np.random.default_rng(3).normal(size=(1, 1, 2, 2)) * 3))
        opt = SGD(params, momentum=0.0)
        losses = []
        for _ in range(100):
            with Tape() as tape:
                loss = scale(tsum(mul(w, w)), 0.5)
            tape.backward(loss)
            losses.append(loss.item())
            opt.step(0.1)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_duplicate_names(self):
        params = ModelParams()
        params.add("a", zeros(1, 1, 1, 1))
        with pytest.raises(KeyError):
            params.add("a", zeros(1, 1, 1, 1))


class TestContainer:
    def test_layout(self):
        buf = io.BytesIO()
        write_mspt(buf, np.arange(6, dtype=float).reshape(1, 1, 2, 3))
        raw = buf.getvalue()
        assert raw[:4] == b"MSPT"
        assert struct.unpack("<I", raw[4:8]) == (4,)
        assert struct.unpack("<4I", raw[8:24]) == (1, 1, 2, 3)
        assert np.frombuffer(raw[24:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=4, max_size=4), st.integers(0, 2**32 - 1))
    def test_round_trip(self, shape, seed):
        arr = np.random.default_rng(seed).normal(size=shape)
        buf = io.BytesIO()
        write_mspt(buf, arr)
        buf.seek(0)
        back = read_mspt(buf)
        assert back.tobytes() == arr.tobytes()

    def test_file_round_trip(self, tmp_path):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 5)))
        save_tensor(tmp_path / "x.mspt", x)
        assert load_tensor(tmp_path / "x.mspt").data.tobytes() == x.data.tobytes()

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            read_mspt(io.BytesIO(b"NOPE" + b"\0" * 8))

    def test_truncated(self):
        buf = io.BytesIO()
        write_mspt(buf, np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            read_mspt(io.BytesIO(buf.getvalue()[:-3]))
