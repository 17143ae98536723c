import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import avtta.autodiff as ad
from gradcheck import central_diff, max_rel_err


class TestTensor:
    def test_flat_row_major_data(self):
        t = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.data.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_rejects_nan_and_inf(self):
        with pytest.raises(ad.NonFiniteError):
            ad.constant([1.0, float("nan")])
        with pytest.raises(ad.NonFiniteError):
            ad.constant([float("inf")])

    def test_grad_matches_data_length(self):
        t = ad.parameter([1.0, 2.0, 3.0])
        assert t.grad is None
        t.zero_grad()
        assert t.grad.shape == t.data.shape


class TestLinear:
    def test_identity_weights(self):
        x = ad.constant([1.0, 2.0])
        w = ad.constant([[1.0, 0.0], [0.0, 1.0]])
        b = ad.constant([0.0, 0.0])
        assert ad.linear(x, w, b).array.tolist() == [1.0, 2.0]

    def test_single_output(self):
        y = ad.linear(ad.constant([1.0, 1.0]), ad.constant([[2.0, 3.0]]), ad.constant([1.0]))
        assert y.array.tolist() == [6.0]

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.linear(ad.constant([1.0, 2.0, 3.0]), ad.constant([[1.0, 0.0]]), ad.constant([0.0]))

    def test_weight_gradient_vs_central_differences(self):
        rng = np.random.default_rng(0)
        x = ad.parameter(rng.normal(size=4))
        w = ad.parameter(rng.normal(size=(3, 4)))
        b = ad.parameter(rng.normal(size=3))

        def loss_value() -> float:
            return ad.tsum(ad.linear(x, w, b)).item()

        with ad.Tape() as tape:
            loss = ad.tsum(ad.linear(x, w, b))
        tape.backward(loss)
        for p in (x, w, b):
            fd = central_diff(loss_value, p.array)
            assert max_rel_err(p.grad_array, fd) <= 1e-6


class TestRelu:
    def test_definition(self):
        assert ad.relu(ad.constant([-1.0, 0.0, 2.0])).array.tolist() == [0.0, 0.0, 2.0]

    def test_all_negative_is_all_zero(self):
        assert np.all(ad.relu(ad.constant([-3.0, -0.5, -1e-9])).array == 0.0)

    def test_gradient_mask_away_from_kink(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=8)
        values[np.abs(values) < 1e-3] = 0.5  # keep clear of the kink
        x = ad.parameter(values)

        def loss_value() -> float:
            return ad.tsum(ad.relu(x)).item()

        with ad.Tape() as tape:
            loss = ad.tsum(ad.relu(x))
        tape.backward(loss)
        assert np.array_equal(x.grad_array, (values > 0).astype(float))
        fd = central_diff(loss_value, x.array)
        assert max_rel_err(x.grad_array, fd) <= 1e-6


class TestSoftmax:
    def test_symmetry(self):
        assert ad.softmax(ad.constant([0.0, 0.0])).array.tolist() == [0.5, 0.5]

    def test_large_logits_do_not_overflow(self):
        out = ad.softmax(ad.constant([1000.0, 1000.0])).array
        assert out.tolist() == [0.5, 0.5]

    def test_closed_form_quarter_three_quarters(self):
        out = ad.softmax(ad.constant([0.0, math.log(3.0)])).array
        assert out == pytest.approx([0.25, 0.75], abs=1e-12)

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_probability_vector_properties(self, logits):
        out = ad.softmax(ad.constant(logits)).array
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        assert abs(out.sum() - 1.0) <= 1e-12

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12),
           st.floats(min_value=-100, max_value=100))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, logits, shift):
        base = ad.softmax(ad.constant(logits)).array
        shifted = ad.softmax(ad.constant([v + shift for v in logits])).array
        assert np.max(np.abs(base - shifted)) <= 1e-12


class TestCrossEntropy:
    def test_perfect_prediction(self):
        loss = ad.cross_entropy(ad.constant([1.0, 0.0]), 0)
        assert loss.item() == pytest.approx(0.0, abs=1e-11)

    def test_uniform_two_classes(self):
        loss = ad.cross_entropy(ad.constant([0.5, 0.5]), 1)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_quarter_probability(self):
        loss = ad.cross_entropy(ad.constant([0.25, 0.75]), 0)
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-9)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(ad.constant([0.5, 0.5]), 2)

    def test_gradient_through_softmax(self):
        rng = np.random.default_rng(2)
        logits = ad.parameter(rng.normal(size=5))

        def loss_value() -> float:
            return ad.cross_entropy(ad.softmax(logits), 3).item()

        with ad.Tape() as tape:
            loss = ad.cross_entropy(ad.softmax(logits), 3)
        tape.backward(loss)
        fd = central_diff(loss_value, logits.array)
        assert max_rel_err(logits.grad_array, fd) <= 1e-6


class TestMeanVar:
    def test_constant_tensor(self):
        x = ad.constant(np.full((3, 2, 2, 2), 5.0))
        mean, var = ad.mean_var(x)
        assert np.all(mean.array == 5.0)
        assert np.all(var.array == 0.0)

    def test_population_variance(self):
        # channel values {1, 2, 3}: mean 2, population variance 2/3
        x = ad.constant(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))
        mean, var = ad.mean_var(x)
        assert mean.array.tolist() == [2.0]
        assert var.array == pytest.approx([2.0 / 3.0], abs=1e-15)

    def test_rejects_wrong_rank_and_empty_axes(self):
        with pytest.raises(ad.ShapeError):
            ad.mean_var(ad.constant(np.zeros((2, 3))))
        with pytest.raises(ad.ShapeError):
            ad.mean_var(ad.constant(np.zeros((2, 0, 1, 1))))

    def test_variance_gradient_vs_central_differences(self):
        rng = np.random.default_rng(3)
        x = ad.parameter(rng.normal(size=(2, 3, 2, 2)))

        def loss_value() -> float:
            return ad.tsum(ad.mean_var(x)[1]).item()

        with ad.Tape() as tape:
            loss = ad.tsum(ad.mean_var(x)[1])
        tape.backward(loss)
        fd = central_diff(loss_value, x.array)
        assert max_rel_err(x.grad_array, fd) <= 1e-5


class TestL1Distance:
    def test_identical_inputs(self):
        a = ad.constant([1.0, -2.0, 0.5])
        assert ad.l1_distance(a, ad.constant([1.0, -2.0, 0.5])).item() == 0.0

    def test_definition(self):
        assert ad.l1_distance(ad.constant([1.0, 2.0]), ad.constant([0.0, 0.0])).item() == 3.0

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.l1_distance(ad.constant([1.0]), ad.constant([1.0, 2.0]))

    def test_gradient_is_sign_and_matches_fd(self):
        rng = np.random.default_rng(4)
        av = rng.normal(size=6)
        bv = rng.normal(size=6)
        bv[np.abs(av - bv) < 1e-3] += 0.5  # keep away from ties
        a, b = ad.parameter(av), ad.parameter(bv)

        def loss_value() -> float:
            return ad.l1_distance(a, b).item()

        with ad.Tape() as tape:
            loss = ad.l1_distance(a, b)
        tape.backward(loss)
        assert np.array_equal(a.grad_array, np.sign(av - bv))
        assert max_rel_err(a.grad_array, central_diff(loss_value, a.array)) <= 1e-6
        assert max_rel_err(b.grad_array, central_diff(loss_value, b.array)) <= 1e-6

    @given(st.lists(st.floats(min_value=-100, max_value=100), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_and_symmetric(self, values):
        a = ad.constant(values)
        b = ad.constant([0.0] * len(values))
        d_ab = ad.l1_distance(a, b).item()
        d_ba = ad.l1_distance(b, a).item()
        assert d_ab >= 0.0
        assert d_ab == d_ba


class TestBackward:
    def test_sum_of_parameter_gives_ones(self):
        p = ad.parameter([1.0, 2.0, 3.0])
        with ad.Tape() as tape:
            loss = ad.tsum(p)
        tape.backward(loss)
        assert p.grad.tolist() == [1.0, 1.0, 1.0]

    def test_independent_parameter_gets_zero_grad(self):
        p1 = ad.parameter([1.0, 2.0])
        p2 = ad.parameter([3.0, 4.0])
        with ad.Tape() as tape:
            loss = ad.add(ad.tsum(p1), ad.scale(ad.tsum(p2), 0.0))
        tape.backward(loss)
        assert p2.grad.tolist() == [0.0, 0.0]

    def test_non_scalar_loss_rejected(self):
        p = ad.parameter([1.0, 2.0])
        with ad.Tape() as tape:
            y = ad.relu(p)
            with pytest.raises(ValueError):
                tape.backward(y)

    def test_loss_off_tape_rejected(self):
        p = ad.parameter([1.0])
        loss = ad.tsum(p)  # no tape active
        with ad.Tape() as tape:
            with pytest.raises(ValueError):
                tape.backward(loss)

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(5)
        values = rng.normal(size=(3, 4))
        grads = []
        for _ in range(2):
            w = ad.parameter(values.copy())
            x = ad.constant(np.arange(4.0))
            b = ad.parameter(np.zeros(3))
            with ad.Tape() as tape:
                loss = ad.tsum(ad.relu(ad.linear(x, w, b)))
            tape.backward(loss)
            grads.append(w.grad_array.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_composite_objective_vs_central_differences(self):
        rng = np.random.default_rng(0)
        w = ad.parameter(rng.normal(size=(4, 3)) * 0.7)
        b = ad.parameter(rng.normal(size=4) * 0.3)
        x = ad.constant(rng.normal(size=3))
        ref_mean = ad.constant(rng.normal(size=4))

        def build() -> ad.Tensor:
            h = ad.relu(ad.linear(x, w, b))
            probs = ad.softmax(h)
            ce = ad.cross_entropy(probs, 1)
            penalty = ad.l1_distance(h, ref_mean)
            return ad.add(ad.scale(ce, 0.1), ad.scale(penalty, 0.1))

        with ad.Tape() as tape:
            loss = build()
        tape.backward(loss)
        for p in (w, b):
            fd = central_diff(lambda: build().item(), p.array)
            assert max_rel_err(p.grad_array, fd) <= 1e-4


class TestTapeStructure:
    def test_inputs_precede_outputs(self):
        p = ad.parameter([1.0, -1.0])
        with ad.Tape() as tape:
            y = ad.relu(p)
            loss = ad.tsum(y)
        seen: set[int] = {p.node_id}
        for node in tape.nodes:
            assert all(i in seen for i in node.input_ids)
            seen.add(node.output_id)

    def test_no_recording_without_tape(self):
        p = ad.parameter([1.0, 2.0])
        y = ad.relu(p)
        assert y.node_id is None
