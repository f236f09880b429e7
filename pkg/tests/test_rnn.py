import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tauground.numeric import Rng, softmax
from reference import naive_forward
from tauground.rnn import (
    LayerSpec,
    LayerState,
    StepConfig,
    TimescaleParams,
    ctrnn_step,
    effective_timescale,
    init_mtrnn,
    init_timescales,
    mtrnn_forward,
    run_batch,
    validate_specs,
)


def specs(io=4, cf=3, cs=2, csc=1, taus=(2.0, 5.0, 70.0), scheme="fixed"):
    return [
        LayerSpec("IO", io, 0, scheme, taus[0]),
        LayerSpec("Cf", cf, 0, scheme, taus[1]),
        LayerSpec("Cs", cs, csc, scheme, taus[2]),
    ]


def scalar_tau(tau):
    if tau == 1:
        return TimescaleParams([0.0], [0.0], baseline=True)
    return TimescaleParams([math.log(tau - 1.0)], [0.0])


class TestEffectiveTimescale:
    def test_unit_offsets(self):
        assert effective_timescale(TimescaleParams([0.0], [0.0]))[0] == 2.0

    def test_inversions(self):
        assert effective_timescale(TimescaleParams([math.log(69)], [0.0]))[0] == pytest.approx(70.0, abs=1e-12)
        assert effective_timescale(TimescaleParams([math.log(699)], [0.0]))[0] == pytest.approx(700.0, abs=1e-10)

    def test_baseline_is_exactly_one(self):
        tp = TimescaleParams(np.zeros(3), np.zeros(3), baseline=True)
        np.testing.assert_array_equal(effective_timescale(tp), np.ones(3))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_always_above_one(self, u, t0):
        assert effective_timescale(TimescaleParams([t0], [u]))[0] > 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            TimescaleParams([0.0, 1.0], [0.0])


class TestInitTimescales:
    def test_fixed_targets(self):
        rng = Rng(0)
        for s, target in zip(specs(), (2.0, 5.0, 70.0)):
            tp = init_timescales(s, 100, rng, adaptive=False)
            np.testing.assert_allclose(effective_timescale(tp), target, rtol=0, atol=1e-12)
            np.testing.assert_array_equal(tp.U, 0.0)

    def test_adaptive_offsets_small(self):
        tp = init_timescales(LayerSpec("Cf", 50, 0, "fixed", 5.0), 100, Rng(1), adaptive=True)
        assert np.all(np.abs(tp.U) <= 0.01) and np.any(tp.U != 0)

    @pytest.mark.parametrize("scheme", ["random-linear", "random-log"])
    def test_random_schemes_within_bounds(self, scheme):
        tp = init_timescales(LayerSpec("Cs", 500, 0, scheme), 740, Rng(2), adaptive=False)
        tau = effective_timescale(tp)
        assert np.all(tau > 1.0) and np.all(tau <= 740.0 + 1e-9)

    def test_deterministic(self):
        s = LayerSpec("Cs", 10, 2, "random-log")
        a = init_timescales(s, 50, Rng(4))
        b = init_timescales(s, 50, Rng(4))
        np.testing.assert_array_equal(a.tau0, b.tau0)
        np.testing.assert_array_equal(a.U, b.U)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            init_timescales(LayerSpec("IO", 2, 0, "fixed", 1.0), 10, Rng(0))
        with pytest.raises(ValueError):
            init_timescales(LayerSpec("IO", 2, 0, "fixed", 0.5), 10, Rng(0))

    def test_baseline_scheme(self):
        tp = init_timescales(LayerSpec("IO", 3, 0, "baseline"), 10, Rng(0))
        assert tp.baseline and not tp.learnable
        np.testing.assert_array_equal(effective_timescale(tp), 1.0)


class TestLayerSpec:
    def test_csc_only_on_cs(self):
        with pytest.raises(ValueError):
            LayerSpec("Cf", 3, 1)
        with pytest.raises(ValueError):
            LayerSpec("Cs", 2, 3)

    def test_role_order(self):
        s = specs()
        with pytest.raises(ValueError):
            validate_specs([s[1], s[0], s[2]])
        with pytest.raises(ValueError):
            validate_specs(s[:2])

    def test_dict_round_trip(self):
        for s in specs():
            assert LayerSpec.from_dict(s.to_dict()) == s


class TestCtrnnStep:
    def test_tau_one_is_srn(self):
        out = ctrnn_step(LayerState(np.array([5.0]), np.tanh([5.0])), [0.3], scalar_tau(1))
        assert out.z[0] == 0.3

    def test_tau_two_halves(self):
        assert ctrnn_step(LayerState(np.array([1.0]), np.tanh([1.0])), [0.0], scalar_tau(2)).z[0] == 0.5

    def test_slow_unit(self):
        out = ctrnn_step(LayerState(np.array([1.0]), np.tanh([1.0])), [0.0], scalar_tau(1e6))
        assert out.z[0] == pytest.approx(0.999999, abs=1e-15)

    def test_activation_is_tanh(self):
        out = ctrnn_step(LayerState(np.zeros(2), np.zeros(2)), [0.5, -2.0], TimescaleParams([0.0, 0.0], [0.0, 0.0]))
        np.testing.assert_array_equal(out.y, np.tanh(out.z))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ctrnn_step(LayerState(np.zeros(2), np.zeros(2)), [0.0], scalar_tau(2))

    def test_tau_one_matches_srn_bitwise_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            z = rng.normal(size=n) * 3
            drive = rng.normal(size=n)
            out = ctrnn_step(LayerState(z, np.tanh(z)), drive, TimescaleParams(np.zeros(n), np.zeros(n), baseline=True))
            np.testing.assert_array_equal(out.z, drive)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1.01, 1e4), st.floats(-5, 5), st.integers(1, 200))
    def test_leak_law(self, tau, z0, steps):
        p = scalar_tau(tau)
        s = LayerState(np.array([z0]), np.tanh([z0]))
        for _ in range(steps):
            s = ctrnn_step(s, [0.0], p)
        expected = (1.0 - 1.0 / effective_timescale(p)[0]) ** steps * z0
        assert abs(s.z[0] - expected) <= 1e-12 * max(abs(expected), 1e-300) + 1e-300


class TestStepConfig:
    def test_dt_must_not_exceed_tau(self):
        with pytest.raises(ValueError):
            StepConfig(2.5).check([np.array([2.0])])
        StepConfig(1.0).check([np.array([2.0])])


class TestMtrnnForward:
    def test_zero_weights_give_zero_activity(self):
        p = init_mtrnn(specs(), 3, Rng(0))
        for k, v in p.arrays().items():
            if not k.endswith(".U"):
                v[...] = 0.0
        tr = mtrnn_forward(p, np.random.default_rng(0).normal(size=(7, 3)))
        for y in tr.y:
            np.testing.assert_array_equal(y, 0.0)

    def test_matches_naive_reference(self):
        p = init_mtrnn(specs(4, 3, 2, 1), 3, Rng(5), adaptive=True)
        for lp in p.layers:
            lp.b[:] = np.random.default_rng(1).normal(size=lp.b.shape)
        x = np.random.default_rng(2).normal(size=(6, 3))
        init = [0.3, -0.7]
        tr = mtrnn_forward(p, x, init_cs_z=init)
        ref = naive_forward(p, x, init)
        for a, b in zip(tr.z, ref):
            np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
        for zi, yi in zip(tr.z, tr.y):
            np.testing.assert_array_equal(yi, np.tanh(zi))

    def test_single_layer_srn_bitwise(self):
        s = [LayerSpec("IO", 5, 0, "baseline"), LayerSpec("Cf", 0, 0, "baseline"), LayerSpec("Cs", 0, 0, "baseline")]
        p = init_mtrnn(s, 3, Rng(7))
        W, V, b = p.layers[0].W_in, p.layers[0].V_self, p.layers[0].b
        b[:] = np.random.default_rng(3).normal(size=5)
        x = np.random.default_rng(4).normal(size=(9, 3))
        tr = mtrnn_forward(p, x)
        y = np.zeros((1, 5))
        for t in range(9):
            z = x[t : t + 1] @ W.T + y @ V.T + b
            y = np.tanh(z)
            np.testing.assert_array_equal(tr.z[0][t], z[0])

    def test_synchronous_update_order_independent(self):
        p = init_mtrnn(specs(), 3, Rng(8))
        x = np.random.default_rng(5).normal(size=(5, 3))
        tr = mtrnn_forward(p, x)
        # Re-run with the layers processed top-down by hand.
        z = [np.zeros(n) for n in (4, 3, 2)]
        y = [np.zeros(n) for n in (4, 3, 2)]
        taus = p.timescales()
        for t in range(5):
            drives = [None] * 3
            for i in (2, 1, 0):
                lp = p.layers[i]
                d = lp.V_self @ y[i] + lp.b
                if lp.W_in is not None:
                    d = d + lp.W_in @ x[t]
                if lp.V_below is not None:
                    d = d + lp.V_below @ y[i - 1]
                if lp.V_above is not None:
                    d = d + lp.V_above @ y[i + 1]
                drives[i] = d
            for i in (2, 1, 0):
                z[i] = (1 - 1 / taus[i]) * z[i] + drives[i] / taus[i]
                y[i] = np.tanh(z[i])
            for i in range(3):
                np.testing.assert_allclose(tr.z[i][t], z[i], atol=1e-13)

    def test_no_io_cs_connection(self):
        p = init_mtrnn(specs(), 3, Rng(0))
        assert p.layers[0].V_below is None and p.layers[2].V_above is None
        assert p.layers[0].V_above.shape == (4, 3)
        assert p.layers[2].V_below.shape == (2, 3)
        assert p.layers[1].W_in is None and p.layers[2].W_in is None

    def test_self_feedback_feeds_probabilities(self):
        p = init_mtrnn(specs(), 6, Rng(1), output_dim=6, readout="softmax")
        tr = mtrnn_forward(p, None, steps=4, init_cs_z=[1.0, -1.0], feedback="self")
        np.testing.assert_allclose(tr.out.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(tr.out, softmax(tr.logits), atol=1e-15)
        u = run_batch(p, 4, 1, z0=[np.zeros((1, 4)), np.zeros((1, 3)), np.array([[1.0, -1.0]])], feedback="self")
        np.testing.assert_array_equal(u.x[0], 0.0)
        np.testing.assert_array_equal(u.x[1:, 0], u.out[:-1, 0])

    def test_argmax_feedback_is_one_hot(self):
        p = init_mtrnn(specs(), 6, Rng(1), output_dim=6, readout="softmax")
        u = run_batch(p, 4, 2, feedback="self-argmax")
        for t in range(1, 4):
            np.testing.assert_array_equal(u.x[t].sum(axis=1), 1.0)
            np.testing.assert_array_equal(np.argmax(u.x[t], axis=1), np.argmax(u.out[t - 1], axis=1))

    def test_errors(self):
        p = init_mtrnn(specs(), 3, Rng(0))
        with pytest.raises(ValueError):
            mtrnn_forward(p, None, steps=3)
        with pytest.raises(ValueError):
            mtrnn_forward(p, np.zeros((4, 2)))
        with pytest.raises(ValueError):
            mtrnn_forward(p, np.zeros((4, 3)), steps=5)
        with pytest.raises(ValueError):
            mtrnn_forward(p, np.zeros((4, 3)), init_cs_z=[0.0])

    def test_mask_freezes_state(self):
        p = init_mtrnn(specs(), 3, Rng(2))
        x = np.random.default_rng(0).normal(size=(5, 2, 3))
        mask = np.ones((5, 2), dtype=bool)
        mask[3:, 1] = False
        u = run_batch(p, 5, 2, inputs=x, mask=mask)
        for zi in u.z:
            np.testing.assert_array_equal(zi[4, 1], zi[3, 1])
            np.testing.assert_array_equal(zi[5, 1], zi[3, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 4.0), st.integers(1, 12))
def test_activations_bounded(seed, gain, steps):
    p = init_mtrnn(specs(), 3, Rng(seed), weight_gain=gain)
    x = Rng(seed + 1).normal(0, 3, (steps, 3))
    tr = mtrnn_forward(p, x)
    for y in tr.y:
        assert np.all(np.abs(y) <= 1.0)
        assert np.all(np.isfinite(y))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_batched_equals_single(seed):
    p = init_mtrnn(specs(), 3, Rng(seed))
    x = Rng(seed).normal(0, 1, (6, 3, 3))
    u = run_batch(p, 6, 3, inputs=x)
    for j in range(3):
        tr = mtrnn_forward(p, x[:, j])
        for i in range(3):
            np.testing.assert_allclose(u.z[i][1:, j], tr.z[i], atol=1e-14)
