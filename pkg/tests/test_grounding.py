import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reference import naive_forward
from tauground.data import Codec, SequenceRecord
from tauground.grounding import (
    assemble,
    build_decoder,
    build_encoder,
    decode,
    encode,
    forward_grounded,
    load_checkpoint,
    model_from_dict,
    model_to_dict,
    save_checkpoint,
    standalone_decoder,
)
from tauground.numeric import Rng
from tauground.rnn import LayerSpec, run_batch
from tauground.training import TrainConfig, train_model

TOKENS = ["SIL", "AA", "B", "K", "L"]


def specs(io=6, cf=5, cs=4, csc=2, taus=(2.0, 5.0, 30.0)):
    return [
        LayerSpec("IO", io, 0, "fixed", taus[0]),
        LayerSpec("Cf", cf, 0, "fixed", taus[1]),
        LayerSpec("Cs", cs, csc, "fixed", taus[2]),
    ]


def make_model(seed=0, modalities=(("sm", 3), ("vi", 4)), dec_csc=3, coupling="affine", gain=1.5):
    rng = Rng(seed)
    codec = Codec("phonetic", TOKENS)
    encs = [build_encoder(m, specs(), d, rng, weight_gain=gain) for m, d in modalities]
    dec = build_decoder(specs(csc=dec_csc), codec.dim, rng, weight_gain=gain)
    return assemble(encs, dec, codec, rng, coupling)


def make_record(rid="r0", seed=0, lengths=(7, 9), dims=(("sm", 3), ("vi", 4)), tokens=("SIL", "B", "AA", "L")):
    g = np.random.default_rng(seed)
    streams = {m: g.uniform(0, 1, (n, d)) for (m, d), n in zip(dims, lengths)}
    return SequenceRecord(rid, streams, ["ball"], list(tokens))


class TestEncode:
    def test_output_length_and_determinism(self):
        m = make_model()
        s = np.random.default_rng(1).normal(size=(5, 3))
        a = encode(m.encoders[0], s)
        assert a.shape == (2,)
        np.testing.assert_array_equal(a, encode(m.encoders[0], s))

    def test_matches_last_trace_row(self):
        m = make_model()
        s = np.random.default_rng(2).uniform(size=(5, 3))
        zs = naive_forward(m.encoders[0].params, s)
        expected = np.tanh(zs[2][-1][:2])
        np.testing.assert_allclose(encode(m.encoders[0], s), expected, atol=1e-13)

    def test_errors(self):
        enc = make_model().encoders[0]
        with pytest.raises(ValueError, match="empty stream"):
            encode(enc, np.zeros((0, 3)))
        with pytest.raises(ValueError, match="dim"):
            encode(enc, np.zeros((4, 2)))

    def test_encoder_needs_csc(self):
        with pytest.raises(ValueError, match="Csc"):
            build_encoder("sm", specs(csc=0), 3, Rng(0))

    def test_input_mean_zeroes_typical_drive(self):
        mu = np.array([0.2, 0.5, 0.9])
        enc = build_encoder("sm", specs(), 3, Rng(0), input_mean=mu)
        io = enc.params.layers[0]
        np.testing.assert_allclose(io.W_in @ mu + io.b, 0.0, atol=1e-15)
        with pytest.raises(ValueError):
            build_encoder("sm", specs(), 3, Rng(0), input_mean=[0.1, 0.2])


class TestDecode:
    def test_rows_sum_to_one(self):
        dec = make_model().decoder
        out = decode(dec, np.array([0.3, -0.2, 0.1]), 6)
        assert out.shape == (6, len(TOKENS))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_steps(self):
        assert decode(make_model().decoder, np.zeros(3), 0).shape == (0, len(TOKENS))

    def test_errors(self):
        dec = make_model().decoder
        with pytest.raises(ValueError, match="context length"):
            decode(dec, np.zeros(2), 3)
        with pytest.raises(ValueError, match="teacher_inputs"):
            decode(dec, np.zeros(3), 3, feedback="teacher")
        with pytest.raises(ValueError, match="teacher_inputs"):
            decode(dec, np.zeros(3), 3, feedback="self", teacher_inputs=np.zeros((2, 5)))

    def test_first_step_ignores_feedback_mode(self):
        dec = make_model().decoder
        ctx = np.array([0.5, 0.1, -0.4])
        a = decode(dec, ctx, 1, feedback="self")
        b = decode(dec, ctx, 1, feedback="teacher", teacher_inputs=np.ones((0, len(TOKENS))))
        np.testing.assert_array_equal(a, b)

    def test_overfit_one_sequence(self):
        codec = Codec("phonetic", TOKENS)
        target = ["B", "AA", "L", "K"]
        rec = SequenceRecord("only", {}, ["x"], target)
        rng = Rng(3)
        dec = build_decoder(specs(io=10, cf=8, cs=4, csc=3, taus=(2.0, 3.0, 8.0)), codec.dim, rng, weight_gain=1.5)
        model = standalone_decoder(dec, codec, ["only"], rng)
        cfg = TrainConfig(max_epochs=400, batch_size=1, patience=10**6, restore_best=False)
        train_model(model, [rec], [rec], cfg)
        ctx = model.decoder.context_bias_table["only"]
        onehots = codec.encode(target)
        self_out = decode(model.decoder, ctx, 4, feedback="self")
        teacher_out = decode(model.decoder, ctx, 4, feedback="teacher", teacher_inputs=onehots[:3])
        assert codec.decode(self_out) == target
        assert codec.decode(teacher_out) == target


class TestAssemble:
    def test_coupling_shape_three_encoders(self):
        rng = Rng(0)
        codec = Codec("phonetic", TOKENS)
        encs = [build_encoder(m, specs(csc=4), 3, rng) for m in ("au", "sm", "vi")]
        dec = build_decoder(specs(cs=8, csc=6), codec.dim, rng)
        m = assemble(encs, dec, codec, rng)
        assert m.coupling_W.shape == (6, 12)
        assert m.coupling_b.shape == (6,)
        assert np.abs(m.coupling_W).max() <= 0.08

    def test_single_modality_is_legal(self):
        m = make_model(modalities=(("vi", 4),))
        assert m.modalities == ["vi"]
        assert m.context_dim == 2

    def test_identity_mode(self):
        m = make_model(dec_csc=4, coupling="identity")
        assert m.coupling_W is None
        with pytest.raises(ValueError, match="identity"):
            make_model(dec_csc=3, coupling="identity")

    def test_errors(self):
        rng = Rng(0)
        codec = Codec("phonetic", TOKENS)
        dec = build_decoder(specs(), codec.dim, rng)
        e = build_encoder("sm", specs(), 3, rng)
        with pytest.raises(ValueError, match="at least one encoder"):
            assemble([], dec, codec, rng)
        with pytest.raises(ValueError, match="duplicate"):
            assemble([e, build_encoder("sm", specs(), 3, rng)], dec, codec, rng)
        with pytest.raises(ValueError, match="at most three"):
            assemble([build_encoder(f"m{i}", specs(), 3, rng) for i in range(4)], dec, codec, rng)
        with pytest.raises(ValueError, match="coupling"):
            assemble([e], dec, codec, rng, "shared")
        with pytest.raises(ValueError, match="codec"):
            assemble([e], build_decoder(specs(), 7, rng), codec, rng)

    def test_context_bias_length_checked(self):
        dec = make_model().decoder
        dec.context_bias_table["x"] = np.zeros(2)
        with pytest.raises(ValueError, match="context bias"):
            type(dec)(dec.params, dec.context_bias_table)


class TestForwardGrounded:
    def test_shapes(self):
        m = make_model()
        p = forward_grounded(m, make_record())
        assert p.outputs.shape == (4, len(TOKENS))
        assert p.context.shape == (4,)
        assert p.encoder_traces["vi"].y[0].shape == (9, 6)

    def test_context_length_follows_modalities(self):
        rec = make_record()
        assert forward_grounded(make_model(modalities=(("vi", 4),)), rec).context.shape == (2,)

    def test_missing_modality(self):
        m = make_model()
        rec = make_record()
        del rec.streams["vi"]
        with pytest.raises(KeyError, match="vi"):
            forward_grounded(m, rec)

    @pytest.mark.parametrize("feedback", ["self", "teacher"])
    def test_manual_composition(self, feedback):
        m = make_model(seed=4)
        rec = make_record(seed=5)
        ctx = np.concatenate([encode(e, rec.streams[e.modality]) for e in m.encoders])
        z0 = m.coupling_W @ ctx + m.coupling_b
        onehots = m.codec.encode(rec.label_phonemes)
        teacher = onehots[:-1] if feedback == "teacher" else None
        manual = decode(m.decoder, z0, 4, feedback=feedback, teacher_inputs=teacher)
        p = forward_grounded(m, rec, feedback)
        np.testing.assert_allclose(p.context, ctx, atol=1e-14)
        np.testing.assert_allclose(p.csc_z0, z0, atol=1e-14)
        np.testing.assert_allclose(p.outputs, manual, atol=1e-14)

    def test_checkpoint_round_trip_is_bitwise(self, tmp_path):
        m = make_model(seed=6)
        m.meta["note"] = "kept"
        rec = make_record(seed=7)
        path = tmp_path / "model.json"
        save_checkpoint(m, path)
        m2 = load_checkpoint(path)
        assert m2.modalities == m.modalities
        assert m2.meta == {"note": "kept"}
        for k, v in m.arrays().items():
            np.testing.assert_array_equal(m2.arrays()[k], v)
        a, b = forward_grounded(m, rec), forward_grounded(m2, rec)
        np.testing.assert_array_equal(a.outputs, b.outputs)
        np.testing.assert_array_equal(a.context, b.context)

    def test_standalone_round_trip(self):
        rng = Rng(0)
        codec = Codec("phonetic", TOKENS)
        m = standalone_decoder(build_decoder(specs(), codec.dim, rng), codec, ["a", "b"], rng)
        m2 = model_from_dict(model_to_dict(m))
        rec = SequenceRecord("b", {}, ["x"], ["SIL", "K"])
        np.testing.assert_array_equal(forward_grounded(m, rec).outputs, forward_grounded(m2, rec).outputs)

    def test_bad_format_tag(self):
        d = model_to_dict(make_model())
        d["format"] = "something-else"
        with pytest.raises(ValueError, match="format"):
            model_from_dict(d)


seeds = st.integers(0, 2**31 - 1)


class TestGroundingProperties:
    @settings(max_examples=100, deadline=None)
    @given(seeds, seeds)
    def test_context_independent_of_decoder(self, s1, s2):
        m = make_model(seed=s1 % 1000)
        rec = make_record(seed=s2)
        before = forward_grounded(m, rec).context
        g = np.random.default_rng(s2)
        for v in m.decoder.params.arrays().values():
            v[...] = g.normal(size=v.shape)
        np.testing.assert_array_equal(forward_grounded(m, rec).context, before)

    @settings(max_examples=100, deadline=None)
    @given(seeds, seeds, seeds)
    def test_zero_coupling_isolates_decoder(self, s, r1, r2):
        m = make_model(seed=s % 1000)
        m.coupling_W[...] = 0.0
        a = forward_grounded(m, make_record(seed=r1)).outputs
        b = forward_grounded(m, make_record(seed=r2, lengths=(4, 11))).outputs
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=100, deadline=None)
    @given(seeds, seeds)
    def test_pure_function_of_record(self, s, r):
        m = make_model(seed=s % 1000)
        rec, other = make_record(seed=r), make_record(seed=r + 1)
        first = forward_grounded(m, rec).outputs
        forward_grounded(m, other)
        np.testing.assert_array_equal(forward_grounded(m, rec).outputs, first)

    @settings(max_examples=100, deadline=None)
    @given(seeds, seeds)
    def test_serialization_round_trip(self, s, r):
        m = make_model(seed=s % 1000)
        rec = make_record(seed=r)
        m2 = model_from_dict(model_to_dict(m))
        np.testing.assert_array_equal(forward_grounded(m2, rec).outputs, forward_grounded(m, rec).outputs)

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_batched_forward_matches_single(self, s):
        m = make_model(seed=s % 1000)
        enc = m.encoders[1]
        g = np.random.default_rng(s)
        x = g.uniform(size=(6, 2, 4))
        u = run_batch(enc.params, 6, 2, inputs=x)
        for j in range(2):
            np.testing.assert_allclose(u.y[2][-1][j, :2], encode(enc, x[:, j]), atol=1e-14)
