"""Crossmodal grounding model: sensory encoders feeding a language decoder.

Each encoder is an MTRNN run over its modality stream; the activations of
its Csc units after the last step form that modality's context. The
concatenated context passes through an affine coupling (or an identity
copy) to become the initial internal state of the decoder's Csc units, from
which the decoder unrolls the token sequence.

A model without encoders is a standalone context-bias decoder: the Csc
initial state is looked up per record id in a learnable table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Codec, SequenceRecord
from .numeric import Rng
from .rnn import (
    LayerParams,
    LayerSpec,
    MtrnnParams,
    StepConfig,
    TimescaleParams,
    Trace,
    Unroll,
    init_mtrnn,
    run_batch,
    validate_specs,
)

CHECKPOINT_FORMAT = "tauground-checkpoint/1"
COUPLING_INIT = 0.08


@dataclass
class EncoderNet:
    modality: str
    params: MtrnnParams

    def __post_init__(self):
        if self.params.csc_units < 1:
            raise ValueError(f"encoder {self.modality!r} needs at least one Csc unit")

    @property
    def specs(self):
        return self.params.specs

    @property
    def csc_units(self) -> int:
        return self.params.csc_units


@dataclass
class DecoderNet:
    params: MtrnnParams
    context_bias_table: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params.W_out is None:
            raise ValueError("decoder needs a readout")
        for k, v in self.context_bias_table.items():
            if np.shape(v) != (self.csc_units,):
                raise ValueError(f"context bias {k!r} has wrong length")

    @property
    def specs(self):
        return self.params.specs

    @property
    def csc_units(self) -> int:
        return self.params.csc_units


@dataclass
class GroundingModel:
    encoders: list
    decoder: DecoderNet
    codec: Codec
    coupling_mode: str = "affine"  # affine | identity | bias
    coupling_W: Optional[np.ndarray] = None
    coupling_b: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def modalities(self):
        return [e.modality for e in self.encoders]

    @property
    def context_dim(self) -> int:
        return sum(e.csc_units for e in self.encoders)

    @property
    def representation(self) -> str:
        return self.codec.kind

    def arrays(self) -> dict:
        """All learnable arrays by qualified name (references)."""
        out = {}
        for e in self.encoders:
            for k, v in e.params.arrays().items():
                out[f"enc.{e.modality}.{k}"] = v
        if self.coupling_mode == "affine":
            out["coupling.W"] = self.coupling_W
            out["coupling.b"] = self.coupling_b
        for k, v in self.decoder.params.arrays().items():
            out[f"dec.{k}"] = v
        if self.coupling_mode == "bias":
            for rid, v in self.decoder.context_bias_table.items():
                out[f"ctx.{rid}"] = v
        return out

    def timescale_params(self) -> dict:
        """TimescaleParams per network and layer, keyed like ``enc.vi.Cs``."""
        out = {}
        for e in self.encoders:
            for lp in e.params.layers:
                out[f"enc.{e.modality}.{lp.spec.role}"] = lp.tau
        for lp in self.decoder.params.layers:
            out[f"dec.{lp.spec.role}"] = lp.tau
        return out

    def copy(self) -> "GroundingModel":
        return model_from_dict(model_to_dict(self))

    def astype(self, dtype) -> "GroundingModel":
        """Deep copy with every parameter array cast to ``dtype``."""
        m = self.copy()
        for net in [e.params for e in m.encoders] + [m.decoder.params]:
            for lp in net.layers:
                for k in ("V_self", "b", "W_in", "V_below", "V_above"):
                    v = getattr(lp, k)
                    if v is not None:
                        setattr(lp, k, v.astype(dtype))
                lp.tau = TimescaleParams(lp.tau.tau0.astype(dtype), lp.tau.U.astype(dtype), lp.tau.adaptive,
                                         lp.tau.baseline)
            if net.W_out is not None:
                net.W_out = net.W_out.astype(dtype)
                net.b_out = net.b_out.astype(dtype)
        if m.coupling_mode == "affine":
            m.coupling_W = m.coupling_W.astype(dtype)
            m.coupling_b = m.coupling_b.astype(dtype)
        m.decoder.context_bias_table = {k: v.astype(dtype) for k, v in m.decoder.context_bias_table.items()}
        return m

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays().values()))


def build_encoder(modality: str, specs, input_dim: int, rng: Rng, *, adaptive: bool = True,
                  max_seq_len: int = 100, weight_gain: float = 1.0, input_mean=None) -> EncoderNet:
    """Random encoder network.

    With ``input_mean`` the IO bias starts at ``-W_in @ input_mean`` so the
    typical input produces zero drive; otherwise biases start at zero. For
    min-max scaled streams the constant offset would otherwise push every
    unit the same way and saturate the context units before training.
    """
    params = init_mtrnn(specs, input_dim, rng, adaptive=adaptive, max_seq_len=max_seq_len,
                        weight_gain=weight_gain)
    if input_mean is not None:
        mu = np.asarray(input_mean, dtype=np.float64)
        if mu.shape != (input_dim,):
            raise ValueError(f"input_mean must have length {input_dim}")
        io = params.layers[0]
        io.b = -(io.W_in @ mu)
    return EncoderNet(modality, params)


def build_decoder(specs, vocab_dim: int, rng: Rng, *, representation: str = "phonetic",
                  adaptive: bool = True, max_seq_len: int = 100, weight_gain: float = 1.0) -> DecoderNet:
    readout = "softmax" if representation == "phonetic" else "linear"
    params = init_mtrnn(specs, vocab_dim, rng, output_dim=vocab_dim, readout=readout, adaptive=adaptive,
                        max_seq_len=max_seq_len, weight_gain=weight_gain)
    return DecoderNet(params)


def assemble(encoders, decoder: DecoderNet, codec: Codec, rng: Rng, coupling: str = "affine") -> GroundingModel:
    encoders = list(encoders)
    if not encoders:
        raise ValueError("need at least one encoder")
    if len(encoders) > 3:
        raise ValueError("at most three encoders are supported")
    names = [e.modality for e in encoders]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate modality names {names}")
    if decoder.params.output_dim != codec.dim or decoder.params.input_dim != codec.dim:
        raise ValueError("decoder readout/input dimension does not match the codec")
    expected = "softmax" if codec.kind == "phonetic" else "linear"
    if decoder.params.readout != expected:
        raise ValueError(f"{codec.kind} codec needs a {expected} readout")
    ctx = sum(e.csc_units for e in encoders)
    n = decoder.csc_units
    if n < 1:
        raise ValueError("decoder needs at least one Csc unit")
    if coupling == "identity":
        if ctx != n:
            raise ValueError(f"identity coupling needs context length {ctx} == decoder Csc count {n}")
        return GroundingModel(encoders, decoder, codec, "identity")
    if coupling != "affine":
        raise ValueError(f"unknown coupling mode {coupling!r}")
    W = rng.uniform(-COUPLING_INIT, COUPLING_INIT, (n, ctx))
    b = rng.uniform(-COUPLING_INIT, COUPLING_INIT, n)
    return GroundingModel(encoders, decoder, codec, "affine", W, b)


def standalone_decoder(decoder: DecoderNet, codec: Codec, record_ids, rng: Rng, scale: float = 0.1) -> GroundingModel:
    """Context-bias decoder: one learnable Csc initial state per record id."""
    for rid in record_ids:
        if rid not in decoder.context_bias_table:
            decoder.context_bias_table[rid] = rng.uniform(-scale, scale, decoder.csc_units)
    return GroundingModel([], decoder, codec, "bias")


# ----------------------------------------------------------- batching


@dataclass
class Batch:
    ids: list
    streams: dict  # modality -> (T_max, B, dim)
    stream_masks: dict  # modality -> (T_max, B)
    targets: np.ndarray  # (S_max, B, out)
    target_mask: np.ndarray  # (S_max, B)
    teacher: np.ndarray  # (S_max, B, out), targets shifted by one with zeros first

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def lengths(self):
        return self.target_mask.sum(axis=0)

    def astype(self, dtype) -> "Batch":
        return Batch(self.ids, {k: v.astype(dtype) for k, v in self.streams.items()}, self.stream_masks,
                     self.targets.astype(dtype), self.target_mask, self.teacher.astype(dtype))


def make_batch(model: GroundingModel, records, targets=None) -> Batch:
    records = list(records)
    B = len(records)
    if B == 0:
        raise ValueError("empty batch")
    if targets is None:
        targets = [model.codec.encode(model.codec.label_of(r)) for r in records]
    streams, masks = {}, {}
    for e in model.encoders:
        seqs = []
        for r in records:
            if e.modality not in r.streams:
                raise KeyError(f"record {r.id} has no stream for modality {e.modality!r}")
            s = r.streams[e.modality]
            if s.shape[1] != e.params.input_dim:
                raise ValueError(
                    f"record {r.id}: {e.modality} stream dim {s.shape[1]} != encoder input {e.params.input_dim}"
                )
            if s.shape[0] == 0:
                raise ValueError("empty stream")
            seqs.append(s)
        T = max(s.shape[0] for s in seqs)
        arr = np.zeros((T, B, e.params.input_dim))
        m = np.zeros((T, B), dtype=bool)
        for j, s in enumerate(seqs):
            arr[: s.shape[0], j] = s
            m[: s.shape[0], j] = True
        streams[e.modality] = arr
        masks[e.modality] = m
    dim = model.codec.dim
    S = max(t.shape[0] for t in targets)
    tg = np.zeros((S, B, dim))
    tm = np.zeros((S, B), dtype=bool)
    for j, t in enumerate(targets):
        tg[: t.shape[0], j] = t
        tm[: t.shape[0], j] = True
    teacher = np.zeros_like(tg)
    teacher[1:] = tg[:-1]
    if model.coupling_mode == "bias":
        for r in records:
            if r.id not in model.decoder.context_bias_table:
                raise KeyError(f"no context bias for record {r.id!r}")
    return Batch([r.id for r in records], streams, masks, tg, tm, teacher)


@dataclass
class BatchForward:
    enc: dict  # modality -> Unroll
    context: np.ndarray  # (B, ctx) or (B, 0) in bias mode
    csc_z0: np.ndarray  # (B, decoder Csc)
    dec: Unroll


def encoder_context(enc: EncoderNet, u: Unroll) -> np.ndarray:
    return u.y[2][-1][:, : enc.csc_units]


def forward_batch(model: GroundingModel, batch: Batch, feedback: str = "teacher",
                  cfg: StepConfig = StepConfig()) -> BatchForward:
    B = batch.size
    enc_unrolls, ctx_parts = {}, []
    for e in model.encoders:
        u = run_batch(e.params, batch.streams[e.modality].shape[0], B, inputs=batch.streams[e.modality],
                      mask=batch.stream_masks[e.modality], feedback="external", cfg=cfg)
        enc_unrolls[e.modality] = u
        ctx_parts.append(encoder_context(e, u))
    dec = model.decoder.params
    dtype = dec.layers[0].b.dtype
    context = np.concatenate(ctx_parts, axis=1) if ctx_parts else np.zeros((B, 0), dtype=dtype)
    if model.coupling_mode == "affine":
        csc = context @ model.coupling_W.T + model.coupling_b
    elif model.coupling_mode == "identity":
        csc = context.copy()
    else:
        csc = np.stack([model.decoder.context_bias_table[i] for i in batch.ids])
    z0 = [np.zeros((B, lp.spec.units), dtype=dtype) for lp in dec.layers]
    z0[2][:, : dec.csc_units] = csc
    steps = batch.targets.shape[0]
    if feedback == "teacher":
        du = run_batch(dec, steps, B, inputs=batch.teacher, mask=batch.target_mask, z0=z0, feedback="teacher",
                       cfg=cfg)
    else:
        du = run_batch(dec, steps, B, mask=batch.target_mask, z0=z0, feedback=feedback, cfg=cfg)
    return BatchForward(enc_unrolls, context, csc, du)


# ----------------------------------------------------- single-record API


def encode(enc: EncoderNet, stream, cfg: StepConfig = StepConfig()) -> np.ndarray:
    """Csc activations after running the encoder over the whole stream."""
    s = np.asarray(stream, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("empty stream")
    if s.shape[1] != enc.params.input_dim:
        raise ValueError(f"stream dim {s.shape[1]} != encoder input dim {enc.params.input_dim}")
    u = run_batch(enc.params, s.shape[0], 1, inputs=s[:, None, :], cfg=cfg)
    return encoder_context(enc, u)[0].copy()


def decode(dec: DecoderNet, context_z, steps: int, feedback: str = "self", teacher_inputs=None,
           cfg: StepConfig = StepConfig()) -> np.ndarray:
    """Unroll the decoder from a Csc initial state.

    ``teacher_inputs`` holds the ground-truth rows of the previous steps and
    must be given exactly when ``feedback == "teacher"``. The first step
    always receives a zero input.
    """
    context_z = np.asarray(context_z, dtype=np.float64)
    if context_z.shape != (dec.csc_units,):
        raise ValueError(f"context length {context_z.shape} != decoder Csc count {dec.csc_units}")
    p = dec.params
    if steps == 0:
        return np.zeros((0, p.output_dim))
    if (feedback == "teacher") != (teacher_inputs is not None):
        raise ValueError("teacher_inputs must be given iff feedback is 'teacher'")
    z0 = [np.zeros((1, lp.spec.units)) for lp in p.layers]
    z0[2][0, : dec.csc_units] = context_z
    if feedback == "teacher":
        t = np.asarray(teacher_inputs, dtype=np.float64)
        if t.shape[0] < steps - 1:
            raise ValueError("teacher_inputs too short")
        x = np.zeros((steps, 1, p.input_dim))
        x[1:, 0] = t[: steps - 1]
        u = run_batch(p, steps, 1, inputs=x, z0=z0, feedback="teacher", cfg=cfg)
    else:
        u = run_batch(p, steps, 1, z0=z0, feedback=feedback, cfg=cfg)
    return u.out[:, 0, :].copy()


@dataclass
class Prediction:
    outputs: np.ndarray
    context: np.ndarray
    csc_z0: np.ndarray
    encoder_traces: dict
    decoder_trace: Trace


def _trace_of(u: Unroll, j: int, length: int) -> Trace:
    tr = Trace(z=[zi[1 : length + 1, j].copy() for zi in u.z], y=[yi[1 : length + 1, j].copy() for yi in u.y])
    if u.out is not None:
        tr.out = u.out[:length, j].copy()
    return tr


def forward_grounded(model: GroundingModel, record: SequenceRecord, feedback: str = "self",
                     cfg: StepConfig = StepConfig(), target=None) -> Prediction:
    for m in model.modalities:
        if m not in record.streams:
            raise KeyError(f"record {record.id} is missing modality {m!r}")
    batch = make_batch(model, [record], None if target is None else [np.asarray(target)])
    fw = forward_batch(model, batch, feedback, cfg)
    S = batch.targets.shape[0]
    enc_traces = {
        e.modality: _trace_of(fw.enc[e.modality], 0, record.streams[e.modality].shape[0]) for e in model.encoders
    }
    dec_trace = _trace_of(fw.dec, 0, S)
    return Prediction(dec_trace.out, fw.context[0].copy(), fw.csc_z0[0].copy(), enc_traces, dec_trace)


# ---------------------------------------------------------- checkpoints


def _mtrnn_to_dict(p: MtrnnParams) -> dict:
    layers = []
    for lp in p.layers:
        d = {
            "spec": lp.spec.to_dict(),
            "b": lp.b.tolist(),
            "tau0": lp.tau.tau0.tolist(),
            "U": lp.tau.U.tolist(),
            "adaptive": lp.tau.adaptive,
            "baseline": lp.tau.baseline,
        }
        for k in ("W_in", "V_below", "V_above"):
            v = getattr(lp, k)
            if v is not None:
                d[k] = {"shape": list(v.shape), "values": v.ravel().tolist()}
        d["V_self"] = {"shape": list(lp.V_self.shape), "values": lp.V_self.ravel().tolist()}
        layers.append(d)
    out = {"layers": layers, "readout": p.readout}
    if p.W_out is not None:
        out["W_out"] = {"shape": list(p.W_out.shape), "values": p.W_out.ravel().tolist()}
        out["b_out"] = p.b_out.tolist()
    return out


def _mat(d) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


def _mtrnn_from_dict(d: dict) -> MtrnnParams:
    layers = []
    for ld in d["layers"]:
        lp = LayerParams(
            spec=LayerSpec.from_dict(ld["spec"]),
            V_self=_mat(ld["V_self"]),
            b=np.array(ld["b"], dtype=np.float64),
            tau=TimescaleParams(ld["tau0"], ld["U"], ld["adaptive"], ld.get("baseline", False)),
        )
        for k in ("W_in", "V_below", "V_above"):
            if k in ld:
                setattr(lp, k, _mat(ld[k]))
        layers.append(lp)
    validate_specs([lp.spec for lp in layers])
    p = MtrnnParams(layers, readout=d["readout"])
    if "W_out" in d:
        p.W_out = _mat(d["W_out"])
        p.b_out = np.array(d["b_out"], dtype=np.float64)
    return p


def model_to_dict(model: GroundingModel) -> dict:
    d = {
        "format": CHECKPOINT_FORMAT,
        "representation": model.representation,
        "codec": model.codec.to_dict(),
        "coupling_mode": model.coupling_mode,
        "modalities": model.modalities,
        "encoders": [{"modality": e.modality, "params": _mtrnn_to_dict(e.params)} for e in model.encoders],
        "decoder": {
            "params": _mtrnn_to_dict(model.decoder.params),
            "context_bias_table": {k: v.tolist() for k, v in model.decoder.context_bias_table.items()},
        },
        "meta": model.meta,
    }
    if model.coupling_mode == "affine":
        d["coupling_W"] = {"shape": list(model.coupling_W.shape), "values": model.coupling_W.ravel().tolist()}
        d["coupling_b"] = model.coupling_b.tolist()
    return d


def model_from_dict(d: dict) -> GroundingModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
    encs = [EncoderNet(e["modality"], _mtrnn_from_dict(e["params"])) for e in d["encoders"]]
    if [e.modality for e in encs] != list(d["modalities"]):
        raise ValueError("checkpoint modality order is inconsistent")
    dec = DecoderNet(
        _mtrnn_from_dict(d["decoder"]["params"]),
        {k: np.array(v, dtype=np.float64) for k, v in d["decoder"]["context_bias_table"].items()},
    )
    m = GroundingModel(encs, dec, Codec.from_dict(d["codec"]), d["coupling_mode"], meta=dict(d.get("meta", {})))
    if m.coupling_mode == "affine":
        m.coupling_W = _mat(d["coupling_W"])
        m.coupling_b = np.array(d["coupling_b"], dtype=np.float64)
    return m


def save_checkpoint(model: GroundingModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_checkpoint(path) -> GroundingModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
