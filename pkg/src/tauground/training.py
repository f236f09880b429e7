"""Losses, backpropagation through time, RMSprop and the training protocol."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .analysis import AccuracyReport, accuracy
from .data import Dataset, SequenceRecord, apply_normalization, split_dataset, _stream_extremes
from .grounding import Batch, GroundingModel, forward_batch, make_batch
from .numeric import Rng
from .rnn import StepConfig, backprop_batch

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 30
    max_epochs: int = 5000
    patience: int = 100
    seed: int = 0
    feedback: str = "teacher"
    dt: float = 1.0
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    split_fractions: tuple = (0.75, 0.125, 0.125)
    clip_norm: Optional[float] = 5.0
    workers: int = 1
    restore_best: bool = True

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.dt <= 0:
            raise ValueError("learning rate, batch size and dt must be positive")
        if not 0 <= self.rmsprop_decay < 1 or self.rmsprop_epsilon <= 0:
            raise ValueError("invalid RMSprop constants")
        if self.max_epochs < 0 or self.patience < 1 or self.workers < 1:
            raise ValueError("invalid epoch/patience/worker counts")

    @property
    def step(self) -> StepConfig:
        return StepConfig(self.dt)


# ------------------------------------------------------------------ loss


def loss(pred, target, representation: str) -> float:
    """Mean over timesteps of cross-entropy (phonetic) or per-dimension MSE."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        return 0.0
    if representation == "phonetic":
        return float(np.mean(-np.sum(target * np.log(np.maximum(pred, PROB_FLOOR)), axis=1)))
    if representation == "embedding":
        return float(np.mean(np.mean((pred - target) ** 2, axis=1)))
    raise ValueError(f"unknown representation {representation!r}")


def _batch_loss_and_output_grad(model: GroundingModel, batch: Batch, out: np.ndarray):
    """Per-record losses and d(mean record loss)/d(outputs)."""
    tg, m = batch.targets, batch.target_mask
    lengths = m.sum(axis=0).astype(np.float64)
    B = batch.size
    if model.representation == "phonetic":
        safe = np.maximum(out, PROB_FLOOR)
        per_step = -np.sum(tg * np.log(safe), axis=2)
        g = np.where(out > PROB_FLOOR, -tg / safe, 0.0)
    else:
        D = out.shape[2]
        diff = out - tg
        per_step = np.mean(diff**2, axis=2)
        g = 2.0 * diff / D
    per_step = np.where(m, per_step, 0.0)
    per_record = per_step.sum(axis=0) / lengths
    g = np.where(m[:, :, None], g, 0.0) / (lengths[None, :, None] * B)
    return per_record, g


def batch_gradients(model: GroundingModel, records, feedback: str = "teacher",
                    cfg: StepConfig = StepConfig(), batch: Optional[Batch] = None):
    """Mean loss and mean gradient over ``records`` (one batched pass)."""
    if batch is None:
        batch = make_batch(model, records)
    fw = forward_batch(model, batch, feedback, cfg)
    per_record, g_out = _batch_loss_and_output_grad(model, batch, fw.dec.out)
    dec = model.decoder.params
    grads = {}
    dgrads, gz0 = backprop_batch(dec, fw.dec, g_out=g_out)
    for k, v in dgrads.items():
        grads[f"dec.{k}"] = v
    gcsc = gz0[2][:, : dec.csc_units]
    if model.coupling_mode == "affine":
        grads["coupling.W"] = gcsc.T @ fw.context
        grads["coupling.b"] = gcsc.sum(axis=0)
        gctx = gcsc @ model.coupling_W
    elif model.coupling_mode == "identity":
        gctx = gcsc
    else:
        for k in model.decoder.context_bias_table:
            grads[f"ctx.{k}"] = np.zeros(dec.csc_units)
        for j, rid in enumerate(batch.ids):
            grads[f"ctx.{rid}"] += gcsc[j]
        gctx = None
    off = 0
    for e in model.encoders:
        n = e.csc_units
        u = fw.enc[e.modality]
        gfin = np.zeros((batch.size, e.params.layers[2].spec.units))
        gfin[:, :n] = gctx[:, off : off + n]
        off += n
        egrads, _ = backprop_batch(e.params, u, g_y_final=[None, None, gfin])
        for k, v in egrads.items():
            grads[f"enc.{e.modality}.{k}"] = v
    return float(per_record.mean()), grads, per_record


def bptt_gradients(model: GroundingModel, record: SequenceRecord, feedback: str = "teacher",
                   cfg: StepConfig = StepConfig()):
    """Loss and exact gradients for a single record."""
    value, grads, _ = batch_gradients(model, [record], feedback, cfg)
    return value, grads


def record_loss(model: GroundingModel, records, feedback: str = "teacher", cfg: StepConfig = StepConfig()) -> float:
    batch = make_batch(model, records)
    fw = forward_batch(model, batch, feedback, cfg)
    per_record, _ = _batch_loss_and_output_grad(model, batch, fw.dec.out)
    return float(per_record.mean())


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# --------------------------------------------------------------- RMSprop


class RmspropState:
    def __init__(self):
        self.r = {}

    def accumulator(self, name: str, like: np.ndarray) -> np.ndarray:
        if name not in self.r:
            self.r[name] = np.zeros_like(like)
        return self.r[name]


def rmsprop_update(params: dict, grads: dict, state: RmspropState, cfg: TrainConfig) -> None:
    """In place: ``r <- rho r + (1-rho) g^2``; ``theta <- theta - lr g / sqrt(r + eps)``."""
    rho, lr, eps = cfg.rmsprop_decay, cfg.learning_rate, cfg.rmsprop_epsilon
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        r = state.accumulator(name, p)
        r *= rho
        r += (1.0 - rho) * g * g
        p -= lr * g / np.sqrt(r + eps)


# ------------------------------------------------------------ grad check


@dataclass
class ArrayCheck:
    name: str
    size: int
    max_rel: float
    mean_rel: float


@dataclass
class GradCheckReport:
    arrays: list
    tol: float

    @property
    def max_rel(self) -> float:
        return max((a.max_rel for a in self.arrays), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol

    def lines(self):
        for a in self.arrays:
            yield f"{a.name:32s} n={a.size:5d} max_rel={a.max_rel:.3e} mean_rel={a.mean_rel:.3e}"


def relative_error(analytic, numeric, floor: float):
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true derivative sits below the
    finite-difference noise level from being compared purely relatively.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(model: GroundingModel, record, h: float = 1e-5, tol: float = 1e-5, *,
               feedback: str = "teacher", cfg: StepConfig = StepConfig(), floor: float = 1e-7,
               extended: bool = True, corrupt: Optional[Callable[[dict], None]] = None,
               arrays=None) -> GradCheckReport:
    """Compare BPTT gradients with central differences for every parameter.

    ``record`` may be a single record or a list (the mean loss is checked).
    With ``extended`` the finite differences run on a long-double copy of
    the model, which pushes their rounding noise well below the tolerance.
    ``corrupt`` lets tests tamper with the analytic gradients first.
    """
    records = [record] if isinstance(record, SequenceRecord) else list(record)
    value, grads, _ = batch_gradients(model, records, feedback, cfg)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss")
    if corrupt is not None:
        corrupt(grads)
    dtype = np.longdouble if extended else np.float64
    probe = model.astype(dtype)
    params = probe.arrays()
    names = list(params) if arrays is None else list(arrays)
    batch = make_batch(model, records).astype(dtype)
    step = dtype(h)

    def f():
        fw = forward_batch(probe, batch, feedback, cfg)
        per_record, _ = _batch_loss_and_output_grad(probe, batch, fw.dec.out)
        return per_record.mean()

    out = []
    for name in names:
        p = params[name]
        num = np.zeros(p.shape)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            lp = f()
            flat[i] = old - step
            lm = f()
            flat[i] = old
            nflat[i] = float((lp - lm) / (2 * step))
        rel = relative_error(grads[name], num, floor)
        out.append(ArrayCheck(name, p.size, float(rel.max(initial=0.0)), float(rel.mean()) if rel.size else 0.0))
    return GradCheckReport(out, tol)


# -------------------------------------------------------------- training


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    valid_acc: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list, compare=False)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_valid_loss(self) -> float:
        return self.valid_loss[self.best_epoch] if self.best_epoch >= 0 else float("inf")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "valid_loss", "valid_acc"])
            for i in range(self.epochs):
                w.writerow([i + 1, repr(self.train_loss[i]), repr(self.valid_loss[i]), repr(self.valid_acc[i])])


def predict(model: GroundingModel, records, feedback: str = "self", cfg: StepConfig = StepConfig()):
    """Decoder outputs per record, each cut to its target length."""
    records = list(records)
    batch = make_batch(model, records)
    fw = forward_batch(model, batch, feedback, cfg)
    lengths = batch.target_mask.sum(axis=0)
    return [fw.dec.out[: int(n), j].copy() for j, n in enumerate(lengths)], batch, fw


def evaluate(model: GroundingModel, records, cfg: StepConfig = StepConfig(), feedback: str = "self"):
    """Loss and accuracy report in the given feedback mode."""
    records = list(records)
    preds, batch, fw = predict(model, records, feedback, cfg)
    per_record, _ = _batch_loss_and_output_grad(model, batch, fw.dec.out)
    targets = [model.codec.label_of(r) for r in records]
    report = accuracy([model.codec.decode(p) for p in preds], targets)
    return float(per_record.mean()), report


def _chunked_gradients(model, records, cfg: TrainConfig, pool):
    if pool is None or len(records) < 2:
        return batch_gradients(model, records, cfg.feedback, cfg.step)
    k = min(cfg.workers, len(records))
    bounds = np.linspace(0, len(records), k + 1).astype(int)
    chunks = [records[bounds[i] : bounds[i + 1]] for i in range(k)]
    results = list(pool.map(lambda c: batch_gradients(model, c, cfg.feedback, cfg.step), chunks))
    n = len(records)
    grads = {name: np.zeros_like(g) for name, g in results[0][1].items()}
    per_record = []
    for c, (_, g, pr) in zip(chunks, results):
        w = len(c) / n
        for name in grads:
            grads[name] += w * g[name]
        per_record.extend(pr.tolist())
    return float(np.mean(per_record)), grads, np.array(per_record)


def train_model(model: GroundingModel, train, valid, cfg: TrainConfig, *, epoch_callback=None):
    """Mini-batch RMSprop with early stopping on validation loss.

    The model is updated in place and returned with the history. With
    ``cfg.restore_best`` it is finally reset to the parameters of the best
    validation epoch; otherwise the last parameters are kept.
    """
    train = list(train.records if isinstance(train, Dataset) else train)
    valid = list(valid.records if isinstance(valid, Dataset) else valid)
    if not train or not valid:
        raise ValueError("training and validation splits must be non-empty")
    hist = TrainHistory()
    if cfg.max_epochs == 0:
        hist.stop_reason = "max_epochs"
        return model, hist
    rng = Rng(Rng.derive(cfg.seed, 0x7A11))
    params = model.arrays()
    state = RmspropState()
    best = None
    since_best = 0
    hist.stop_reason = "max_epochs"
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(train))
            losses = []
            for s in range(0, len(order), cfg.batch_size):
                recs = [train[i] for i in order[s : s + cfg.batch_size]]
                _, grads, per_record = _chunked_gradients(model, recs, cfg, pool)
                losses.extend(per_record.tolist())
                if cfg.clip_norm is not None:
                    clip_gradients(grads, cfg.clip_norm)
                rmsprop_update(params, grads, state, cfg)
            vloss, vrep = evaluate(model, valid, cfg.step, "self")
            hist.train_loss.append(float(np.mean(losses)))
            hist.valid_loss.append(vloss)
            hist.valid_acc.append(vrep.per_step_accuracy)
            hist.wall_clock.append(time.perf_counter() - t0)
            if best is None or vloss < hist.valid_loss[hist.best_epoch]:
                hist.best_epoch = epoch
                best = {k: v.copy() for k, v in params.items()}
                since_best = 0
            else:
                since_best += 1
            if epoch_callback is not None:
                epoch_callback(epoch, hist)
            if since_best >= cfg.patience:
                hist.stop_reason = "patience"
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if cfg.restore_best:
        for k, v in best.items():
            params[k][...] = v
    log.info("stopped after %d epochs (%s); best epoch %d", hist.epochs, hist.stop_reason, hist.best_epoch + 1)
    return model, hist


# ------------------------------------------------------- cross-validation


@dataclass
class CVSummary:
    accuracies: list
    exact_matches: list
    seeds: list
    histories: list = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def stderr(self) -> float:
        a = np.asarray(self.accuracies, dtype=np.float64)
        return float(a.std(ddof=1) / math.sqrt(a.size))

    def render(self, percent: bool = True) -> str:
        s = 100.0 if percent else 1.0
        return f"{self.mean * s:.3f} ± {self.stderr * s:.3f}"


def normalize_split(ds: Dataset, train_idx) -> Dataset:
    """Min-max scale every record with extremes taken from the training rows."""
    return apply_normalization(ds, _stream_extremes(ds.subset(train_idx)))


def cross_validate(model_factory, dataset: Dataset, cfg: TrainConfig, runs: int = 10, *,
                   seeds=None, normalize: bool = False) -> CVSummary:
    """Repeated random sub-sampling validation.

    ``model_factory(seed, dataset)`` must return a fresh model. Every run
    draws its own split and initialisation from a seed derived from
    ``cfg.seed`` (or taken from ``seeds``).
    """
    if runs < 2:
        raise ValueError("cross-validation needs at least two runs")
    seeds = [Rng.derive(cfg.seed, r) for r in range(runs)] if seeds is None else list(seeds)
    if len(seeds) != runs:
        raise ValueError("need one seed per run")
    accs, exact, hists = [], [], []
    for r, seed in enumerate(seeds):
        split = split_dataset(dataset, cfg.split_fractions, seed)
        ds = normalize_split(dataset, split.train) if normalize else dataset
        model = model_factory(seed, ds)
        run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
        model, hist = train_model(model, ds.subset(split.train), ds.subset(split.valid), run_cfg)
        _, rep = evaluate(model, ds.subset(split.test).records, run_cfg.step)
        accs.append(rep.per_step_accuracy)
        exact.append(rep.utterance_exact_match)
        hists.append(hist)
        log.info("run %d/%d: test accuracy %.4f", r + 1, runs, rep.per_step_accuracy)
    return CVSummary(accs, exact, seeds, hists)
