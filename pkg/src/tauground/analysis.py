"""Metrics and post-hoc analyses of trained grounding models."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Codec, Dataset
from .numeric import PcaModel, pca_fit, pca_project
from .rnn import StepConfig, TimescaleParams, effective_timescale


def decode_tokens(pred, codec: Codec) -> list:
    return codec.decode(pred)


@dataclass
class AccuracyReport:
    per_step_accuracy: float
    utterance_exact_match: float
    details: list = field(default_factory=list, repr=False)  # (predicted, target) per record

    def to_dict(self) -> dict:
        return {
            "per_step_accuracy": self.per_step_accuracy,
            "utterance_exact_match": self.utterance_exact_match,
            "records": [{"predicted": p, "target": t} for p, t in self.details],
        }


def accuracy(predicted, targets) -> AccuracyReport:
    """Per-step and whole-utterance accuracy over aligned token lists."""
    predicted, targets = list(predicted), list(targets)
    if not targets:
        raise ValueError("cannot score an empty split")
    if len(predicted) != len(targets):
        raise ValueError("prediction and target counts differ")
    correct = total = exact = 0
    details = []
    for p, t in zip(predicted, targets):
        if len(p) != len(t):
            raise ValueError(f"prediction length {len(p)} != target length {len(t)}")
        hits = sum(a == b for a, b in zip(p, t))
        correct += hits
        total += len(t)
        exact += hits == len(t)
        details.append((list(p), list(t)))
    return AccuracyReport(correct / total, exact / len(targets), details)


# ---------------------------------------------------------- timescales


@dataclass
class LayerTimescales:
    name: str
    initial: np.ndarray
    learned: np.ndarray

    def stats(self, which: str = "learned") -> dict:
        v = getattr(self, which)
        if v.size == 0:
            return {"median": float("nan"), "min": float("nan"), "max": float("nan"), "std": float("nan")}
        return {"median": float(np.median(v)), "min": float(v.min()), "max": float(v.max()), "std": float(v.std())}


@dataclass
class TimescaleReport:
    layers: list  # [LayerTimescales]

    def by_name(self) -> dict:
        return {l.name: l for l in self.layers}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "unit", "initial_tau", "learned_tau"])
            for l in self.layers:
                for i, (a, b) in enumerate(zip(l.initial, l.learned)):
                    w.writerow([l.name, i, repr(float(a)), repr(float(b))])

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "which", "median", "min", "max", "std"])
            for l in self.layers:
                for which in ("initial", "learned"):
                    s = l.stats(which)
                    w.writerow([l.name, which, s["median"], s["min"], s["max"], s["std"]])


def snapshot_timescales(model) -> dict:
    return {k: v.copy() for k, v in model.timescale_params().items()}


def timescale_report(model, initial: Optional[dict] = None) -> TimescaleReport:
    """Initial vs learned effective timescales for every layer of every net.

    ``initial`` maps the names of ``model.timescale_params()`` to snapshots
    taken at initialisation; when missing, the frozen ``tau0`` with zero
    offsets stands in.
    """
    layers = []
    for name, tp in model.timescale_params().items():
        if initial is not None and name in initial:
            init = effective_timescale(initial[name])
        else:
            init = effective_timescale(TimescaleParams(tp.tau0, np.zeros_like(tp.U), baseline=tp.baseline))
        layers.append(LayerTimescales(name, init, effective_timescale(tp)))
    return TimescaleReport(layers)


# -------------------------------------------------------------- latent


@dataclass
class LatentProjection:
    family: str
    ids: list
    coords: np.ndarray  # (n, 2)
    explained_variance: np.ndarray
    labels: list
    pca: PcaModel = field(repr=False)
    vectors: np.ndarray = field(repr=False)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", "pc1", "pc2"])
            for i, lab, (a, b) in zip(self.ids, self.labels, self.coords):
                w.writerow([i, lab, repr(float(a)), repr(float(b))])

    def write_svg(self, path, size: int = 400) -> None:
        write_scatter_svg(path, self.coords, self.labels,
                          title=f"{self.family}: PC1 {self.explained_variance[0]:.2f}, "
                                f"PC2 {self.explained_variance[1]:.2f}", size=size)


def latent_vectors(model, records, family: str = "context", cfg: StepConfig = StepConfig()) -> np.ndarray:
    """Csc vectors per record.

    ``family`` is ``context`` (concatenated encoder Csc), ``decoder`` (the
    decoder's Csc initial state) or ``enc.<modality>``.
    """
    from .grounding import forward_batch, make_batch

    batch = make_batch(model, records)
    fw = forward_batch(model, batch, "self", cfg)
    if family == "context":
        return fw.context.copy()
    if family == "decoder":
        return fw.csc_z0.copy()
    if family.startswith("enc."):
        mod = family[4:]
        for e in model.encoders:
            if e.modality == mod:
                return fw.enc[mod].y[2][-1][:, : e.csc_units].copy()
        raise KeyError(f"model has no encoder for {mod!r}")
    raise ValueError(f"unknown latent family {family!r}")


def latent_projection(model, records, label_key: str = "action", family: str = "context",
                      cfg: StepConfig = StepConfig()) -> LatentProjection:
    records = list(records.records if isinstance(records, Dataset) else records)
    if len(records) < 3:
        raise ValueError("latent projection needs at least 3 records")
    vecs = latent_vectors(model, records, family, cfg)
    k = min(2, vecs.shape[1])
    pca = pca_fit(vecs, k)
    coords = pca_project(pca, vecs)
    ev = pca.explained_variance_ratio
    if k < 2:
        coords = np.concatenate([coords, np.zeros((len(records), 2 - k))], axis=1)
        ev = np.concatenate([ev, np.zeros(2 - k)])
    labels = [str(r.meta.get(label_key, "")) for r in records]
    return LatentProjection(family, [r.id for r in records], coords, ev, labels, pca, vecs)


def nearest_centroid_accuracy(coords, labels, train_mask=None) -> float:
    """Classify points by the closest label centroid.

    Centroids come from the rows selected by ``train_mask`` (all rows when
    omitted); accuracy is measured on the remaining rows, or on all rows
    when no mask is given.
    """
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    fit = np.ones(len(labels), dtype=bool) if train_mask is None else np.asarray(train_mask, dtype=bool)
    score = np.ones(len(labels), dtype=bool) if train_mask is None else ~fit
    classes = sorted(set(labels[fit].tolist()))
    cents = np.stack([coords[fit & (labels == c)].mean(axis=0) for c in classes])
    d = ((coords[score][:, None, :] - cents[None]) ** 2).sum(axis=2)
    pred = np.array(classes)[np.argmin(d, axis=1)]
    return float(np.mean(pred == labels[score]))


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf"]


def write_scatter_svg(path, coords, labels, title: str = "", size: int = 400) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    pad = 40
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = pad + (coords - lo) / span * (size - 2 * pad)
    classes = sorted(set(labels))
    color = {c: _PALETTE[i % len(_PALETTE)] for i, c in enumerate(classes)}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(classes)}">',
        f'<text x="{pad}" y="20" font-size="12">{title}</text>',
    ]
    for (x, y), lab in zip(xy, labels):
        parts.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="4" fill="{color[lab]}"/>')
    for i, c in enumerate(classes):
        parts.append(f'<text x="{pad}" y="{size + 15 + 20 * i}" font-size="12" fill="{color[c]}">{c}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# -------------------------------------------------------------- traces


def export_traces(model, record, path, cfg: StepConfig = StepConfig(), feedback: str = "self") -> list:
    """Write one activation CSV per network, units sorted by timescale.

    Columns are ``<layer>:<unit>`` ordered by effective timescale ascending
    (stable, so ties keep layer order); a companion ``*_tau.csv`` lists that
    ordering. Returns the written paths.
    """
    from .grounding import forward_grounded

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pred = forward_grounded(model, record, feedback, cfg)
    nets = [(f"enc_{e.modality}", e.params, pred.encoder_traces[e.modality]) for e in model.encoders]
    nets.append(("dec", model.decoder.params, pred.decoder_trace))
    written = []
    for name, params, trace in nets:
        taus = np.concatenate(params.timescales())
        cols = [f"{lp.spec.role}:{i}" for lp in params.layers for i in range(lp.spec.units)]
        acts = np.concatenate(trace.y, axis=1)
        order = np.argsort(taus, kind="stable")
        f = path / f"{name}_activations.csv"
        with open(f, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([cols[i] for i in order])
            for row in acts[:, order]:
                w.writerow([repr(float(v)) for v in row])
        g = path / f"{name}_tau.csv"
        with open(g, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["column", "unit", "tau"])
            for j, i in enumerate(order):
                w.writerow([j, cols[i], repr(float(taus[i]))])
        written += [f, g]
    return written


def read_trace_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


# ---------------------------------------------------------- statistics


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) via its continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| > |t|) for Student's t."""
    if math.isinf(t):
        return 0.0
    return betainc_regularized(0.5 * df, 0.5, df / (df + t * t))


def compare_runs(acc_a, acc_b):
    """Welch's unequal-variance t-test; returns ``(t, two-sided p)``."""
    a = np.asarray(acc_a, dtype=np.float64)
    b = np.asarray(acc_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two entries")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(se2)
    # Welch-Satterthwaite in terms of variance shares, so tiny variances
    # cannot underflow when squared.
    ra, rb = va / se2, vb / se2
    df = 1.0 / (ra * ra / (a.size - 1) + rb * rb / (b.size - 1))
    return float(t), float(student_t_sf2(t, df))
