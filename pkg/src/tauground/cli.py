"""Command-line entry point: ``tauground {gen,train,eval,gradcheck,analyze,compare}``.

Every command reads an optional JSON config (``--config``) and applies flag
overrides on top. The whole config is validated before anything is computed
or written. Exit codes: 0 success, 1 validation or verification failure,
2 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import compare_runs, export_traces, latent_projection, timescale_report
from .data import (
    Codec,
    Dataset,
    DatasetError,
    MissingFileError,
    apply_normalization,
    gen_lissajous_dataset,
    gen_toy_grounding,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .grounding import assemble, build_decoder, build_encoder, load_checkpoint, save_checkpoint
from .numeric import Rng
from .rnn import LayerSpec
from .training import TrainConfig, cross_validate, evaluate, grad_check, normalize_split, train_model

log = logging.getLogger("tauground")

OUT_ENV = "TAU_GROUND_OUT"
VARIANTS = ("ctrnn", "mtrnn", "amtrnn")
ANALYSES = ("timescales", "traces", "latent")
GRADCHECK_WARN_PARAMS = 5000
NO_RESUME_NOTE = "note: training has no resume feature; an interrupted run must be restarted from scratch"

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "tauground-out",
    "dataset": None,
    "generator": {
        "kind": "toy",
        "n_actions": 3,
        "n_objects": 3,
        "modality_dims": {"sm": 8, "vi": 8},
        "seq_len": 60,
        "records_per_pair": 6,
        "noise_sigma": 0.02,
        "label_mode": "words",
        "patterns": [[1, 2], [3, 2]],
        "n_records": 40,
        "steps": 20,
        "cycles": 4,
        "sigma": 0.05,
        "transition_prob": 0.3,
        "delta": 0.0,
    },
    "variant": "amtrnn",
    "modalities": None,
    "representation": "phonetic",
    "coupling": "affine",
    "normalize": False,
    "weight_gain": 2.0,
    "encoder": {"units": [12, 10, 6], "csc_units": 4, "tau": [2.0, 5.0, 70.0], "tau_init": "fixed"},
    "decoder": {"units": [16, 12, 6], "csc_units": 4, "tau": [2.0, 5.0, 70.0], "tau_init": "fixed"},
    "train": {
        "learning_rate": 0.01,
        "batch_size": 30,
        "max_epochs": 2000,
        "patience": 2000,
        "feedback": "teacher",
        "dt": 1.0,
        "rmsprop_decay": 0.9,
        "rmsprop_epsilon": 1e-8,
        "split_fractions": [0.75, 0.125, 0.125],
        "clip_norm": 5.0,
        "workers": 1,
        "restore_best": False,
    },
}


class ConfigError(Exception):
    """Collected config validation failures."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class VerificationFailure(Exception):
    pass


# ----------------------------------------------------------------- config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the JSON file, then flag overrides (flags win)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError(["config file must hold a JSON object"])
        unknown = sorted(set(user) - set(DEFAULT_CONFIG))
        if unknown:
            raise ConfigError([f"unknown config keys: {', '.join(unknown)}"])
        cfg = _merge(cfg, user)
    return _merge(cfg, overrides or {})


def resolve_out(cfg: dict, flag_out=None) -> Path:
    """``--out`` beats ``$TAU_GROUND_OUT``, which beats the config value."""
    if flag_out is not None:
        return Path(flag_out)
    env = os.environ.get(OUT_ENV)
    return Path(env) if env else Path(cfg["out"])


def _net_problems(name: str, net: dict) -> list:
    probs = []
    units, taus = net.get("units"), net.get("tau")
    if not (isinstance(units, list) and len(units) == 3 and all(isinstance(u, int) and u >= 1 for u in units)):
        probs.append(f"{name}.units must be three positive integers (IO, Cf, Cs)")
        units = None
    if not (isinstance(taus, list) and len(taus) == 3 and all(isinstance(t, (int, float)) and t > 1 for t in taus)):
        probs.append(f"{name}.tau must be three timescales > 1")
    csc = net.get("csc_units")
    if not isinstance(csc, int) or csc < 1 or (units is not None and csc > units[2]):
        probs.append(f"{name}.csc_units must lie in [1, Cs units]")
    if net.get("tau_init") not in ("fixed", "random-linear", "random-log"):
        probs.append(f"{name}.tau_init must be fixed, random-linear or random-log")
    return probs


def validate_model_config(cfg: dict, ds: Dataset = None) -> list:
    probs = []
    if cfg.get("variant") not in VARIANTS:
        probs.append(f"variant must be one of {', '.join(VARIANTS)}")
    if cfg.get("representation") not in ("phonetic", "embedding"):
        probs.append("representation must be phonetic or embedding")
    if cfg.get("coupling") not in ("affine", "identity"):
        probs.append("coupling must be affine or identity")
    if not isinstance(cfg.get("weight_gain"), (int, float)) or cfg["weight_gain"] <= 0:
        probs.append("weight_gain must be positive")
    for name in ("encoder", "decoder"):
        probs += _net_problems(name, cfg.get(name) or {})
    try:
        TrainConfig(**_train_kwargs(cfg))
    except (TypeError, ValueError) as e:
        probs.append(f"train: {e}")
    mods = cfg.get("modalities")
    if mods is not None:
        if not isinstance(mods, list) or not mods:
            probs.append("modalities must be a non-empty list")
        elif len(set(mods)) != len(mods):
            probs.append("modalities must be distinct")
        elif not 1 <= len(mods) <= 3:
            probs.append("between one and three modalities may be selected")
    if ds is not None:
        selected = mods if isinstance(mods, list) and mods else list(ds.modality_dims)
        missing = [m for m in selected if m not in ds.modality_dims]
        if missing:
            probs.append(f"modalities not in dataset: {', '.join(missing)}")
        if len(selected) > 3:
            probs.append("at most three encoders are supported; select modalities with --modalities")
        if cfg.get("representation") == "embedding" and ds.embedding_table is None:
            probs.append("embedding representation needs a dataset with an embedding table")
        if cfg.get("coupling") == "identity" and not probs:
            ctx = cfg["encoder"]["csc_units"] * len(selected)
            if ctx != cfg["decoder"]["csc_units"]:
                probs.append(f"identity coupling needs decoder csc_units == {ctx}")
    return probs


def _train_kwargs(cfg: dict) -> dict:
    kw = dict(cfg.get("train") or {})
    kw["seed"] = cfg.get("seed", 0)
    if "split_fractions" in kw:
        kw["split_fractions"] = tuple(kw["split_fractions"])
    return kw


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**_train_kwargs(cfg))


def _specs(net: dict, variant: str):
    scheme = "baseline" if variant == "ctrnn" else net["tau_init"]
    return [
        LayerSpec(role, units, csc, scheme, float(tau))
        for role, units, csc, tau in zip(("IO", "Cf", "Cs"), net["units"], (0, 0, net["csc_units"]), net["tau"])
    ]


def selected_modalities(cfg: dict, ds: Dataset) -> list:
    return list(cfg["modalities"]) if cfg.get("modalities") else list(ds.modality_dims)


def build_model(cfg: dict, ds: Dataset, seed: int):
    """Fresh grounding model for ``ds`` following the architecture config."""
    rng = Rng(Rng.derive(seed, 1))
    variant = cfg["variant"]
    adaptive = variant == "amtrnn"
    gain = float(cfg["weight_gain"])
    max_len = max(max(s.shape[0] for s in r.streams.values()) for r in ds.records)
    max_len = max(max_len, 2)
    codec = Codec.for_dataset(ds, cfg["representation"])
    encs = [
        build_encoder(m, _specs(cfg["encoder"], variant), ds.modality_dims[m], rng, adaptive=adaptive,
                      max_seq_len=max_len, weight_gain=gain)
        for m in selected_modalities(cfg, ds)
    ]
    dec = build_decoder(_specs(cfg["decoder"], variant), codec.dim, rng, representation=cfg["representation"],
                        adaptive=adaptive, max_seq_len=max_len, weight_gain=gain)
    model = assemble(encs, dec, codec, rng, coupling=cfg["coupling"])
    model.meta["variant"] = variant
    return model


def generate(cfg: dict) -> Dataset:
    g = cfg["generator"]
    rng = Rng(Rng.derive(cfg["seed"], 0))
    if g["kind"] == "toy":
        return gen_toy_grounding(g["n_actions"], g["n_objects"], dict(g["modality_dims"]), g["seq_len"],
                                 g["noise_sigma"], rng=rng, records_per_pair=g["records_per_pair"],
                                 label_mode=g["label_mode"])
    if g["kind"] == "lissajous":
        return gen_lissajous_dataset(g["n_records"], [tuple(p) for p in g["patterns"]], g["steps"], g["cycles"],
                                     g["sigma"], g["transition_prob"], rng, delta=g["delta"])
    raise ConfigError([f"unknown generator kind {g['kind']!r} (toy, lissajous)"])


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError([f"output directory {out} is not empty (use --force)"])
    out.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _provenance(command: str, cfg: dict, argv) -> dict:
    return {"tool": "tauground", "version": __version__, "command": command, "argv": list(argv),
            "seed": cfg.get("seed"), "config": cfg}


def _load_dataset_for(cfg: dict) -> Dataset:
    if cfg.get("dataset"):
        return load_dataset(cfg["dataset"])
    return generate(cfg)


def _scaling_to_json(scaling: dict) -> dict:
    return {k: [lo.tolist(), hi.tolist()] for k, (lo, hi) in scaling.items()}


def _scaling_from_json(d: dict) -> dict:
    return {k: (np.array(v[0], dtype=np.float64), np.array(v[1], dtype=np.float64)) for k, v in d.items()}


# --------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.kind is not None:
        overrides["generator"] = {"kind": args.kind}
    cfg = load_config(args.config, overrides)
    if cfg["generator"].get("kind") not in ("toy", "lissajous"):
        raise ConfigError([f"unknown generator kind {cfg['generator'].get('kind')!r} (toy, lissajous)"])
    out = resolve_out(cfg, args.out)
    try:
        ds = generate(cfg)
    except ValueError as e:
        raise ConfigError([f"generator: {e}"]) from None
    _prepare_out(out, args.force)
    save_dataset(ds, out)
    _write_json(out / "provenance.json", _provenance("gen", {"seed": cfg["seed"], "generator": cfg["generator"]},
                                                     sys.argv[1:]))
    print(f"wrote {len(ds)} records to {out}")
    return 0


def _train_overrides(args) -> dict:
    o = {}
    for key in ("seed", "dataset", "variant"):
        v = getattr(args, key, None)
        if v is not None:
            o[key] = v
    if getattr(args, "modalities", None):
        o["modalities"] = [m for m in args.modalities.split(",") if m]
    t = {}
    if getattr(args, "epochs", None) is not None:
        t["max_epochs"] = args.epochs
    if getattr(args, "workers", None) is not None:
        t["workers"] = args.workers
    if t:
        o["train"] = t
    return o


def _train_one(cfg: dict, ds: Dataset, seed: int):
    tc = train_config(cfg)
    tc.seed = seed
    split = split_dataset(ds, tc.split_fractions, seed)
    scaling = None
    if cfg["normalize"]:
        ds = normalize_split(ds, split.train)
        scaling = ds.normalization
    model = build_model(cfg, ds, seed)
    initial_U = {k: tp.U.tolist() for k, tp in model.timescale_params().items()}
    model, hist = train_model(model, ds.subset(split.train), ds.subset(split.valid), tc)
    model.meta.update({
        "config": cfg,
        "split_seed": seed,
        "initial_U": initial_U,
        "normalization": None if scaling is None else _scaling_to_json(scaling),
    })
    _, tr = evaluate(model, ds.subset(split.train).records, tc.step)
    _, te = evaluate(model, ds.subset(split.test).records, tc.step)
    return model, hist, tr, te


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args))
    out = resolve_out(cfg, args.out)
    # Later eval/analyze runs on the checkpoint default to this directory.
    cfg["out"] = str(out)
    probs = validate_model_config(cfg)
    if args.runs < 1:
        probs.append("--runs must be >= 1")
    if probs:
        raise ConfigError(probs)
    ds = _load_dataset_for(cfg)
    probs = validate_model_config(cfg, ds)
    if probs:
        raise ConfigError(probs)
    _prepare_out(out, args.force)
    print(NO_RESUME_NOTE, file=sys.stderr)
    _write_json(out / "config.json", cfg)
    _write_json(out / "provenance.json", _provenance("train", cfg, sys.argv[1:]))
    if args.runs > 1:
        return _cross_validate(cfg, ds, args.runs, out)
    model, hist, tr, te = _train_one(cfg, ds, cfg["seed"])
    save_checkpoint(model, out / "checkpoint.json")
    hist.to_csv(out / "history.csv")
    summary = {
        "variant": cfg["variant"],
        "epochs": hist.epochs,
        "best_epoch": hist.best_epoch + 1,
        "stop_reason": hist.stop_reason,
        "final_train_loss": hist.train_loss[-1] if hist.epochs else None,
        "train_per_step_accuracy": tr.per_step_accuracy,
        "train_exact_match": tr.utterance_exact_match,
        "test_per_step_accuracy": te.per_step_accuracy,
        "test_exact_match": te.utterance_exact_match,
    }
    _write_json(out / "summary.json", summary)
    print(f"{cfg['variant']}: {hist.epochs} epochs, train acc {tr.per_step_accuracy:.4f} "
          f"(exact {tr.utterance_exact_match:.4f}), test acc {te.per_step_accuracy:.4f} "
          f"(exact {te.utterance_exact_match:.4f})")
    return 0


def _cross_validate(cfg: dict, ds: Dataset, runs: int, out: Path) -> int:
    summary = cross_validate(lambda seed, d: build_model(cfg, d, seed), ds, train_config(cfg), runs,
                             normalize=cfg["normalize"])
    for i, h in enumerate(summary.histories):
        h.to_csv(out / f"history_run{i + 1}.csv")
    _write_json(out / "cv_summary.json", {
        "variant": cfg["variant"],
        "runs": runs,
        "seeds": [int(s) for s in summary.seeds],
        "accuracies": summary.accuracies,
        "exact_matches": summary.exact_matches,
        "mean": summary.mean,
        "stderr": summary.stderr,
        "summary": summary.render(),
    })
    line = f"{cfg['variant']}: test accuracy {summary.render()} % over {runs} runs"
    (out / "cv_summary.txt").write_text(line + "\n")
    print(line)
    return 0


def _check_compatible(model, ds: Dataset) -> list:
    probs = []
    missing = [m for m in model.modalities if m not in ds.modality_dims]
    if missing:
        probs.append(f"dataset lacks modalities used by the checkpoint: {', '.join(missing)}")
    for e in model.encoders:
        if e.modality in ds.modality_dims and ds.modality_dims[e.modality] != e.params.input_dim:
            probs.append(f"modality {e.modality}: dataset dim {ds.modality_dims[e.modality]} "
                         f"!= checkpoint dim {e.params.input_dim}")
    if model.representation == "phonetic" and list(model.codec.tokens) != list(ds.alphabet):
        probs.append("dataset alphabet differs from the checkpoint alphabet")
    return probs


def _restore_view(model, ds: Dataset, split_seed: int):
    """Split and normalisation exactly as at training time."""
    cfg = model.meta.get("config", DEFAULT_CONFIG)
    split = split_dataset(ds, tuple(cfg["train"]["split_fractions"]), split_seed)
    scaling = model.meta.get("normalization")
    if scaling is not None:
        ds = apply_normalization(ds, _scaling_from_json(scaling))
    return ds, split


def _dataset_for_checkpoint(model, dataset_arg):
    cfg = model.meta.get("config")
    if dataset_arg is not None:
        return load_dataset(dataset_arg)
    if cfg is None:
        raise ConfigError(["checkpoint has no recorded config; pass --dataset"])
    return _load_dataset_for(cfg)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _dataset_for_checkpoint(model, args.dataset)
    probs = _check_compatible(model, ds)
    if args.split not in ("train", "valid", "test"):
        probs.append("--split must be train, valid or test")
    if probs:
        raise ConfigError(probs)
    cfg = model.meta.get("config", DEFAULT_CONFIG)
    out = resolve_out(cfg, args.out)
    if args.runs > 1:
        _prepare_out(out, args.force)
        return _cross_validate(cfg, ds, args.runs, out)
    split_seed = args.split_seed if args.split_seed is not None else int(model.meta.get("split_seed", 0))
    view, split = _restore_view(model, ds, split_seed)
    idx = getattr(split, args.split)
    loss, rep = evaluate(model, view.subset(idx).records, train_config(cfg).step)
    out.mkdir(parents=True, exist_ok=True)
    name = f"eval_{args.split}"
    doc = {"split": args.split, "split_seed": split_seed, "loss": loss, **rep.to_dict()}
    _write_json(out / f"{name}.json", doc)
    with open(out / f"{name}.csv", "w") as fh:
        fh.write("id,correct_steps,steps,exact,predicted,target\n")
        for rid, d in zip([view.records[i].id for i in idx], rep.details):
            pred, tgt = d
            ok = sum(p == t for p, t in zip(pred, tgt))
            fh.write(f"{rid},{ok},{len(tgt)},{int(ok == len(tgt))},{' '.join(pred)},{' '.join(tgt)}\n")
    print(f"{args.split}: per-step accuracy {rep.per_step_accuracy:.4f}, "
          f"exact match {rep.utterance_exact_match:.4f}, loss {loss:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    overrides = _train_overrides(args)
    overrides.setdefault("generator", {}).update({"seq_len": args.seq_len, "records_per_pair": 1})
    cfg = load_config(args.config, overrides)
    if cfg.get("dataset") is None:
        cfg["generator"]["kind"] = "toy"
    probs = validate_model_config(cfg)
    if probs:
        raise ConfigError(probs)
    ds = _load_dataset_for(cfg)
    probs = validate_model_config(cfg, ds)
    if probs:
        raise ConfigError(probs)
    model = build_model(cfg, ds, cfg["seed"])
    n = model.num_parameters()
    if n > GRADCHECK_WARN_PARAMS:
        print(f"warning: {n} parameters; finite differences will be slow", file=sys.stderr)
    record = ds.records[0]
    corrupt = None
    if args.corrupt is not None:
        names = list(model.arrays())
        if args.corrupt not in names:
            raise ConfigError([f"--corrupt: unknown array {args.corrupt!r}; choose from {', '.join(names)}"])

        def corrupt(grads, name=args.corrupt):
            grads[name] *= 1.1

    report = grad_check(model, record, h=args.h, tol=args.tol, feedback=cfg["train"]["feedback"],
                        corrupt=corrupt)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: {n} parameters, max relative error {report.max_rel:.3e} (tol {args.tol:g})")
    if not report.passed:
        raise VerificationFailure("gradient check failed")
    return 0


def cmd_analyze(args) -> int:
    if args.what not in ANALYSES:
        raise ConfigError([f"unknown analysis {args.what!r}; valid: {', '.join(ANALYSES)}"])
    model = load_checkpoint(args.checkpoint)
    cfg = model.meta.get("config", DEFAULT_CONFIG)
    out = resolve_out(cfg, args.out) / "analysis"
    if args.what == "timescales":
        out.mkdir(parents=True, exist_ok=True)
        init = None
        if "initial_U" in model.meta:
            init = {}
            for k, tp in model.timescale_params().items():
                snap = tp.copy()
                snap.U = np.array(model.meta["initial_U"][k], dtype=np.float64)
                init[k] = snap
        rep = timescale_report(model, init)
        rep.write_csv(out / "timescales.csv")
        rep.write_summary_csv(out / "timescales_summary.csv")
        for layer in rep.layers:
            s = layer.stats("learned")
            print(f"{layer.name:12s} median {s['median']:.4f} min {s['min']:.4f} max {s['max']:.4f} "
                  f"std {s['std']:.4f}")
        return 0
    ds = _dataset_for_checkpoint(model, args.dataset)
    probs = _check_compatible(model, ds)
    if probs:
        raise ConfigError(probs)
    view, _ = _restore_view(model, ds, int(model.meta.get("split_seed", 0)))
    step = train_config(cfg).step
    if args.what == "traces":
        ids = [r.id for r in view.records]
        rid = args.record if args.record is not None else ids[0]
        if rid not in ids:
            raise ConfigError([f"unknown record id {rid!r}"])
        paths = export_traces(model, view.records[ids.index(rid)], out / "traces" / rid, step)
        print(f"wrote {len(paths)} files to {out / 'traces' / rid}")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    families = [f"enc.{m}" for m in model.modalities] + ["context", "decoder"]
    for fam in families:
        proj = latent_projection(model, view.records, args.by, fam, step)
        stem = f"latent_{fam.replace('.', '_')}_{args.by}"
        proj.write_csv(out / f"{stem}.csv")
        proj.write_svg(out / f"{stem}.svg")
        print(f"{fam}: explained variance {proj.explained_variance[0]:.3f} + {proj.explained_variance[1]:.3f}")
    return 0


def cmd_compare(args) -> int:
    a = [float(v) for v in args.a.split(",")]
    b = [float(v) for v in args.b.split(",")]
    if len(a) < 2 or len(b) < 2:
        raise ConfigError(["each sample needs at least two values"])
    t, p = compare_runs(a, b)
    print(f"t = {t:.6f}, p = {p:.6g}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tauground", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config file")
        if out:
            p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--kind", choices=("toy", "lissajous"))
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model (or cross-validate with --runs)")
    common(p)
    p.add_argument("--dataset", help="dataset directory (default: generate from the config)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--modalities", help="comma-separated encoder modalities, e.g. vi or sm,vi")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--runs", type=int, default=1, help="cross-validate the checkpoint's config instead")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of BPTT gradients")
    common(p, out=False)
    p.add_argument("--dataset")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--modalities")
    p.add_argument("--seed", type=int)
    p.add_argument("--seq-len", type=int, default=12)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--corrupt", metavar="ARRAY", help="test hook: scale one analytic gradient by 1.1")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", help="timescale, trace or latent analyses of a checkpoint")
    p.add_argument("what", help=f"one of {', '.join(ANALYSES)}")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--by", default="action", help="record meta key used to colour latent plots")
    p.add_argument("--record", help="record id for traces (default: first record)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="Welch t-test between two comma-separated accuracy lists")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        for p in e.problems:
            print(f"error: {p}", file=sys.stderr)
        return 1
    except VerificationFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (MissingFileError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
