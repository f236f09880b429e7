"""Datasets of multimodal sequences paired with token labels.

On disk a dataset is a directory holding ``manifest.json`` plus one
headerless CSV per record and modality (one timestep per row). Floats are
written with ``repr`` so a save/load round-trip is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .numeric import Rng

FORMAT_VERSION = 1

ARPABET = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY",
    "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P",
    "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
]
SIL = "SIL"
PUNCTUATION = [".", ",", "?", "!"]
DEFAULT_ALPHABET = ARPABET + [SIL] + PUNCTUATION

# CMU dictionary pronunciations (stress markers dropped) for the words the
# synthetic generators use.
LEXICON = {
    "push": ["P", "UH", "SH"],
    "pull": ["P", "UH", "L"],
    "lift": ["L", "IH", "F", "T"],
    "scoot": ["S", "K", "UW", "T"],
    "slide": ["S", "L", "AY", "D"],
    "shove": ["SH", "AH", "V"],
    "raise": ["R", "EY", "Z"],
    "drag": ["D", "R", "AE", "G"],
    "ball": ["B", "AO", "L"],
    "car": ["K", "AA", "R"],
    "cup": ["K", "AH", "P"],
    "box": ["B", "AA", "K", "S"],
    "duck": ["D", "AH", "K"],
    "mug": ["M", "AH", "G"],
    "red": ["R", "EH", "D"],
    "green": ["G", "R", "IY", "N"],
    "blue": ["B", "L", "UW"],
    "pink": ["P", "IH", "NG", "K"],
    "heavy": ["HH", "EH", "V", "IY"],
    "light": ["L", "AY", "T"],
}

DEFAULT_TOY_VOCAB = {
    "actions": ["push", "pull", "lift", "scoot", "slide"],
    "objects": ["ball", "car", "cup", "box", "duck"],
}


class DatasetError(ValueError):
    pass


class MissingFileError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class UnknownTokenError(DatasetError):
    pass


@dataclass
class SequenceRecord:
    id: str
    streams: dict
    label_text: list
    label_phonemes: list
    label_pos: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, s in self.streams.items():
            arr = np.asarray(s, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise DatasetError(f"record {self.id}: stream {name!r} must be a non-empty (T, dim) matrix")
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"record {self.id}: stream {name!r} has non-finite values")
            self.streams[name] = arr


@dataclass
class Dataset:
    records: list
    modality_dims: dict
    alphabet: list = field(default_factory=lambda: list(DEFAULT_ALPHABET))
    embedding_table: Optional[dict] = None
    normalization: Optional[dict] = None  # name -> (mins, maxs)

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise DatasetError("alphabet has duplicate tokens")
        if SIL not in self.alphabet:
            raise DatasetError("alphabet must contain SIL")
        for r in self.records:
            for name, dim in self.modality_dims.items():
                if name not in r.streams:
                    raise DatasetError(f"record {r.id}: missing stream {name!r}")
                if r.streams[name].shape[1] != dim:
                    raise DimensionMismatchError(
                        f"record {r.id}: stream {name!r} has dim {r.streams[name].shape[1]}, expected {dim}"
                    )

    def __len__(self):
        return len(self.records)

    def subset(self, indices) -> "Dataset":
        return replace(self, records=[self.records[i] for i in indices])

    @property
    def modalities(self):
        return list(self.modality_dims)


@dataclass(frozen=True)
class SplitIndices:
    train: list
    valid: list
    test: list


class Codec:
    """Maps token lists to target matrices and predictions back to tokens.

    ``phonetic`` uses one-hot rows over an alphabet and decodes by argmax.
    ``embedding`` uses table rows and decodes by cosine nearest neighbour.
    Ties go to the lower token index in both cases.
    """

    def __init__(self, kind: str, tokens, vectors=None):
        if kind not in ("phonetic", "embedding"):
            raise ValueError(f"unknown codec {kind!r}")
        self.kind = kind
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.vectors = None if vectors is None else np.asarray(vectors, dtype=np.float64)
        if kind == "embedding" and (self.vectors is None or self.vectors.shape[0] != len(self.tokens)):
            raise ValueError("embedding codec needs one vector per token")

    @classmethod
    def for_dataset(cls, ds: Dataset, kind: str) -> "Codec":
        if kind == "phonetic":
            return cls("phonetic", ds.alphabet)
        if not ds.embedding_table:
            raise DatasetError("dataset has no embedding table")
        toks = list(ds.embedding_table)
        return cls("embedding", toks, np.stack([ds.embedding_table[t] for t in toks]))

    @property
    def dim(self) -> int:
        return len(self.tokens) if self.kind == "phonetic" else self.vectors.shape[1]

    def label_of(self, record: SequenceRecord):
        return record.label_phonemes if self.kind == "phonetic" else record.label_text

    def encode(self, tokens) -> np.ndarray:
        if len(tokens) == 0:
            raise DatasetError("empty label")
        rows = []
        for tok in tokens:
            if tok not in self.index:
                raise UnknownTokenError(f"out-of-vocabulary token {tok!r}")
            rows.append(self.index[tok])
        if self.kind == "phonetic":
            out = np.zeros((len(rows), len(self.tokens)))
            out[np.arange(len(rows)), rows] = 1.0
            return out
        return self.vectors[rows].copy()

    def decode(self, pred) -> list:
        pred = np.asarray(pred, dtype=np.float64)
        if pred.size == 0:
            return []
        if pred.shape[1] != self.dim:
            raise ValueError(f"prediction has {pred.shape[1]} columns, codec expects {self.dim}")
        if self.kind == "phonetic":
            idx = np.argmax(pred, axis=1)
        else:
            norms = np.linalg.norm(self.vectors, axis=1) * np.linalg.norm(pred, axis=1)[:, None]
            sims = (pred @ self.vectors.T) / np.where(norms > 0, norms, 1.0)
            idx = np.argmax(sims, axis=1)
        return [self.tokens[i] for i in idx]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "tokens": self.tokens}
        if self.vectors is not None:
            d["vectors"] = self.vectors.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Codec":
        return cls(d["kind"], d["tokens"], d.get("vectors"))


def encode_label(record: SequenceRecord, codec: str, ds: Dataset) -> np.ndarray:
    c = Codec.for_dataset(ds, codec)
    try:
        return c.encode(c.label_of(record))
    except DatasetError as e:
        raise type(e)(f"record {record.id}: {e}") from None


def phonemize(words, lexicon=None, separator: str = SIL) -> list:
    """Concatenate word pronunciations, separating words with ``separator``."""
    lexicon = LEXICON if lexicon is None else lexicon
    out = []
    for i, w in enumerate(words):
        if w not in lexicon:
            raise UnknownTokenError(f"no pronunciation for {w!r}")
        if i:
            out.append(separator)
        out.extend(lexicon[w])
    return out


# ---------------------------------------------------------------- disk I/O


def _fmt_row(row) -> str:
    return ",".join(repr(float(v)) for v in row)


def _write_csv(path: Path, arr: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.atleast_2d(arr):
            fh.write(_fmt_row(row) + "\n")


def _read_csv(path: Path) -> np.ndarray:
    with open(path) as fh:
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return np.array(rows, dtype=np.float64)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "streams").mkdir(exist_ok=True)
    recs = []
    for i, r in enumerate(ds.records):
        files, lengths = {}, {}
        for name in ds.modality_dims:
            fname = f"streams/{i:05d}_{name}.csv"
            _write_csv(path / fname, r.streams[name])
            files[name] = fname
            lengths[name] = int(r.streams[name].shape[0])
        entry = {
            "id": r.id,
            "label_text": list(r.label_text),
            "label_phonemes": list(r.label_phonemes),
            "streams": files,
            "lengths": lengths,
        }
        if r.label_pos is not None:
            entry["label_pos"] = list(r.label_pos)
        if r.meta:
            entry["meta"] = r.meta
        recs.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "modalities": [{"name": n, "dim": int(d)} for n, d in ds.modality_dims.items()],
        "alphabet": list(ds.alphabet),
        "records": recs,
    }
    if ds.normalization:
        manifest["normalization"] = {
            n: {"min": lo.tolist(), "max": hi.tolist()} for n, (lo, hi) in ds.normalization.items()
        }
    if ds.embedding_table:
        save_embedding_table(ds.embedding_table, path / "embeddings.txt")
        manifest["embedding_file"] = "embeddings.txt"
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"no manifest.json in {path}")
    with open(mpath) as fh:
        m = json.load(fh)
    if m.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {m.get('format_version')!r}")
    dims = {e["name"]: int(e["dim"]) for e in m["modalities"]}
    alphabet = list(m["alphabet"])
    aset = set(alphabet)
    records = []
    for e in m["records"]:
        rid = e["id"]
        streams = {}
        for name, dim in dims.items():
            if name not in e["streams"]:
                raise MissingFileError(f"record {rid}: no stream file for modality {name!r}")
            f = path / e["streams"][name]
            if not f.exists():
                raise MissingFileError(f"record {rid}: missing stream file {f}")
            arr = _read_csv(f)
            if arr.ndim != 2 or arr.shape[1] != dim:
                raise DimensionMismatchError(f"record {rid}: stream {name!r} has wrong dimension")
            want = e.get("lengths", {}).get(name)
            if want is not None and int(want) != arr.shape[0]:
                raise DimensionMismatchError(
                    f"record {rid}: stream {name!r} has {arr.shape[0]} rows, manifest says {want}"
                )
            streams[name] = arr
        for tok in e["label_phonemes"]:
            if tok not in aset:
                raise UnknownTokenError(f"record {rid}: unknown phoneme {tok!r}")
        records.append(
            SequenceRecord(rid, streams, list(e["label_text"]), list(e["label_phonemes"]),
                           e.get("label_pos"), e.get("meta", {}))
        )
    norm = None
    if "normalization" in m:
        norm = {n: (np.array(v["min"]), np.array(v["max"])) for n, v in m["normalization"].items()}
    emb = None
    if "embedding_file" in m:
        emb = load_embedding_table(path / m["embedding_file"])
    return Dataset(records, dims, alphabet, emb, norm)


FIXTURE_DIR = Path(__file__).parent / "fixtures" / "toy6"


def load_fixture() -> Dataset:
    """Small bundled corpus (6 records, modalities au/sm/vi of dims 13/16/19)."""
    return load_dataset(FIXTURE_DIR)


def load_embedding_table(path) -> dict:
    """Word-vector text layout: ``token v1 v2 ...`` per line."""
    table = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise DatasetError(f"{path}:{n}: token without vector")
            table[parts[0]] = np.array([float(v) for v in parts[1:]])
    dims = {v.shape[0] for v in table.values()}
    if len(dims) > 1:
        raise DimensionMismatchError(f"{path}: embedding rows have mixed dimensions {sorted(dims)}")
    return table


def save_embedding_table(table: dict, path) -> None:
    with open(path, "w") as fh:
        for tok, vec in table.items():
            fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


@dataclass
class SynonymTable:
    entries: dict  # token -> (pos, [synonyms])

    def __post_init__(self):
        for tok, (pos, syns) in self.entries.items():
            if pos not in ("noun", "verb"):
                raise DatasetError(f"synonym entry {tok!r}: pos must be noun or verb")
            if tok in syns:
                raise DatasetError(f"synonym entry {tok!r} lists itself")


def load_synonym_table(path) -> SynonymTable:
    with open(path) as fh:
        raw = json.load(fh)
    return SynonymTable({k: (v["pos"], list(v["synonyms"])) for k, v in raw.items()})


# ------------------------------------------------------------ transforms


def _stream_extremes(ds: Dataset) -> dict:
    out = {}
    for name in ds.modality_dims:
        allv = np.concatenate([r.streams[name] for r in ds.records], axis=0)
        out[name] = (allv.min(axis=0), allv.max(axis=0))
    return out


def apply_normalization(ds: Dataset, scaling: dict) -> Dataset:
    recs = []
    for r in ds.records:
        streams = {}
        for name, s in r.streams.items():
            lo, hi = scaling[name]
            span = hi - lo
            const = span == 0
            streams[name] = np.where(const, 0.5, (s - lo) / np.where(const, 1.0, span))
        recs.append(replace(r, streams=streams))
    return replace(ds, records=recs, normalization={k: (v[0].copy(), v[1].copy()) for k, v in scaling.items()})


def normalize_streams(ds: Dataset) -> Dataset:
    """Per-dimension min-max scaling to [0, 1] with dataset-wide extremes."""
    if not ds.records:
        raise DatasetError("cannot normalize an empty dataset")
    return apply_normalization(ds, _stream_extremes(ds))


def augment(ds: Dataset, syn: SynonymTable, sigma: float, variants_per_record: int, rng: Rng,
            lexicon=None) -> Dataset:
    """Append synonym-substituted, noise-perturbed copies of every record.

    Label tokens tagged noun/verb (or, for untagged records, any token the
    table knows) are replaced by a seeded choice among its synonyms; the
    phoneme label is rebuilt from ``lexicon`` when a word changed.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = list(ds.records)
    for r in ds.records:
        for k in range(variants_per_record):
            words = list(r.label_text)
            changed = False
            for j, w in enumerate(words):
                pos = r.label_pos[j] if r.label_pos is not None else None
                if pos in ("noun", "verb") and w not in syn.entries:
                    raise DatasetError(f"record {r.id}: {pos} {w!r} missing from synonym table")
                if w in syn.entries and (pos is None or pos in ("noun", "verb")):
                    cands = syn.entries[w][1]
                    if cands:
                        words[j] = rng.choice(cands)
                        changed = True
            phon = phonemize(words, lexicon) if changed else list(r.label_phonemes)
            streams = {
                n: s + (rng.normal(0.0, sigma, s.shape) if sigma > 0 else 0.0) for n, s in r.streams.items()
            }
            out.append(SequenceRecord(f"{r.id}~aug{k + 1}", streams, words, phon,
                                      None if r.label_pos is None else list(r.label_pos), dict(r.meta)))
    return replace(ds, records=out)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(ds, fractions=(0.75, 0.125, 0.125), seed: int = 0) -> SplitIndices:
    """Seeded shuffle followed by a contiguous train/valid/test cut.

    ``ds`` may be a Dataset or a record count.
    """
    n = ds if isinstance(ds, int) else len(ds)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_valid = _round_half_up(n * fractions[1])
    n_test = _round_half_up(n * fractions[2])
    n_train = n - n_valid - n_test
    if n < 3 or n_valid < 1 or n_test < 1 or n_train < 1:
        raise DatasetError(f"dataset of {n} records is too small to split {fractions}")
    perm = Rng(seed).permutation(n).tolist()
    return SplitIndices(
        train=perm[:n_train],
        valid=perm[n_train:n_train + n_valid],
        test=perm[n_train + n_valid:],
    )


# -------------------------------------------------------------- generators


def gen_lissajous(a: float, b: float, delta: float, sigma: float, steps: int, transition_prob: float,
                  rng: Rng, patterns=None, cycles: int = 1, record_id: str = "lissajous") -> SequenceRecord:
    """Noisy Lissajous curve with probabilistic pattern switches.

    Each cycle spans ``steps`` samples with phase increment ``2*pi/steps``.
    At every cycle boundary the active pattern advances to the next entry of
    ``patterns`` (cyclically) with probability ``transition_prob``. The text
    label lists the active pattern id ``P<i>`` of every cycle; the token
    sequence is the same list behind a leading SIL, since the decoder's first
    output cannot depend on the context.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if not 0.0 <= transition_prob <= 1.0:
        raise ValueError("transition_prob must lie in [0, 1]")
    patterns = [(a, b)] if patterns is None else [tuple(p) for p in patterns]
    if (a, b) not in patterns:
        patterns = [(a, b)] + patterns
    cur = patterns.index((a, b))
    dphi = 2.0 * math.pi / steps
    rows, labels = [], []
    for c in range(cycles):
        if c > 0 and transition_prob > 0 and rng.random() < transition_prob:
            cur = (cur + 1) % len(patterns)
        pa, pb = patterns[cur]
        labels.append(f"P{cur}")
        t = np.arange(c * steps, (c + 1) * steps, dtype=np.float64)
        seg = np.stack([np.sin(pa * t * dphi + delta), np.sin(pb * t * dphi)], axis=1)
        if sigma > 0:
            seg = seg + rng.normal(0.0, sigma, seg.shape)
        rows.append(seg)
    return SequenceRecord(record_id, {"xy": np.concatenate(rows)}, list(labels), [SIL] + labels,
                          meta={"pattern": labels[0]})


def gen_lissajous_dataset(n_records: int, patterns, steps: int, cycles: int, sigma: float,
                          transition_prob: float, rng: Rng, delta: float = 0.0) -> Dataset:
    """Corpus of Lissajous records, each starting from a random pattern."""
    patterns = [tuple(p) for p in patterns]
    recs = []
    for i in range(n_records):
        start = patterns[int(rng.integers(len(patterns)))]
        r = gen_lissajous(start[0], start[1], delta, sigma, steps, transition_prob, rng,
                          patterns=patterns, cycles=cycles, record_id=f"liss{i:04d}")
        recs.append(r)
    alphabet = [SIL] + [f"P{i}" for i in range(len(patterns))]
    return Dataset(recs, {"xy": 2}, alphabet)


def _smooth_walk(rng: Rng, length: int, dim: int, smooth: int = 5) -> np.ndarray:
    steps = rng.normal(0.0, 1.0, (length + smooth, dim))
    walk = np.cumsum(steps, axis=0)
    kernel = np.ones(smooth) / smooth
    sm = np.stack([np.convolve(walk[:, j], kernel, mode="valid")[:length] for j in range(dim)], axis=1)
    sm -= sm.mean(axis=0)
    sm /= max(np.abs(sm).max(), 1e-12)
    return 0.5 + 0.4 * sm


def gen_toy_grounding(n_actions: int, n_objects: int, modality_dims: dict, seq_len: int, noise_sigma: float,
                      vocab=None, rng: Optional[Rng] = None, records_per_pair: int = 4,
                      pair_variation: float = 0.2, label_mode: str = "phonetic") -> Dataset:
    """Synthetic action x object grounding corpus.

    The first modality is keyed to the action and the second to the object
    (a third and later modalities see both), so naming the pair needs both
    streams. Every pair gets fixed prototypes (keyed smooth random walk plus
    a small pair-specific walk); records add Gaussian noise on top.
    ``label_mode`` ``phonetic`` spells the words in ARPAbet separated by
    SIL; ``words`` uses the words themselves as output tokens. Either way the
    token sequence starts with SIL.
    """
    if n_actions < 2 or n_objects < 2:
        raise ValueError("need at least 2 actions and 2 objects")
    if seq_len < 10:
        raise ValueError("seq_len must be >= 10")
    vocab = DEFAULT_TOY_VOCAB if vocab is None else vocab
    actions, objects = list(vocab["actions"]), list(vocab["objects"])
    if len(actions) < n_actions or len(objects) < n_objects:
        raise ValueError("vocab too small for the requested actions/objects")
    rng = Rng(0) if rng is None else rng
    names = list(modality_dims)
    if not names:
        raise ValueError("need at least one modality")
    keyed = {}
    for mi, name in enumerate(names):
        dim = modality_dims[name]
        if mi == 0:
            keyed[name] = [_smooth_walk(rng, seq_len, dim) for _ in range(n_actions)]
        elif mi == 1:
            keyed[name] = [_smooth_walk(rng, seq_len, dim) for _ in range(n_objects)]
        else:
            keyed[name] = [_smooth_walk(rng, seq_len, dim) for _ in range(n_actions * n_objects)]
    protos = {}
    for ai in range(n_actions):
        for oi in range(n_objects):
            for mi, name in enumerate(names):
                base = keyed[name][ai if mi == 0 else oi if mi == 1 else ai * n_objects + oi]
                wiggle = _smooth_walk(rng, seq_len, modality_dims[name]) - 0.5
                protos[(ai, oi, name)] = base + pair_variation * wiggle
    if label_mode == "phonetic":
        used = sorted({p for w in actions[:n_actions] + objects[:n_objects] for p in LEXICON[w]})
        alphabet = list(DEFAULT_ALPHABET)
        missing = [p for p in used if p not in alphabet]
        if missing:
            raise ValueError(f"lexicon phonemes outside the alphabet: {missing}")
    elif label_mode == "words":
        alphabet = [SIL] + actions[:n_actions] + objects[:n_objects]
    else:
        raise ValueError(f"unknown label_mode {label_mode!r}")
    recs = []
    for ai in range(n_actions):
        for oi in range(n_objects):
            words = [actions[ai], objects[oi]]
            # The decoder's first output cannot see the context yet, so every
            # utterance opens with a silence token.
            phon = [SIL] + (phonemize(words) if label_mode == "phonetic" else list(words))
            for k in range(records_per_pair):
                streams = {}
                for name in names:
                    p = protos[(ai, oi, name)]
                    streams[name] = p + (rng.normal(0.0, noise_sigma, p.shape) if noise_sigma > 0 else 0.0)
                recs.append(SequenceRecord(
                    f"a{ai}o{oi}r{k}", streams, words, phon, ["verb", "noun"],
                    {"action": actions[ai], "object": objects[oi], "pair": f"{ai}-{oi}"},
                ))
    return Dataset(recs, dict(modality_dims), alphabet)
