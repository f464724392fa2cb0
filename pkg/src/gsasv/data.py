"""Embedding/metadata/trial I/O, trial generation, attribute encoding,
batching and the synthetic embedding generator.

File formats
------------
Embedding file (little-endian)::

    b"GSEB" | u16 version | u32 dim | u32 count
    count x ( u16 id_len | id (UTF-8) | dim x float32 )
    u32 CRC-32 of everything before it

Metadata file: UTF-8 TSV. ``#vocab <kind> <label,label,...>`` header lines
declare the closed label set of each attribute kind; data rows are
``utt_id speaker_id bonafide|spoof attack vocoder synthesizer wavegen``
with ``-`` for none.

Trial file: ``enroll_id test_id target|nontarget|spoof``.
Score file: trial columns plus the score printed with 6 decimals.
"""
from __future__ import annotations

import itertools
import struct
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from ._util import derive_seed
from .errors import ConfigError, DataError, FormatError, ProtocolError, VocabularyError

LABELS = ("target", "nontarget", "spoof")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
ATTR_KINDS = ("attack", "vocoder", "synthesizer", "wavegen")
NONE = "-"


# -- records ---------------------------------------------------------------------


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    kind: str  # "bonafide" | "spoof"
    attack: str | None = None
    vocoder: str | None = None
    synthesizer: str | None = None
    wavegen: str | None = None

    def __post_init__(self):
        if self.kind not in ("bonafide", "spoof"):
            raise DataError(f"{self.utt_id}: kind must be bonafide or spoof, got {self.kind!r}")
        if (self.kind == "bonafide") != (self.attack is None):
            raise DataError(f"{self.utt_id}: bonafide records have no attack label and spoof records need one")

    @property
    def is_bonafide(self) -> bool:
        return self.kind == "bonafide"

    def attribute(self, kind: str) -> str | None:
        if kind not in ATTR_KINDS:
            raise VocabularyError(f"unknown attribute kind {kind!r}; expected one of {ATTR_KINDS}")
        return getattr(self, kind)


@dataclass
class Metadata:
    records: list[UtteranceRecord]
    vocab: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.by_id = {}
        for r in self.records:
            if r.utt_id in self.by_id:
                raise DataError(f"duplicate utterance id {r.utt_id!r} in metadata")
            self.by_id[r.utt_id] = r

    def __getitem__(self, utt_id: str) -> UtteranceRecord:
        try:
            return self.by_id[utt_id]
        except KeyError:
            raise DataError(f"utterance {utt_id!r} not in metadata") from None

    def __len__(self):
        return len(self.records)


def read_metadata(path) -> Metadata:
    vocab: dict[str, list[str]] = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line.split()
                if parts[0] == "#vocab":
                    if len(parts) != 3 or parts[1] not in ATTR_KINDS:
                        raise FormatError(f"{path}:{lineno}: malformed vocabulary header")
                    vocab[parts[1]] = parts[2].split(",")
                continue
            cols = line.split("\t")
            if len(cols) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 tab-separated columns, got {len(cols)}")
            vals = [None if c == NONE else c for c in cols]
            try:
                rec = UtteranceRecord(*vals)
            except DataError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            for kind in ATTR_KINDS:
                label = rec.attribute(kind)
                if label is not None and kind in vocab and label not in vocab[kind]:
                    raise VocabularyError(f"{path}:{lineno}: {kind} label {label!r} not in declared vocabulary")
            records.append(rec)
    try:
        return Metadata(records, vocab)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_asvspoof_protocol(path) -> Metadata:
    """Read an ASVspoof-2019 style protocol (``speaker utt - system key``).

    Only the attack vocabulary is known from such files; it is the sorted
    set of system ids found.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            cols = line.split()
            if not cols:
                continue
            if len(cols) != 5 or cols[4] not in ("bonafide", "spoof"):
                raise FormatError(f"{path}:{lineno}: expected 'speaker utt - system bonafide|spoof'")
            speaker, utt, _, system, key = cols
            attack = None if key == "bonafide" else system
            try:
                records.append(UtteranceRecord(utt, speaker, key, attack))
            except DataError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    attacks = sorted({r.attack for r in records if r.attack is not None})
    try:
        return Metadata(records, {"attack": attacks})
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_metadata(meta: Metadata, path) -> None:
    lines = [f"#vocab {kind} {','.join(meta.vocab[kind])}" for kind in ATTR_KINDS if kind in meta.vocab]
    for r in meta.records:
        cols = [r.utt_id, r.speaker_id, r.kind, r.attack, r.vocoder, r.synthesizer, r.wavegen]
        lines.append("\t".join(NONE if c is None else c for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- embeddings -------------------------------------------------------------------

EMB_MAGIC = b"GSEB"
EMB_VERSION = 1


class EmbeddingStore:
    """Immutable-by-convention map ``utt_id -> float32 vector`` of one dimension."""

    def __init__(self, dim: int, entries: dict[str, np.ndarray] | None = None):
        self.dim = int(dim)
        self._entries: dict[str, np.ndarray] = {}
        for k, v in (entries or {}).items():
            self.add(k, v)

    def add(self, utt_id: str, vec) -> None:
        v = np.asarray(vec, dtype=np.float32).reshape(-1)
        if v.shape[0] != self.dim:
            raise DataError(f"embedding {utt_id!r} has {v.shape[0]} values, store dim is {self.dim}")
        if not np.all(np.isfinite(v)):
            raise DataError(f"embedding {utt_id!r} has non-finite values")
        if utt_id in self._entries:
            raise DataError(f"duplicate utterance id {utt_id!r}")
        v.setflags(write=False)
        self._entries[utt_id] = v

    def __getitem__(self, utt_id: str) -> np.ndarray:
        try:
            return self._entries[utt_id]
        except KeyError:
            raise DataError(f"no embedding for utterance {utt_id!r}") from None

    def __contains__(self, utt_id) -> bool:
        return utt_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> list[str]:
        return list(self._entries)

    def matrix(self, ids: Iterable[str]) -> np.ndarray:
        return np.stack([self[i] for i in ids]).astype(np.float64)


def write_embeddings(store: EmbeddingStore, path) -> None:
    out = bytearray(EMB_MAGIC)
    out += struct.pack("<HII", EMB_VERSION, store.dim, len(store))
    for utt_id in store.ids():
        raw = utt_id.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += store[utt_id].astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(out))


def read_embeddings(path, expect_dim: int | None = None) -> EmbeddingStore:
    data = Path(path).read_bytes()
    if len(data) < 18 or data[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic or too short)")
    version, dim, count = struct.unpack_from("<HII", data, 4)
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported embedding file version {version}")
    if expect_dim is not None and dim != expect_dim:
        raise FormatError(f"{path}: file dim {dim} does not match expected {expect_dim}")
    end = len(data) - 4
    pos = 14
    store = EmbeddingStore(dim)
    vec_bytes = 4 * dim
    for i in range(count):
        if pos + 2 > end:
            raise FormatError(f"{path}: record {i}: truncated before id length")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n > end:
            raise FormatError(f"{path}: record {i}: truncated id")
        try:
            utt_id = data[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: record {i}: id is not valid UTF-8") from None
        pos += n
        if pos + vec_bytes > end:
            have = max(end - pos, 0) // 4
            raise FormatError(f"{path}: record {i} ({utt_id!r}): expected {dim} values, found {have}")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
        pos += vec_bytes
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"{path}: record {i} ({utt_id!r}): non-finite value")
        if utt_id in store:
            raise FormatError(f"{path}: record {i}: duplicate utterance id {utt_id!r}")
        store.add(utt_id, vec)
    if pos != end:
        raise FormatError(f"{path}: {end - pos} unexpected bytes after record {count - 1}")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: checksum mismatch")
    return store


# -- trials -------------------------------------------------------------------------


class TrialPair(NamedTuple):
    enroll_id: str
    test_id: str
    label: str


def read_trials(path) -> list[TrialPair]:
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3 or cols[2] not in LABEL_INDEX:
                raise FormatError(f"{path}:{lineno}: expected 'enroll<TAB>test<TAB>target|nontarget|spoof'")
            trials.append(TrialPair(*cols))
    return trials


def write_trials(trials: Iterable[TrialPair], path) -> None:
    Path(path).write_text("".join(f"{t.enroll_id}\t{t.test_id}\t{t.label}\n" for t in trials), encoding="utf-8")


def format_score(x: float) -> str:
    # Python's fixed-point formatting rounds the exact binary value half-to-even
    return f"{x:.6f}"


def write_scores(trials: Iterable[TrialPair], scores, path) -> None:
    lines = [f"{t.enroll_id}\t{t.test_id}\t{t.label}\t{format_score(float(s))}\n" for t, s in zip(trials, scores)]
    Path(path).write_text("".join(lines), encoding="utf-8")


DEFAULT_CAP = 10**6


def generate_trials(
    records: Iterable[UtteranceRecord] | Metadata,
    mode: str = "full",
    seed: int = 0,
    caps: dict[str, int] | None = None,
    ordered: bool = False,
) -> list[TrialPair]:
    """Pair utterances into target / nontarget / spoof trials.

    Targets are same-speaker bonafide pairs, nontargets cross-speaker
    bonafide pairs, and spoof trials pair every bonafide enrollment with
    every spoofed utterance of the same speaker. Bonafide pairs are
    unordered (enrollment is the smaller id) unless ``ordered`` is set, in
    which case both directions are emitted.

    ``mode="sampled"`` keeps a uniform random subset of each class of at
    most ``caps[label]`` trials (order preserved).
    """
    recs = records.records if isinstance(records, Metadata) else list(records)
    bona = defaultdict(list)
    spoof = defaultdict(list)
    for r in recs:
        (bona if r.is_bonafide else spoof)[r.speaker_id].append(r.utt_id)
    if len(bona) < 2:
        raise ProtocolError(f"need at least 2 speakers with bonafide speech, got {len(bona)}")
    speaker_of = {u: s for s, us in bona.items() for u in us}

    pair = itertools.permutations if ordered else itertools.combinations
    targets = [TrialPair(a, b, "target") for s in sorted(bona) for a, b in pair(sorted(bona[s]), 2)]
    all_bona = sorted(speaker_of)
    nontargets = [TrialPair(a, b, "nontarget") for a, b in pair(all_bona, 2) if speaker_of[a] != speaker_of[b]]
    spoofs = [
        TrialPair(e, t, "spoof")
        for s in sorted(bona)
        for e in sorted(bona[s])
        for t in sorted(spoof.get(s, ()))
    ]
    if mode == "full":
        return targets + nontargets + spoofs
    if mode != "sampled":
        raise ConfigError(f"trial mode must be 'full' or 'sampled', got {mode!r}")
    caps = {**{k: DEFAULT_CAP for k in LABELS}, **(caps or {})}
    out = []
    for label, group in zip(LABELS, (targets, nontargets, spoofs)):
        cap = caps[label]
        if len(group) > cap:
            rng = np.random.default_rng(derive_seed(seed, f"trials:{label}"))
            keep = np.sort(rng.choice(len(group), size=cap, replace=False))
            group = [group[i] for i in keep]
        out.extend(group)
    return out


def split_trials(trials: list[TrialPair], eval_fraction: float, seed: int):
    """Random held-out split; each part keeps the original trial order."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    is_eval = np.zeros(len(trials), dtype=bool)
    is_eval[rng.permutation(len(trials))[: int(round(eval_fraction * len(trials)))]] = True
    return [t for t, e in zip(trials, is_eval) if not e], [t for t, e in zip(trials, is_eval) if e]


# -- targets ------------------------------------------------------------------------


def encode_attribute(rec: UtteranceRecord, kind: str, vocab: list[str]) -> np.ndarray:
    """One-hot of size ``len(vocab) + 1``; index 0 is the bonafide class."""
    vec = np.zeros(len(vocab) + 1)
    label = rec.attribute(kind)
    if rec.is_bonafide:
        vec[0] = 1.0
        return vec
    if label is None or label not in vocab:
        raise VocabularyError(f"{rec.utt_id}: {kind} label {label!r} not in vocabulary {vocab}")
    vec[vocab.index(label) + 1] = 1.0
    return vec


def make_reg_target(rec: UtteranceRecord, store_cm: EmbeddingStore, attr=None) -> np.ndarray:
    """Spoof embedding of ``rec``, optionally followed by an attribute one-hot."""
    if rec.utt_id not in store_cm:
        raise DataError(f"no CM embedding for utterance {rec.utt_id!r}")
    phi = np.asarray(store_cm[rec.utt_id], dtype=np.float64)
    if attr is None:
        return phi
    return np.concatenate([phi, np.asarray(attr, dtype=np.float64)])


@dataclass
class TargetSpec:
    """What auxiliary targets to attach to each trial (taken from the test side)."""

    cm: EmbeddingStore
    meta: Metadata
    attr_kind: str | None = None  # attribute-head labels
    reg_with_attr: bool = False  # append the attack one-hot to the regression target

    def reg_dim(self) -> int:
        return self.cm.dim + (len(self.meta.vocab["attack"]) + 1 if self.reg_with_attr else 0)

    def attr_dim(self) -> int | None:
        return None if self.attr_kind is None else len(self.meta.vocab[self.attr_kind]) + 1


@dataclass
class Batch:
    x: np.ndarray  # (n, 2 * asv_dim) rows = [enroll, test]
    y: np.ndarray  # (n, 3) one-hot
    reg: np.ndarray | None = None
    attr: np.ndarray | None = None
    index: np.ndarray | None = None  # positions in the trial list

    def __len__(self):
        return self.x.shape[0]


class TrialData:
    """Trials resolved against the stores once, then batched per epoch."""

    def __init__(self, trials: list[TrialPair], asv: EmbeddingStore, targets: TargetSpec | None = None):
        self.trials = list(trials)
        self.asv = asv
        self.targets = targets
        ids = {}
        for t in self.trials:
            for u in (t.enroll_id, t.test_id):
                if u not in ids:
                    if u not in asv:
                        raise DataError(f"trial {t.enroll_id} {t.test_id}: no ASV embedding for {u!r}")
                    ids[u] = len(ids)
        self._emb = np.stack([asv[u] for u in ids]).astype(np.float64) if ids else np.zeros((0, asv.dim))
        self._enroll = np.array([ids[t.enroll_id] for t in self.trials], dtype=np.int64)
        self._test = np.array([ids[t.test_id] for t in self.trials], dtype=np.int64)
        self._y = np.eye(3)[[LABEL_INDEX[t.label] for t in self.trials]] if self.trials else np.zeros((0, 3))
        self._reg = self._attr = None
        if targets is not None:
            reg_rows, attr_rows = {}, {}
            attack_vocab = targets.meta.vocab.get("attack")
            for t in self.trials:
                u = t.test_id
                if u in reg_rows:
                    continue
                rec = targets.meta[u]
                attack = encode_attribute(rec, "attack", attack_vocab) if targets.reg_with_attr else None
                try:
                    reg_rows[u] = make_reg_target(rec, targets.cm, attack)
                except DataError as exc:
                    raise DataError(f"trial {t.enroll_id} {t.test_id}: {exc}") from None
                if targets.attr_kind is not None:
                    attr_rows[u] = encode_attribute(rec, targets.attr_kind, targets.meta.vocab[targets.attr_kind])
            self._reg = np.stack([reg_rows[t.test_id] for t in self.trials])
            if targets.attr_kind is not None:
                self._attr = np.stack([attr_rows[t.test_id] for t in self.trials])

    def __len__(self):
        return len(self.trials)

    @property
    def input_dim(self) -> int:
        return 2 * self.asv.dim

    def rows(self, index: np.ndarray) -> Batch:
        x = np.concatenate([self._emb[self._enroll[index]], self._emb[self._test[index]]], axis=1)
        reg = None if self._reg is None else self._reg[index]
        attr = None if self._attr is None else self._attr[index]
        return Batch(x, self._y[index], reg, attr, index)

    def permutation(self, seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng(derive_seed(seed, f"shuffle:{epoch}")).permutation(len(self))

    def batches(self, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        order = self.permutation(seed, epoch) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            yield self.rows(order[start : start + batch_size])


def make_batches(trials, asv: EmbeddingStore, targets: TargetSpec | None, batch_size: int, seed: int, epoch: int):
    """Shuffled minibatches for one epoch; the final short batch is kept."""
    return list(TrialData(trials, asv, targets).batches(batch_size, seed, epoch))


# -- synthetic data -----------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_speakers: int = 10
    utts_per_speaker: int = 20
    n_attacks: int = 6
    spoofs_per_speaker_per_attack: int = 12
    asv_dim: int = 256
    cm_dim: int = 160
    speaker_scale: float = 1.0
    attack_scale: float = 1.0
    noise_sigma: float = 0.05
    seed: int = 0
    # extra speakers with bonafide speech only (a stand-in for supplementary
    # bonafide-only corpora)
    n_bonafide_only_speakers: int = 0
    n_vocoders: int = 9
    n_synthesizers: int = 11
    n_wavegens: int = 9

    def __post_init__(self):
        counts = [self.n_speakers, self.utts_per_speaker, self.asv_dim, self.cm_dim,
                  self.n_vocoders, self.n_synthesizers, self.n_wavegens]
        if min(counts) < 1 or min(self.n_attacks, self.spoofs_per_speaker_per_attack, self.n_bonafide_only_speakers) < 0:
            raise ConfigError("synthetic data counts must be positive")
        if self.n_attacks > 99:
            raise ConfigError("at most 99 attacks are supported")
        if self.speaker_scale <= 0 or self.attack_scale <= 0 or self.noise_sigma < 0:
            raise ConfigError("scales must be positive and noise_sigma non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "separable": SynthConfig(noise_sigma=0.05, speaker_scale=1.0, attack_scale=1.0, seed=2024),
    "tiny": SynthConfig(n_speakers=4, utts_per_speaker=5, n_attacks=3, spoofs_per_speaker_per_attack=2,
                        asv_dim=16, cm_dim=8, seed=7),
}


def synth_generate(cfg: SynthConfig):
    """Returns ``(asv_store, cm_store, metadata)``; fully determined by ``cfg``.

    ASV space: speaker mean + noise for bonafide speech, speaker mean +
    per-attack offset + noise for spoofed speech. CM space: one prototype
    for bonafide speech and one per attack, plus noise.
    """
    rng = np.random.default_rng(cfg.seed)
    n_total = cfg.n_speakers + cfg.n_bonafide_only_speakers
    speaker_means = cfg.speaker_scale * rng.standard_normal((n_total, cfg.asv_dim))
    attack_offsets = cfg.attack_scale * rng.standard_normal((cfg.n_attacks, cfg.asv_dim))
    cm_protos = cfg.attack_scale * rng.standard_normal((cfg.n_attacks + 1, cfg.cm_dim))

    vocab = {
        "attack": [f"A{a + 1:02d}" for a in range(cfg.n_attacks)],
        "vocoder": [f"V{i + 1:02d}" for i in range(cfg.n_vocoders)],
        "synthesizer": [f"S{i + 1:02d}" for i in range(cfg.n_synthesizers)],
        "wavegen": [f"W{i + 1:02d}" for i in range(cfg.n_wavegens)],
    }
    attr_of_attack = {
        kind: [vocab[kind][i] for i in rng.integers(0, len(vocab[kind]), size=cfg.n_attacks)]
        for kind in ("vocoder", "synthesizer", "wavegen")
    }

    asv = EmbeddingStore(cfg.asv_dim)
    cm = EmbeddingStore(cfg.cm_dim)
    records = []
    for s in range(n_total):
        spk = f"spk{s:03d}" if s < cfg.n_speakers else f"bon{s - cfg.n_speakers:03d}"
        for u in range(cfg.utts_per_speaker):
            utt = f"{spk}_bona_{u:03d}"
            asv.add(utt, speaker_means[s] + cfg.noise_sigma * rng.standard_normal(cfg.asv_dim))
            cm.add(utt, cm_protos[0] + cfg.noise_sigma * rng.standard_normal(cfg.cm_dim))
            records.append(UtteranceRecord(utt, spk, "bonafide"))
        if s >= cfg.n_speakers:
            continue
        for a in range(cfg.n_attacks):
            for k in range(cfg.spoofs_per_speaker_per_attack):
                utt = f"{spk}_A{a + 1:02d}_{k:03d}"
                asv.add(utt, speaker_means[s] + attack_offsets[a] + cfg.noise_sigma * rng.standard_normal(cfg.asv_dim))
                cm.add(utt, cm_protos[a + 1] + cfg.noise_sigma * rng.standard_normal(cfg.cm_dim))
                records.append(UtteranceRecord(
                    utt, spk, "spoof", vocab["attack"][a],
                    attr_of_attack["vocoder"][a], attr_of_attack["synthesizer"][a], attr_of_attack["wavegen"][a],
                ))
    return asv, cm, Metadata(records, vocab)
