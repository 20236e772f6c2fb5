"""Synthetic concept-annotated speech-like corpora and their on-disk format.

An utterance is a short sequence of semantic concepts drawn from a seeded
Markov grammar. Each concept is spoken as one of its fixed words (optionally
preceded by a filler word); every character of the resulting transcript is
rendered as ``frames_per_char`` feature frames.

Renderings (character embeddings, concept words, concept embeddings) depend
only on ``render_seed`` and the *global* concept id, so two corpora sharing
concepts render them identically. Everything else depends on ``seed``.

Feature kinds:

``base``
    ``char_embedding + noise_sigma * N(0, 1)``; a spectrogram-like input
    that only carries acoustic (character) identity.
``pretrained_sim``
    ``char_embedding + 1.5 * concept_embedding + (noise_sigma / 4) * N(0, 1)``;
    stands in for self-supervised features, which carry higher-level
    information and have lower intra-class variance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

CHARSET = " abcdefghijklmnopqrstuvwxyz'-"
VOCAB_ASR = len(CHARSET) + 1
SPLITS = ("train", "dev", "test")
BASE = "base"
PRETRAINED_SIM = "pretrained_sim"
FEATURE_MAGIC = b"SLUF"
_HEADER = struct.Struct("<4sII")
_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_N_FILLERS = 6

MANIFEST = "manifest.json"
FORMAT_NAME = "slucost-corpus"
FORMAT_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    concept_inventory_size: int = 12
    words_per_concept: int = 2
    frames_per_char: int = 6
    feature_dim: int = 16
    noise_sigma: float = 0.5
    feature_kind: str = BASE
    seed: int = 0
    render_seed: int = 0
    min_concepts: int = 1
    max_concepts: int = 3
    filler_prob: float = 0.3
    feature_tag: str | None = None
    inventory: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        for name in ("n_train", "n_dev", "n_test", "concept_inventory_size", "words_per_concept",
                     "frames_per_char", "feature_dim", "min_concepts"):
            if getattr(self, name) <= 0:
                raise CorpusError(f"{name} must be positive")
        if self.max_concepts < self.min_concepts:
            raise CorpusError("max_concepts < min_concepts")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be nonnegative")
        if not 0.0 <= self.filler_prob <= 1.0:
            raise CorpusError("filler_prob must lie in [0, 1]")
        if self.feature_kind not in (BASE, PRETRAINED_SIM):
            raise CorpusError(f"unknown feature_kind {self.feature_kind!r}")
        if self.inventory is not None:
            if len(self.inventory) != self.concept_inventory_size or len(set(self.inventory)) != len(self.inventory):
                raise CorpusError("inventory must list concept_inventory_size distinct concept ids")
            object.__setattr__(self, "inventory", tuple(int(g) for g in self.inventory))

    @property
    def concept_ids(self) -> tuple[int, ...]:
        return self.inventory if self.inventory is not None else tuple(range(self.concept_inventory_size))

    @property
    def tag(self) -> str:
        if self.feature_tag:
            return self.feature_tag
        return "spectro" if self.feature_kind == BASE else "ssl"

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    char_transcript: list[int]
    concepts: list[int]
    intent: tuple[str, ...] | None = None

    @property
    def text(self) -> str:
        return "".join(CHARSET[c - 1] for c in self.char_transcript)


@dataclass
class Corpus:
    spec: CorpusSpec
    splits: dict[str, list[Utterance]]
    feature_tag: str = ""
    concept_names: list[str] = field(default_factory=list)

    @property
    def vocab_slu(self) -> int:
        return len(self.concept_names)

    @property
    def vocab_asr(self) -> int:
        return VOCAB_ASR

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def __getitem__(self, split: str) -> list[Utterance]:
        if split not in self.splits:
            raise CorpusError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.splits[split]


def concept_name(global_id: int) -> str:
    return f"c{global_id:03d}"


def intent_of(concept_labels: list[int], names: list[str]) -> tuple[str, str, str]:
    """(action, object, location): first concept, last concept, concept count."""
    if not concept_labels:
        return ("none", "none", "0")
    return (names[concept_labels[0]], names[concept_labels[-1]], str(len(concept_labels)))


class _World:
    """Renderings shared by every corpus with the same render seed."""

    def __init__(self, render_seed: int, feature_dim: int, words_per_concept: int) -> None:
        self.render_seed = render_seed
        self.feature_dim = feature_dim
        self.words_per_concept = words_per_concept
        rng = np.random.default_rng([render_seed, 0, feature_dim])
        self.char_emb = rng.normal(size=(VOCAB_ASR, feature_dim))
        frng = np.random.default_rng([render_seed, 3])
        self.fillers = [self._word(frng) for _ in range(_N_FILLERS)]

    @staticmethod
    def _word(rng: np.random.Generator) -> str:
        length = int(rng.integers(3, 6))
        out = [_LETTERS[rng.integers(26)]]
        while len(out) < length:
            ch = _LETTERS[rng.integers(26)]
            if ch != out[-1]:
                out.append(ch)
        return "".join(out)

    def concept_words(self, g: int) -> list[str]:
        rng = np.random.default_rng([self.render_seed, 1, g])
        return [self._word(rng) for _ in range(self.words_per_concept)]

    def concept_emb(self, g: int) -> np.ndarray:
        return np.random.default_rng([self.render_seed, 2, g, self.feature_dim]).normal(size=self.feature_dim)


def _char_labels(text: str) -> list[int]:
    return [CHARSET.index(ch) + 1 for ch in text]


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministically generate train/dev/test splits from ``spec``."""
    world = _World(spec.render_seed, spec.feature_dim, spec.words_per_concept)
    ids = spec.concept_ids
    n = len(ids)
    names = ["<blank>"] + [concept_name(g) for g in ids]
    words = [world.concept_words(g) for g in ids]
    cembs = np.stack([world.concept_emb(g) for g in ids])

    rng = np.random.default_rng(spec.seed)
    start = rng.dirichlet(np.full(n, 0.5))
    trans = rng.dirichlet(np.full(n, 0.5), size=n)
    if n > 1:
        np.fill_diagonal(trans, 0.0)
        trans /= trans.sum(axis=1, keepdims=True)

    splits: dict[str, list[Utterance]] = {}
    for split, size in spec.split_sizes().items():
        utts = []
        for i in range(size):
            k = int(rng.integers(spec.min_concepts, spec.max_concepts + 1))
            seq = [int(rng.choice(n, p=start))]
            while len(seq) < k:
                seq.append(int(rng.choice(n, p=trans[seq[-1]])))
            tokens: list[tuple[str, int | None]] = []
            for c in seq:
                if rng.random() < spec.filler_prob:
                    tokens.append((world.fillers[rng.integers(_N_FILLERS)], None))
                tokens.append((words[c][rng.integers(spec.words_per_concept)], c))
            text_parts, owner = [], []
            for w_idx, (word, c) in enumerate(tokens):
                if w_idx:
                    text_parts.append(" ")
                    owner.append(None)
                text_parts.append(word)
                owner.extend([c] * len(word))
            text = "".join(text_parts)
            chars = _char_labels(text)
            frames = np.repeat(world.char_emb[chars], spec.frames_per_char, axis=0)
            noise = rng.normal(size=frames.shape)
            if spec.feature_kind == PRETRAINED_SIM:
                semantic = np.zeros((len(chars), spec.feature_dim))
                for pos, c in enumerate(owner):
                    if c is not None:
                        semantic[pos] = cembs[c]
                frames = frames + 1.5 * np.repeat(semantic, spec.frames_per_char, axis=0)
                frames = frames + (spec.noise_sigma / 4.0) * noise
            else:
                frames = frames + spec.noise_sigma * noise
            labels = [c + 1 for c in seq]
            utts.append(Utterance(
                id=f"{split}-{i:05d}",
                features=frames.astype(np.float32),
                char_transcript=chars,
                concepts=labels,
                intent=intent_of(labels, names),
            ))
        splits[split] = utts
    return Corpus(spec=spec, splits=splits, feature_tag=spec.tag, concept_names=names)


def two_task_pair(spec_src: CorpusSpec, spec_tgt: CorpusSpec, overlap: int = 26) -> tuple[Corpus, Corpus]:
    """Source/target corpora whose inventories share exactly ``overlap`` concepts.

    Shared concepts come first in both inventories, so they carry identical
    label ids (1..overlap) and identical renderings in both corpora.
    """
    n_src, n_tgt = spec_src.concept_inventory_size, spec_tgt.concept_inventory_size
    if not 0 <= overlap <= min(n_src, n_tgt):
        raise CorpusError(f"overlap {overlap} exceeds inventory sizes ({n_src}, {n_tgt})")
    if spec_src.render_seed != spec_tgt.render_seed or spec_src.feature_dim != spec_tgt.feature_dim:
        raise CorpusError("paired corpora must share render_seed and feature_dim")
    src_inv = tuple(range(n_src))
    tgt_inv = tuple(range(overlap)) + tuple(range(n_src, n_src + n_tgt - overlap))
    src = generate_corpus(replace(spec_src, inventory=src_inv))
    tgt = generate_corpus(replace(spec_tgt, inventory=tgt_inv))
    return src, tgt


# ---------------------------------------------------------------------------
# Feature files and corpus directories


def write_features(path: Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    T, F = arr.shape
    path.write_bytes(_HEADER.pack(FEATURE_MAGIC, T, F) + arr.tobytes())


def read_features(path: Path, utt_id: str = "?") -> np.ndarray:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"utterance {utt_id}: cannot read feature file {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise CorpusError(f"utterance {utt_id}: truncated feature file {path}")
    magic, T, F = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise CorpusError(f"utterance {utt_id}: bad magic {magic!r} in {path}")
    if len(blob) != _HEADER.size + 4 * T * F:
        raise CorpusError(
            f"utterance {utt_id}: truncated feature file {path} "
            f"({len(blob) - _HEADER.size} payload bytes for {T}x{F} floats)"
        )
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(T, F).astype(np.float32)


def _spec_to_json(spec: CorpusSpec) -> dict:
    d = asdict(spec)
    if d["inventory"] is not None:
        d["inventory"] = list(d["inventory"])
    return d


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    directory = Path(directory)
    feats = directory / "feats"
    feats.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in SPLITS:
        entries = []
        for utt in corpus.splits.get(split, []):
            fname = f"feats/{utt.id}.sluf"
            write_features(directory / fname, utt.features)
            entries.append({
                "id": utt.id,
                "file": fname,
                "n_frames": int(utt.features.shape[0]),
                "chars": utt.char_transcript,
                "concepts": utt.concepts,
                "intent": list(utt.intent) if utt.intent is not None else None,
            })
        splits[split] = entries
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": _spec_to_json(corpus.spec),
        "feature_tag": corpus.feature_tag,
        "feature_dim": corpus.feature_dim,
        "charset": CHARSET,
        "concept_names": corpus.concept_names,
        "splits": splits,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise CorpusError(f"{directory}: no {MANIFEST}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"{directory}: corrupt manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise CorpusError(f"{directory}: not a corpus manifest")
    try:
        spec_d = dict(manifest["spec"])
        if spec_d.get("inventory") is not None:
            spec_d["inventory"] = tuple(spec_d["inventory"])
        spec = CorpusSpec(**spec_d)
        feature_dim = int(manifest["feature_dim"])
        splits = {}
        for split in SPLITS:
            utts = []
            for entry in manifest["splits"][split]:
                feats = read_features(directory / entry["file"], entry["id"])
                if feats.shape != (entry["n_frames"], feature_dim):
                    raise CorpusError(
                        f"utterance {entry['id']}: features {feats.shape} do not match "
                        f"manifest ({entry['n_frames']}, {feature_dim})"
                    )
                intent = tuple(entry["intent"]) if entry.get("intent") is not None else None
                utts.append(Utterance(entry["id"], feats, list(entry["chars"]), list(entry["concepts"]), intent))
            splits[split] = utts
        names = list(manifest["concept_names"])
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"{directory}: corrupt manifest: missing {exc}") from exc
    if feature_dim != spec.feature_dim:
        raise CorpusError(f"{directory}: manifest feature_dim disagrees with its spec")
    return Corpus(spec=spec, splits=splits, feature_tag=manifest["feature_tag"], concept_names=names)


def with_features(corpus: Corpus, transform, tag_suffix: str) -> Corpus:
    """Copy of ``corpus`` with every utterance's features passed through ``transform``."""
    splits = {
        name: [replace(u, features=np.asarray(transform(u.features), dtype=np.float32)) for u in utts]
        for name, utts in corpus.splits.items()
    }
    probe = next((u.features for utts in splits.values() for u in utts), None)
    spec = corpus.spec if probe is None else replace(corpus.spec, feature_dim=int(probe.shape[1]))
    return Corpus(spec=spec, splits=splits, feature_tag=corpus.feature_tag + tag_suffix,
                  concept_names=list(corpus.concept_names))
