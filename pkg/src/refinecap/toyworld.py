"""Synthetic object scenes standing in for detector features and COCO captions.

A scene is a handful of objects, each a (shape, color, size) triple.  Its
feature matrix has one row per object: the sum of fixed per-attribute
embeddings plus Gaussian noise, zero-padded to ``M`` rows.  Five reference
captions are realized from paraphrase frames around one canonical
description, so the captions are learnable from the features alone.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, DataConfig, ModelConfig

SHAPES = (
    "circle", "square", "triangle", "star", "heart", "cross", "ring",
    "diamond", "hexagon", "oval", "arrow", "moon", "pentagon", "spiral",
)
COLORS = (
    "red", "green", "blue", "yellow", "purple", "orange",
    "black", "white", "pink", "brown", "gray", "cyan",
)
SIZES = ("small", "big")

# Closed word classes standing in for a POS tagger.
NOUNS = frozenset(SHAPES) | {"picture", "scene", "image"}
ADJECTIVES = frozenset(COLORS) | frozenset(SIZES)
VERBS = frozenset({"see", "showing"})
CONTENT_WORDS = NOUNS | ADJECTIVES | VERBS

FRAMES = (
    "{d}",
    "there is {d}",
    "a picture of {d}",
    "we can see {d}",
    "{d} in the scene",
    "an image showing {d}",
)
N_REFERENCES = 5

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
SPECIALS = (PAD, START, END, UNK)
PAD_ID, START_ID, END_ID, UNK_ID = range(4)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True, order=True)
class SceneObject:
    shape: str
    color: str
    size: str

    def phrase(self) -> str:
        return f"a {self.size} {self.color} {self.shape}"


@dataclass
class Scene:
    scene_id: str
    objects: list[SceneObject]

    def canonical_objects(self) -> list[SceneObject]:
        return sorted(
            self.objects,
            key=lambda o: (SIZES.index(o.size) * -1, SHAPES.index(o.shape), COLORS.index(o.color)),
        )

    def relations(self) -> list[str]:
        objs = self.canonical_objects()
        return ["above" if a.size != b.size else "beside" for a, b in zip(objs, objs[1:])]

    def description(self) -> str:
        objs = self.canonical_objects()
        parts = [objs[0].phrase()]
        for rel, obj in zip(self.relations(), objs[1:]):
            parts += [rel, obj.phrase()]
        return " ".join(parts)


@dataclass
class VocabPair:
    caption_vocab: list[str]
    tag_vocab: list[str]
    scatter_index: list[int]
    _lookup: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._lookup = {w: i for i, w in enumerate(self.caption_vocab)}
        if tuple(self.caption_vocab[:4]) != SPECIALS:
            raise ConfigError("caption vocabulary must start with the reserved tokens")
        if len(set(self.scatter_index)) != len(self.scatter_index):
            raise ConfigError("scatter index is not injective")
        for k, j in enumerate(self.scatter_index):
            if not 4 <= j < len(self.caption_vocab) or self.caption_vocab[j] != self.tag_vocab[k]:
                raise ConfigError(f"scatter index entry {k} -> {j} does not name tag word {self.tag_vocab[k]!r}")

    @property
    def K(self) -> int:
        return len(self.tag_vocab)

    def __len__(self) -> int:
        return len(self.caption_vocab)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._lookup.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == END_ID:
                break
            if i in (PAD_ID, START_ID):
                continue
            out.append(self.caption_vocab[i])
        return out

    def tag_labels(self, references: Iterable[Sequence[str]]) -> np.ndarray:
        present = {t for ref in references for t in ref}
        return np.array([1.0 if w in present else 0.0 for w in self.tag_vocab])

    def to_json(self) -> dict:
        return {
            "caption_vocab": self.caption_vocab,
            "tag_vocab": self.tag_vocab,
            "scatter_index": self.scatter_index,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VocabPair":
        return cls(list(obj["caption_vocab"]), list(obj["tag_vocab"]), [int(j) for j in obj["scatter_index"]])


_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


def build_vocabs(
    corpus: Iterable[Sequence[str]],
    min_count: int,
    K: int,
    M: int,
    content_words: frozenset[str] = CONTENT_WORDS,
) -> VocabPair:
    if K % M:
        raise ConfigError(f"K={K} is not divisible by M={M}")
    counts = Counter(t for sent in corpus for t in sent)
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS), key=lambda w: (-counts[w], w))
    caption_vocab = list(SPECIALS) + kept
    eligible = [w for w in kept if w in content_words]
    if K > len(eligible):
        raise ConfigError(f"K={K} exceeds the {len(eligible)} eligible content words")
    tag_vocab = eligible[:K]
    pos = {w: i for i, w in enumerate(caption_vocab)}
    return VocabPair(caption_vocab, tag_vocab, [pos[w] for w in tag_vocab])


# --------------------------------------------------------------------------
# generation


def _attribute_embeddings(seed: int, d_raw: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0])
    return {
        "shape": rng.standard_normal((len(SHAPES), d_raw)),
        "color": rng.standard_normal((len(COLORS), d_raw)),
        "size": rng.standard_normal((len(SIZES), d_raw)),
    }


def sample_scene(rng: np.random.Generator, scene_id: str, max_objects: int) -> Scene:
    n = int(rng.integers(1, max_objects + 1))
    objs: list[SceneObject] = []
    while len(objs) < n:
        o = SceneObject(
            SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))], SIZES[rng.integers(len(SIZES))]
        )
        if o not in objs:
            objs.append(o)
    return Scene(scene_id, objs)


def scene_features(
    scene: Scene, emb: dict[str, np.ndarray], M: int, noise: float, rng: np.random.Generator
) -> np.ndarray:
    """Rows in random order (objects are a set), zero padding up to ``M``."""
    d_raw = emb["shape"].shape[1]
    feats = np.zeros((M, d_raw))
    for row, idx in enumerate(rng.permutation(len(scene.objects))):
        o = scene.objects[idx]
        feats[row] = (
            emb["shape"][SHAPES.index(o.shape)]
            + emb["color"][COLORS.index(o.color)]
            + emb["size"][SIZES.index(o.size)]
            + rng.normal(0.0, noise, d_raw)
        )
    return feats


def scene_references(scene: Scene, rng: np.random.Generator) -> list[str]:
    frames = rng.choice(len(FRAMES), size=N_REFERENCES, replace=False)
    d = scene.description()
    return [FRAMES[i].format(d=d) for i in frames]


@dataclass
class SceneRecord:
    scene_id: str
    features: np.ndarray
    valid_count: int
    references: list[list[str]]
    tag_labels: np.ndarray | None = None
    objects: list[SceneObject] | None = None


@dataclass
class Dataset:
    records: dict[str, SceneRecord]
    splits: dict[str, list[str]]
    vocab: VocabPair

    def split(self, name: str) -> list[SceneRecord]:
        return [self.records[i] for i in self.splits[name]]


def make_dataset(seed: int, n_scenes: int, data: DataConfig, model: ModelConfig) -> Dataset:
    """Build the whole dataset in memory; deterministic in ``seed``."""
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    if data.max_objects > model.M:
        raise ConfigError(f"data.max_objects={data.max_objects} exceeds model.M={model.M}")
    emb = _attribute_embeddings(seed, model.D_raw)
    records: dict[str, SceneRecord] = {}
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, 1, i])
        scene = sample_scene(rng, f"s{i:05d}", data.max_objects)
        feats = scene_features(scene, emb, model.M, data.noise, rng)
        refs = [tokenize(r)[: model.T_max] for r in scene_references(scene, rng)]
        records[scene.scene_id] = SceneRecord(scene.scene_id, feats, len(scene.objects), refs, objects=scene.objects)

    order = [f"s{i:05d}" for i in np.random.default_rng([seed, 2]).permutation(n_scenes)]
    n_train = int(round(n_scenes * data.train_frac))
    n_val = int(round(n_scenes * data.val_frac))
    splits = {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    for name in splits:
        splits[name].sort()

    corpus = [ref for sid in splits["train"] for ref in records[sid].references]
    vocab = build_vocabs(corpus, data.min_count, model.K, model.M)
    for rec in records.values():
        rec.tag_labels = vocab.tag_labels(rec.references)
    return Dataset(records, splits, vocab)


def write_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.jsonl", "w") as fh:
        for sid, rec in ds.records.items():
            fh.write(
                json.dumps({"scene_id": sid, "valid_count": rec.valid_count, "features": rec.features.tolist()}) + "\n"
            )
    with open(out / "captions.jsonl", "w") as fh:
        for sid, rec in ds.records.items():
            row = {
                "scene_id": sid,
                "references": [" ".join(r) for r in rec.references],
                "tag_labels": [int(k) for k in np.flatnonzero(rec.tag_labels)],
            }
            if rec.objects is not None:
                row["objects"] = [[o.shape, o.color, o.size] for o in rec.objects]
            fh.write(json.dumps(row) + "\n")
    (out / "vocab.json").write_text(json.dumps(ds.vocab.to_json(), indent=1) + "\n")
    for name, ids in ds.splits.items():
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))


def generate_dataset(seed: int, n_scenes: int, data: DataConfig, model: ModelConfig, out_dir: str | Path) -> Dataset:
    ds = make_dataset(seed, n_scenes, data, model)
    write_dataset(ds, out_dir)
    return ds


def load_features(path: str | Path, M: int | None = None) -> list[tuple[str, np.ndarray, int]]:
    """Read a features.jsonl file; rows are zero-padded to ``M`` when given."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            feats = np.asarray(row["features"], dtype=np.float64)
            if feats.ndim != 2:
                raise ValueError(f"{path}:{lineno}: features must be a 2-D array")
            valid = int(row.get("valid_count", feats.shape[0]))
            if M is not None:
                if feats.shape[0] > M:
                    if np.any(feats[M:]):
                        raise ValueError(f"{path}:{lineno}: {feats.shape[0]} rows exceed M={M}")
                    feats = feats[:M]
                if feats.shape[0] < M:
                    feats = np.vstack([feats, np.zeros((M - feats.shape[0], feats.shape[1]))])
                valid = min(valid, M)
            feats[valid:] = 0.0
            out.append((row["scene_id"], feats, valid))
    return out


def load_dataset(data_dir: str | Path, M: int | None = None) -> Dataset:
    d = Path(data_dir)
    vocab = VocabPair.from_json(json.loads((d / "vocab.json").read_text()))
    records: dict[str, SceneRecord] = {}
    for sid, feats, valid in load_features(d / "features.jsonl", M):
        records[sid] = SceneRecord(sid, feats, valid, [])
    with open(d / "captions.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            rec = records[row["scene_id"]]
            rec.references = [tokenize(r) for r in row["references"]]
            labels = np.zeros(vocab.K)
            labels[row["tag_labels"]] = 1.0
            rec.tag_labels = labels
            if "objects" in row:
                rec.objects = [SceneObject(*o) for o in row["objects"]]
    splits = {}
    for name in SPLITS:
        p = d / f"{name}.txt"
        splits[name] = p.read_text().split() if p.exists() else []
    return Dataset(records, splits, vocab)
