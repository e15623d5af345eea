"""Split construction, manifest files and in-memory datasets."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from . import oracle
from .language import NoUniqueExpression, TokenSequence, Vocabulary, generate_expression, \
    relation_of, swap_relation, tokenize
from .scene import ATTRIBUTES, CATEGORIES, GenConfig, Scene, SceneGenerationError, _rng, \
    generate_scene, render

GENERATOR_VERSION = "1"
SPLITS = ("train", "val", "test", "swap_test")


@dataclass(frozen=True)
class SplitConfig:
    train: int = 5000
    val: int = 500
    test: int = 500
    swap_pairs: int = 100
    max_tokens: int = 15
    seed_starts: tuple[int, int, int, int] = (0, 1_000_000, 2_000_000, 3_000_000)
    seed_span: int = 1_000_000
    gen: GenConfig = field(default_factory=GenConfig)

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {name: (s, s + self.seed_span) for name, s in zip(SPLITS, self.seed_starts)}

    def validate(self) -> None:
        spans = sorted(self.ranges().values())
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError(f"seed ranges overlap: [{a0},{a1}) and [{b0},{b1})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seed_starts"] = list(self.seed_starts)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class GroundingSample:
    seed: int
    split: str
    scene: Scene
    referent: int
    words: list[str]
    tokens: TokenSequence
    gen: GenConfig
    pair: int | None = None

    @property
    def target(self):
        return self.scene.objects[self.referent]

    @property
    def box(self) -> tuple[float, float, float, float]:
        return self.target.box(self.gen.image_size)

    @property
    def category(self) -> int:
        return self.target.category_id

    @property
    def attributes(self) -> list[int]:
        return self.target.attribute_bits()

    @property
    def relation(self) -> str | None:
        return relation_of(self.words)

    @cached_property
    def image(self) -> np.ndarray:
        return render(self.scene, self.gen)

    def record(self) -> dict:
        return {
            "seed": self.seed,
            "split": self.split,
            "referent": self.referent,
            "expression": " ".join(self.words),
            "token_ids": self.tokens.ids,
            "box": [round(v, 10) for v in self.box],
            "category": self.category,
            "attributes": self.attributes,
            "image": [self.gen.image_size, self.gen.image_size],
            "relation": self.relation,
            "pair": self.pair,
        }


def make_sample(seed: int, split: str, cfg: SplitConfig, vocab: Vocabulary) -> GroundingSample | None:
    """One sample per seed, or None when the seed yields no valid scene/expression."""
    try:
        scene = generate_scene(seed, cfg.gen)
    except SceneGenerationError:
        return None
    rng = _rng(seed, "referent")
    referent = int(rng.integers(len(scene.objects)))
    try:
        words = generate_expression(scene, referent, cfg.gen, rng)
    except NoUniqueExpression:
        return None
    return GroundingSample(seed, split, scene, referent, words,
                           tokenize(words, vocab, cfg.max_tokens), cfg.gen)


def make_swap_pair(seed: int, pair: int, cfg: SplitConfig, vocab: Vocabulary):
    """Two samples on one scene whose expressions differ only in the relation word."""
    try:
        scene = generate_scene(seed, cfg.gen, force_duplicate=True)
    except SceneGenerationError:
        return None
    objs = scene.objects
    twins = [i for i, o in enumerate(objs) if any(o.same_look(p) for p in objs if p is not o)]
    rng = _rng(seed, "referent")
    for referent in rng.permutation(twins):
        referent = int(referent)
        try:
            words = generate_expression(scene, referent, cfg.gen, rng)
        except NoUniqueExpression:
            continue
        swapped = swap_relation(words) if relation_of(words) else None
        if swapped is None:
            continue
        hit = oracle.resolve(swapped, scene, cfg.gen.image_size, cfg.gen.relation_margin)
        if len(hit) != 1 or hit[0] == referent:
            continue
        a = GroundingSample(seed, "swap_test", scene, referent, words,
                            tokenize(words, vocab, cfg.max_tokens), cfg.gen, pair)
        b = GroundingSample(seed, "swap_test", scene, hit[0], swapped,
                            tokenize(swapped, vocab, cfg.max_tokens), cfg.gen, pair)
        return a, b
    return None


def build_split(name: str, cfg: SplitConfig, vocab: Vocabulary) -> list[GroundingSample]:
    lo, hi = cfg.ranges()[name]
    out: list[GroundingSample] = []
    if name == "swap_test":
        for seed in range(lo, hi):
            if len(out) >= 2 * cfg.swap_pairs:
                break
            pair = make_swap_pair(seed, len(out) // 2, cfg, vocab)
            if pair:
                out.extend(pair)
        want = 2 * cfg.swap_pairs
    else:
        want = {"train": cfg.train, "val": cfg.val, "test": cfg.test}[name]
        for seed in range(lo, hi):
            if len(out) >= want:
                break
            s = make_sample(seed, name, cfg, vocab)
            if s is not None:
                out.append(s)
    if len(out) < want:
        raise RuntimeError(f"split {name}: only {len(out)} of {want} samples in its seed range")
    return out


def build_splits(cfg: SplitConfig = SplitConfig(), vocab: Vocabulary | None = None,
                 names=SPLITS) -> dict[str, list[GroundingSample]]:
    cfg.validate()
    vocab = vocab or Vocabulary.default()
    return {name: build_split(name, cfg, vocab) for name in names}


# -- manifest ------------------------------------------------------------------

def manifest_header(cfg: SplitConfig, vocab: Vocabulary) -> dict:
    h = hashlib.sha256()
    h.update(cfg.digest().encode())
    h.update(json.dumps(vocab.words).encode())
    return {
        "kind": "header",
        "generator_version": GENERATOR_VERSION,
        "config_hash": h.hexdigest(),
        "config": cfg.to_dict(),
        "seed_ranges": {k: list(v) for k, v in cfg.ranges().items()},
        "vocabulary": vocab.words,
        "categories": list(CATEGORIES),
        "attributes": list(ATTRIBUTES),
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write(path: str, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path: str, header: dict, samples: list[GroundingSample]) -> None:
    lines = [_dumps(header)] + [_dumps(s.record()) for s in samples]
    atomic_write(path, "\n".join(lines) + "\n")


def read_manifest(path: str) -> tuple[dict, list[dict]]:
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("kind") != "header":
        raise ValueError(f"{path}: missing manifest header")
    return lines[0], lines[1:]


def split_config_from_header(header: dict) -> SplitConfig:
    c = dict(header["config"])
    gen = dict(c.pop("gen"))
    for key in ("small_px", "medium_px", "large_px"):
        gen[key] = tuple(gen[key])
    c["seed_starts"] = tuple(c["seed_starts"])
    return SplitConfig(gen=GenConfig(**gen), **c)


def samples_from_manifest(path: str) -> tuple[dict, list[GroundingSample]]:
    """Regenerate every scene named in a manifest; stored boxes are cross-checked."""
    header, records = read_manifest(path)
    cfg = split_config_from_header(header)
    vocab = Vocabulary(header["vocabulary"])
    out = []
    for r in records:
        scene = generate_scene(r["seed"], cfg.gen, force_duplicate=r["split"] == "swap_test")
        words = r["expression"].split()
        s = GroundingSample(r["seed"], r["split"], scene, r["referent"], words,
                            tokenize(words, vocab, cfg.max_tokens), cfg.gen, r["pair"])
        if not np.allclose(s.box, r["box"], atol=1e-9):
            raise ValueError(f"seed {r['seed']}: regenerated box differs from manifest")
        out.append(s)
    return header, out


# -- dense arrays for training ------------------------------------------------------

@dataclass
class GroundingDataset:
    images: np.ndarray  # uint8 (N, H, W, 3)
    token_ids: np.ndarray  # int (N, max_tokens + 1)
    pad_mask: np.ndarray  # bool (N, max_tokens + 1)
    boxes: np.ndarray  # (N, 4) cx, cy, w, h
    categories: np.ndarray  # (N,)
    attributes: np.ndarray  # (N, N_a)
    relations: list
    pairs: np.ndarray  # (N,), -1 where unpaired
    seeds: np.ndarray
    expressions: list

    @classmethod
    def from_samples(cls, samples: list[GroundingSample]) -> "GroundingDataset":
        if not samples:
            raise ValueError("empty split")
        return cls(
            images=np.stack([s.image for s in samples]),
            token_ids=np.array([s.tokens.ids for s in samples], dtype=np.int64),
            pad_mask=np.array([s.tokens.pad_mask for s in samples], dtype=bool),
            boxes=np.array([s.box for s in samples], dtype=np.float64),
            categories=np.array([s.category for s in samples], dtype=np.int64),
            attributes=np.array([s.attributes for s in samples], dtype=np.float64),
            relations=[s.relation for s in samples],
            pairs=np.array([-1 if s.pair is None else s.pair for s in samples], dtype=np.int64),
            seeds=np.array([s.seed for s in samples], dtype=np.int64),
            expressions=[" ".join(s.words) for s in samples],
        )

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, idx) -> "GroundingDataset":
        idx = np.asarray(idx)
        return GroundingDataset(
            self.images[idx], self.token_ids[idx], self.pad_mask[idx], self.boxes[idx],
            self.categories[idx], self.attributes[idx], [self.relations[i] for i in idx],
            self.pairs[idx], self.seeds[idx], [self.expressions[i] for i in idx])

    def relational(self) -> "GroundingDataset":
        return self.subset([i for i, r in enumerate(self.relations) if r is not None])
