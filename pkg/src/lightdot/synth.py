"""Seeded generator of paired (regions, caption) corpora with a known concept structure.

Each pair instantiates 2-5 concepts. Every concept contributes one region
(prototype + gaussian noise, random box, smoothed one-hot class distribution)
and at least one of its exclusive caption words, so the concept set can be
read off either modality. Concept sets are unique across the corpus.

On-disk layout of a corpus directory::

    manifest.json   format version, generator config, seed, counts, vocabulary,
                    concept specs, per-pair concept sets
    regions.ldrf    region records (see ``write_regions``)
    captions.ldtx   caption records (see ``write_captions``)
    train.ids, val.ids, test.ids   one pair id per line
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .encoders import CLS_ID, FIRST_WORD_ID, GEOM_DIM, RegionSequence, TokenSequence

FORMAT_VERSION = 1
REGION_MAGIC = b"LDRF"
TEXT_MAGIC = b"LDTX"
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")
SPLITS = ("train", "val", "test")


class CorpusFormatError(ValueError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


@dataclass(frozen=True)
class SynthConfig:
    pairs: int = 512
    concepts: int = 16
    vocab: int = 128
    classes: int = 16
    feat_dim: int = 24
    noise: float = 0.1
    seed: int = 42
    split: tuple[int, int, int] = (448, 32, 32)
    min_concepts: int = 2
    max_concepts: int = 5
    min_len: int = 4
    max_len: int = 12
    words_per_concept: int = 3
    smoothing: float = 0.05

    def check(self) -> None:
        """Raise ValueError naming the first violated feasibility bound."""
        need = FIRST_WORD_ID + self.concepts * self.words_per_concept + 1
        if self.words_per_concept < 2:
            raise ValueError("words_per_concept must be >= 2 (exclusive tokens per concept)")
        if self.vocab < need:
            raise ValueError(f"vocab {self.vocab} < {need} (specials + concepts*words_per_concept + 1 filler)")
        if not 1 <= self.min_concepts <= self.max_concepts <= self.concepts:
            raise ValueError("need 1 <= min_concepts <= max_concepts <= concepts")
        if self.max_len < self.max_concepts or self.min_len < 1 or self.min_len > self.max_len:
            raise ValueError("need 1 <= min_len <= max_len and max_len >= max_concepts")
        available = sum(comb(self.concepts, k) for k in range(self.min_concepts, self.max_concepts + 1))
        if self.pairs > available:
            raise ValueError(f"pairs {self.pairs} > {available} distinct concept sets")
        if sum(self.split) != self.pairs or min(self.split) < 0:
            raise ValueError(f"split sizes {self.split} must be nonnegative and sum to pairs {self.pairs}")
        if self.noise < 0 or not 0 <= self.smoothing < 1 or self.classes < 1 or self.feat_dim < 1:
            raise ValueError("noise >= 0, 0 <= smoothing < 1, classes >= 1, feat_dim >= 1 required")


@dataclass
class ConceptSpec:
    concept_id: int
    prototype: np.ndarray
    class_id: int
    tokens: list[int]

    def __eq__(self, other):
        return (isinstance(other, ConceptSpec) and self.concept_id == other.concept_id
                and self.class_id == other.class_id and self.tokens == other.tokens
                and np.array_equal(self.prototype, other.prototype))


@dataclass
class PairedExample:
    pair_id: int
    regions: RegionSequence
    tokens: TokenSequence
    concepts: tuple[int, ...]


@dataclass
class CorpusSplit:
    train: list[int]
    val: list[int]
    test: list[int]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("splits overlap")

    def get(self, name: str) -> list[int]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class Corpus:
    config: SynthConfig
    vocab: list[str]
    concepts: list[ConceptSpec]
    examples: dict[int, PairedExample]
    splits: CorpusSplit
    extra: dict = field(default_factory=dict)

    def ids(self, split: str | None = None) -> list[int]:
        return sorted(self.examples) if split is None else list(self.splits.get(split))

    def regions(self, ids) -> list[RegionSequence]:
        return [self.examples[i].regions for i in ids]

    def texts(self, ids) -> list[TokenSequence]:
        return [self.examples[i].tokens for i in ids]

    def token_id(self, word: str) -> int:
        if not hasattr(self, "_lookup"):
            self._lookup = {w: i for i, w in enumerate(self.vocab)}
        return self._lookup.get(word, SPECIAL_TOKENS.index("[UNK]"))

    def tokenize(self, text: str, max_tokens: int | None = None) -> TokenSequence:
        words = text.split()
        if max_tokens is not None:
            words = words[:max_tokens]
        if not words:
            raise ValueError("empty query text")
        return TokenSequence([CLS_ID] + [self.token_id(w) for w in words])

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        if (self.config, self.vocab, self.concepts, self.splits) != (other.config, other.vocab, other.concepts,
                                                                     other.splits):
            return False
        if self.examples.keys() != other.examples.keys():
            return False
        return all(a.regions == b.regions and a.tokens == b.tokens and a.concepts == b.concepts
                   for a, b in ((self.examples[k], other.examples[k]) for k in self.examples))


def build_vocab(cfg: SynthConfig) -> list[str]:
    words = list(SPECIAL_TOKENS)
    for c in range(cfg.concepts):
        words += [f"c{c}w{j}" for j in range(cfg.words_per_concept)]
    words += [f"f{j}" for j in range(cfg.vocab - len(words))]
    return words


def make_concepts(cfg: SynthConfig, rng: np.random.Generator) -> list[ConceptSpec]:
    out = []
    for c in range(cfg.concepts):
        first = FIRST_WORD_ID + c * cfg.words_per_concept
        out.append(ConceptSpec(c, rng.normal(size=cfg.feat_dim), c % cfg.classes,
                               list(range(first, first + cfg.words_per_concept))))
    return out


def _box(rng: np.random.Generator) -> np.ndarray:
    w, h = rng.uniform(0.05, 0.5, size=2)
    x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
    return np.array([x1, y1, x1 + w, y1 + h, w, h, w * h])


def _class_dist(cfg: SynthConfig, class_id: int) -> np.ndarray:
    if cfg.classes == 1:
        return np.ones(1)
    dist = np.full(cfg.classes, cfg.smoothing / (cfg.classes - 1))
    dist[class_id] = 1.0 - cfg.smoothing
    return dist


def make_regions(cfg: SynthConfig, concepts: list[ConceptSpec], concept_set, rng) -> RegionSequence:
    order = rng.permutation(np.asarray(concept_set))
    feats = np.stack([concepts[c].prototype + cfg.noise * rng.normal(size=cfg.feat_dim) for c in order])
    boxes = np.stack([_box(rng) for _ in order])
    dist = np.stack([_class_dist(cfg, concepts[c].class_id) for c in order])
    return RegionSequence(feats, boxes, dist)


def make_caption(cfg: SynthConfig, concepts: list[ConceptSpec], concept_set, rng) -> TokenSequence:
    fillers = np.arange(FIRST_WORD_ID + cfg.concepts * cfg.words_per_concept, cfg.vocab)
    length = int(rng.integers(max(cfg.min_len, len(concept_set)), cfg.max_len + 1))
    words = [int(rng.choice(concepts[c].tokens)) for c in concept_set]
    for _ in range(length - len(words)):
        if rng.random() < 0.5:
            words.append(int(rng.choice(concepts[int(rng.choice(concept_set))].tokens)))
        else:
            words.append(int(rng.choice(fillers)))
    return TokenSequence([CLS_ID] + [words[i] for i in rng.permutation(len(words))])


def generate_corpus(cfg: SynthConfig = SynthConfig()) -> Corpus:
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    concepts = make_concepts(cfg, rng)
    examples: dict[int, PairedExample] = {}
    seen: set[tuple[int, ...]] = set()
    while len(examples) < cfg.pairs:
        k = int(rng.integers(cfg.min_concepts, cfg.max_concepts + 1))
        cset = tuple(sorted(int(c) for c in rng.choice(cfg.concepts, size=k, replace=False)))
        if cset in seen:
            continue
        seen.add(cset)
        pid = len(examples)
        examples[pid] = PairedExample(pid, make_regions(cfg, concepts, cset, rng),
                                      make_caption(cfg, concepts, cset, rng), cset)
    order = [int(i) for i in rng.permutation(cfg.pairs)]
    a, b = cfg.split[0], cfg.split[0] + cfg.split[1]
    splits = CorpusSplit(sorted(order[:a]), sorted(order[a:b]), sorted(order[b:]))
    return Corpus(cfg, build_vocab(cfg), concepts, examples, splits)


def sample_regions(corpus: Corpus, n: int, seed: int) -> list[RegionSequence]:
    """Extra region sequences from the corpus concepts, with no uniqueness constraint.

    Used to grow benchmark candidate pools beyond the corpus size.
    """
    cfg = corpus.config
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(cfg.min_concepts, cfg.max_concepts + 1))
        cset = sorted(int(c) for c in rng.choice(cfg.concepts, size=k, replace=False))
        out.append(make_regions(cfg, corpus.concepts, cset, rng))
    return out


def concepts_from_caption(tokens: TokenSequence, concepts: list[ConceptSpec]) -> tuple[int, ...]:
    """Rule-based reading of a caption's concept set from its exclusive words."""
    owner = {t: c.concept_id for c in concepts for t in c.tokens}
    return tuple(sorted({owner[int(t)] for t in tokens.ids[1:] if int(t) in owner}))


def concepts_from_regions(regions: RegionSequence, concepts: list[ConceptSpec]) -> tuple[int, ...]:
    """Nearest-prototype reading of a region sequence's concept set."""
    protos = np.stack([c.prototype for c in concepts])
    d = ((regions.features[:, None, :] - protos[None]) ** 2).sum(-1)
    return tuple(sorted({int(i) for i in d.argmin(axis=1)}))


# -- binary record files ------------------------------------------------------

_HEAD = struct.Struct("<4sIII")  # magic, version, count, width


def write_regions(path, items: dict[int, RegionSequence]) -> None:
    """LDRF: header (magic, u32 version, u32 count, u32 feat_dim) and u32 classes,
    then per record u64 id, u32 N, N*feat_dim f64 features, N*7 f64 boxes,
    N*classes f64 class distributions. All little-endian."""
    first = next(iter(items.values()))
    fd, nc = first.features.shape[1], first.class_dist.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(REGION_MAGIC, FORMAT_VERSION, len(items), fd))
        fh.write(struct.pack("<I", nc))
        for pid, r in items.items():
            fh.write(struct.pack("<QI", pid, len(r)))
            fh.write(r.features.astype("<f8").tobytes())
            fh.write(r.boxes.astype("<f8").tobytes())
            fh.write(r.class_dist.astype("<f8").tobytes())


def write_captions(path, items: dict[int, TokenSequence], vocab: int) -> None:
    """LDTX: header (magic, u32 version, u32 count, u32 vocab), then per record
    u64 id, u32 length (including [CLS]), length u32 token ids."""
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(TEXT_MAGIC, FORMAT_VERSION, len(items), vocab))
        for pid, t in items.items():
            fh.write(struct.pack("<QI", pid, len(t)))
            fh.write(t.ids.astype("<u4").tobytes())


class _Reader:
    def __init__(self, path):
        self.path = path
        self.buf = Path(path).read_bytes()
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorpusFormatError(self.path, f"truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count), dtype=dtype).astype(dtype[1:] if dtype[0] == "<" else dtype)

    def header(self, magic: bytes) -> tuple[int, int]:
        got, version, count, width = self.unpack(_HEAD.format)
        if got != magic:
            raise CorpusFormatError(self.path, f"bad magic {got!r}, expected {magic!r}")
        if version != FORMAT_VERSION:
            raise CorpusFormatError(self.path, f"unsupported format version {version} (expected {FORMAT_VERSION}; "
                                               "foreign byte order reads as a wrong version)")
        return count, width

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise CorpusFormatError(self.path, f"{len(self.buf) - self.pos} trailing bytes")


def read_regions(path) -> dict[int, RegionSequence]:
    r = _Reader(path)
    count, fd = r.header(REGION_MAGIC)
    (nc,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        pid, n = r.unpack("<QI")
        feats = r.array("<f8", n * fd).reshape(n, fd)
        boxes = r.array("<f8", n * GEOM_DIM).reshape(n, GEOM_DIM)
        dist = r.array("<f8", n * nc).reshape(n, nc)
        out[int(pid)] = RegionSequence(feats, boxes, dist)
    r.done()
    return out


def read_captions(path) -> tuple[dict[int, TokenSequence], int]:
    r = _Reader(path)
    count, vocab = r.header(TEXT_MAGIC)
    out = {}
    for _ in range(count):
        pid, n = r.unpack("<QI")
        out[int(pid)] = TokenSequence(r.array("<u4", n).astype(np.int64))
    r.done()
    return out, vocab


def write_corpus(corpus: Corpus, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = asdict(corpus.config)
    cfg["split"] = list(corpus.config.split)
    ids = sorted(corpus.examples)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "seed": corpus.config.seed,
        "counts": {"pairs": len(ids), **{s: len(corpus.splits.get(s)) for s in SPLITS}},
        "vocab": corpus.vocab,
        "concepts": [{"id": c.concept_id, "class_id": c.class_id, "tokens": c.tokens,
                      "prototype": c.prototype.tolist()} for c in corpus.concepts],
        "concept_sets": {str(i): list(corpus.examples[i].concepts) for i in ids},
        **({"extra": corpus.extra} if corpus.extra else {}),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    write_regions(d / "regions.ldrf", {i: corpus.examples[i].regions for i in ids})
    write_captions(d / "captions.ldtx", {i: corpus.examples[i].tokens for i in ids}, len(corpus.vocab))
    for s in SPLITS:
        (d / f"{s}.ids").write_text("".join(f"{i}\n" for i in corpus.splits.get(s)))
    return d


def read_corpus(directory) -> Corpus:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise CorpusFormatError(mpath, "missing manifest")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorpusFormatError(mpath, f"unsupported format version {manifest.get('format_version')}")
    raw = dict(manifest["config"])
    raw["split"] = tuple(raw["split"])
    cfg = SynthConfig(**raw)
    splits = {}
    for s in SPLITS:
        p = d / f"{s}.ids"
        if not p.is_file():
            raise CorpusFormatError(p, f"missing split file for {s!r}")
        splits[s] = [int(x) for x in p.read_text().split()]
    regions = read_regions(d / "regions.ldrf")
    captions, _ = read_captions(d / "captions.ldtx")
    if regions.keys() != captions.keys():
        raise CorpusFormatError(d, "region and caption files hold different pair ids")
    sets = manifest.get("concept_sets", {})
    examples = {i: PairedExample(i, regions[i], captions[i], tuple(sets.get(str(i), ()))) for i in sorted(regions)}
    concepts = [ConceptSpec(c["id"], np.asarray(c["prototype"], dtype=np.float64), c["class_id"], list(c["tokens"]))
                for c in manifest["concepts"]]
    return Corpus(cfg, list(manifest["vocab"]), concepts, examples, CorpusSplit(**splits),
                  manifest.get("extra", {}))
