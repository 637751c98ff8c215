"""Twin transformer encoders for region sequences and token sequences.

Both encoders are post-norm transformer stacks. The image side prepends a
learned [CLS] vector to the projected regions and carries no sequence-position
signal beyond box geometry, so it is permutation-equivariant over regions. The
text side uses a token table plus a learned position table.

Parameters of the two encoders live in one flat dict under the ``text/`` and
``image/`` prefixes; nothing is shared between the prefixes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
UNK_ID = 3
FIRST_WORD_ID = 4

GEOM_DIM = 7
_MASK_BIAS = -1e9


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 2
    vocab: int = 128
    classes: int = 16
    feat_dim: int = 24
    max_regions: int = 12
    max_tokens: int = 16

    def __post_init__(self):
        if self.layers < 0 or min(self.dim, self.heads, self.classes, self.feat_dim) < 1:
            raise ValueError(f"invalid model config {self}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.vocab <= FIRST_WORD_ID:
            raise ValueError(f"vocab must exceed the {FIRST_WORD_ID} special ids")
        if self.max_regions < 1 or self.max_tokens < 1:
            raise ValueError("max_regions and max_tokens must be >= 1")

    @property
    def ffn(self) -> int:
        return 4 * self.dim

    def as_tuple(self) -> tuple[int, ...]:
        return (self.layers, self.dim, self.heads, self.vocab, self.classes,
                self.feat_dim, self.max_regions, self.max_tokens)

    def hash(self) -> str:
        text = "L={};d={};A={};V={};C={};dv={};N={};T={}".format(*self.as_tuple())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


BASE_CONFIG = ModelConfig(layers=12, dim=768, heads=12, vocab=30522, classes=1601, feat_dim=2048,
                          max_regions=100, max_tokens=60)


# -- inputs -------------------------------------------------------------------


@dataclass
class RegionSequence:
    """Region features, 7-d box geometry and per-region class distributions."""

    features: np.ndarray
    boxes: np.ndarray
    class_dist: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.class_dist = np.asarray(self.class_dist, dtype=np.float64)
        n = self.features.shape[0] if self.features.ndim == 2 else -1
        if n < 1:
            raise ValueError("a region sequence needs at least one region")
        if self.boxes.shape != (n, GEOM_DIM) or self.class_dist.ndim != 2 or self.class_dist.shape[0] != n:
            raise ValueError(
                f"region arrays disagree: features {self.features.shape}, boxes {self.boxes.shape}, "
                f"class_dist {self.class_dist.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    def validate(self, tol: float = 1e-9) -> None:
        """Check box and class-distribution invariants; raise ValueError on violation."""
        b, c = self.boxes, self.class_dist
        if np.any(c < 0) or np.any(np.abs(c.sum(axis=1) - 1.0) > tol):
            raise ValueError("class_dist rows must be nonnegative and sum to 1")
        if np.any(b < 0) or np.any(b > 1):
            raise ValueError("box values must lie in [0, 1]")
        w, h = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
        if (np.any(np.abs(b[:, 4] - w) > tol) or np.any(np.abs(b[:, 5] - h) > tol)
                or np.any(np.abs(b[:, 6] - w * h) > tol)):
            raise ValueError("box w/h/area inconsistent with corners")

    def __eq__(self, other):
        if not isinstance(other, RegionSequence):
            return NotImplemented
        return (np.array_equal(self.features, other.features) and np.array_equal(self.boxes, other.boxes)
                and np.array_equal(self.class_dist, other.class_dist))


@dataclass
class TokenSequence:
    """Token ids with [CLS] at position 0."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or self.ids.size < 2:
            raise ValueError("a token sequence needs [CLS] plus at least one token")
        if self.ids[0] != CLS_ID:
            raise ValueError("position 0 must hold the [CLS] id")

    def __len__(self) -> int:
        return self.ids.size

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return np.array_equal(self.ids, other.ids)


@dataclass
class EncodedSequence:
    hidden: np.ndarray
    global_vec: np.ndarray = field(init=False)

    def __post_init__(self):
        self.global_vec = self.hidden[0]


def check_regions(cfg: ModelConfig, regions: RegionSequence) -> None:
    if regions.features.shape[1] != cfg.feat_dim:
        raise ValueError(f"region feature dim {regions.features.shape[1]} != config feat_dim {cfg.feat_dim}")
    if len(regions) > cfg.max_regions:
        raise ValueError(f"{len(regions)} regions exceeds max_regions {cfg.max_regions}")
    if regions.class_dist.shape[1] != cfg.classes:
        raise ValueError(f"class_dist width {regions.class_dist.shape[1]} != config classes {cfg.classes}")


def check_tokens(cfg: ModelConfig, tokens: TokenSequence) -> None:
    if tokens.ids.min() < 0 or tokens.ids.max() >= cfg.vocab:
        raise ValueError(f"token id outside vocabulary of size {cfg.vocab}")
    if len(tokens) - 1 > cfg.max_tokens:
        raise ValueError(f"{len(tokens) - 1} tokens exceeds max_tokens {cfg.max_tokens}")


@dataclass
class RegionBatch:
    features: np.ndarray  # (B, N, feat_dim), zero padded
    boxes: np.ndarray  # (B, N, 7)
    lengths: np.ndarray  # regions per example, excluding [CLS]

    @classmethod
    def from_sequences(cls, seqs: Sequence[RegionSequence]) -> RegionBatch:
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        n = int(lengths.max())
        fd = seqs[0].features.shape[1]
        feats = np.zeros((len(seqs), n, fd))
        boxes = np.zeros((len(seqs), n, GEOM_DIM))
        for i, s in enumerate(seqs):
            feats[i, : len(s)] = s.features
            boxes[i, : len(s)] = s.boxes
        return cls(feats, boxes, lengths)

    def key_bias(self) -> np.ndarray | None:
        return _key_bias(self.lengths + 1)


@dataclass
class TokenBatch:
    ids: np.ndarray  # (B, T+1), PAD after each sequence
    lengths: np.ndarray  # sequence lengths including [CLS]

    @classmethod
    def from_sequences(cls, seqs: Sequence[TokenSequence]) -> TokenBatch:
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        ids = np.full((len(seqs), int(lengths.max())), PAD_ID, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s.ids
        return cls(ids, lengths)

    def key_bias(self) -> np.ndarray | None:
        return _key_bias(self.lengths)


def _key_bias(lengths: np.ndarray) -> np.ndarray | None:
    width = int(lengths.max())
    if np.all(lengths == width):
        return None
    valid = np.arange(width)[None, :] < lengths[:, None]
    return np.where(valid, 0.0, _MASK_BIAS)[:, None, None, :]


# -- parameters ---------------------------------------------------------------


def _layer_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.dim, cfg.ffn
    shapes = {}
    for i in range(cfg.layers):
        p = f"{prefix}layer{i}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
            shapes[p + "attn.b" + w[1]] = (d,)
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
    shapes[prefix + "final_ln.g"] = (d,)
    shapes[prefix + "final_ln.b"] = (d,)
    return shapes


def text_param_shapes(cfg: ModelConfig, prefix: str = "text/") -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes = {
        prefix + "tok_emb": (cfg.vocab, d),
        prefix + "pos_emb": (cfg.max_tokens + 1, d),
        prefix + "emb_ln.g": (d,),
        prefix + "emb_ln.b": (d,),
    }
    shapes.update(_layer_shapes(prefix, cfg))
    shapes[prefix + "mlm.w"] = (d, cfg.vocab)
    shapes[prefix + "mlm.b"] = (cfg.vocab,)
    return shapes


def image_param_shapes(cfg: ModelConfig, prefix: str = "image/") -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes = {
        prefix + "cls": (d,),
        prefix + "feat.w": (cfg.feat_dim, d),
        prefix + "feat.b": (d,),
        prefix + "geo.w": (GEOM_DIM, d),
        prefix + "geo.b": (d,),
        prefix + "emb_ln.g": (d,),
        prefix + "emb_ln.b": (d,),
    }
    shapes.update(_layer_shapes(prefix, cfg))
    shapes.update({
        prefix + "fr.w1": (d, d), prefix + "fr.b1": (d,),
        prefix + "fr.w2": (d, cfg.feat_dim), prefix + "fr.b2": (cfg.feat_dim,),
        prefix + "mrc.w1": (d, d), prefix + "mrc.b1": (d,),
        prefix + "mrc.w2": (d, cfg.classes), prefix + "mrc.b2": (cfg.classes,),
    })
    return shapes


def init_params(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator,
                emb_std: float = 0.02) -> dict[str, np.ndarray]:
    """Biases and LN shifts at 0, LN gains at 1, embedding tables N(0, emb_std),
    dense weights N(0, 1/fan_in)."""
    out = {}
    for name, shape in shapes.items():
        leaf = name.rsplit("/", 1)[-1]
        if leaf.endswith(".g"):
            out[name] = np.ones(shape)
        elif len(shape) == 1 and leaf != "cls":
            out[name] = np.zeros(shape)
        elif leaf in ("tok_emb", "pos_emb", "cls", "type_emb"):
            out[name] = rng.normal(0.0, emb_std, size=shape)
        else:
            out[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    return out


def no_decay_names(params: Iterable[str]) -> frozenset[str]:
    """Biases, LN parameters and the image [CLS] vector are exempt from weight decay."""
    out = set()
    for name in params:
        parts = name.rsplit("/", 1)[-1].split(".")
        if parts == ["cls"] or parts[-1].startswith("b") or any("ln" in p for p in parts[:-1]):
            out.add(name)
    return frozenset(out)


@dataclass
class DualEncoder:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> DualEncoder:
        text_seed, image_seed = np.random.SeedSequence(seed).spawn(2)
        params = init_params(text_param_shapes(config), np.random.default_rng(text_seed))
        params.update(init_params(image_param_shapes(config), np.random.default_rng(image_seed)))
        return cls(config, params)

    def copy(self) -> DualEncoder:
        return DualEncoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {**text_param_shapes(self.config), **image_param_shapes(self.config)}

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.expected_shapes().values())

    def bind(self, graph: Graph | None = None) -> dict[str, Tensor]:
        return (graph or Graph(record=False)).bind(self.params)


# -- forward ------------------------------------------------------------------


def _attention(P: Mapping[str, Tensor], p: str, x: Tensor, bias, heads: int) -> Tensor:
    b, s, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape((b, s, heads, dh)).transpose((0, 2, 1, 3))

    q = split(x @ P[p + "wq"] + P[p + "bq"])
    k = split(x @ P[p + "wk"] + P[p + "bk"])
    v = split(x @ P[p + "wv"] + P[p + "bv"])
    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    ctx = (ad.softmax(scores, axis=-1) @ v).transpose((0, 2, 1, 3)).reshape((b, s, d))
    return ctx @ P[p + "wo"] + P[p + "bo"]


def transformer_stack(P: Mapping[str, Tensor], prefix: str, x: Tensor, bias, cfg: ModelConfig) -> Tensor:
    for i in range(cfg.layers):
        p = f"{prefix}layer{i}."
        x = ad.layer_norm(x + _attention(P, p + "attn.", x, bias, cfg.heads), P[p + "ln1.g"], P[p + "ln1.b"])
        h = ad.gelu(x @ P[p + "ffn.w1"] + P[p + "ffn.b1"]) @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        x = ad.layer_norm(x + h, P[p + "ln2.g"], P[p + "ln2.b"])
    return ad.layer_norm(x, P[prefix + "final_ln.g"], P[prefix + "final_ln.b"])


def image_embed(P: Mapping[str, Tensor], batch: RegionBatch, prefix: str = "image/") -> Tensor:
    """Input embeddings (B, N+1, d): [CLS] then LN(feature proj + geometry proj)."""
    regions = (batch.features @ P[prefix + "feat.w"] + P[prefix + "feat.b"]
               + batch.boxes @ P[prefix + "geo.w"] + P[prefix + "geo.b"])
    regions = ad.layer_norm(regions, P[prefix + "emb_ln.g"], P[prefix + "emb_ln.b"])
    b, d = batch.features.shape[0], P[prefix + "cls"].shape[0]
    cls = P[prefix + "cls"].reshape((1, 1, d)) + np.zeros((b, 1, d))
    return ad.concat([cls, regions], axis=1)


def text_embed(P: Mapping[str, Tensor], batch: TokenBatch, prefix: str = "text/") -> Tensor:
    """Input embeddings (B, T+1, d): LN(token embedding + position embedding)."""
    width = batch.ids.shape[1]
    x = ad.embedding(P[prefix + "tok_emb"], batch.ids) + P[prefix + "pos_emb"][:width]
    return ad.layer_norm(x, P[prefix + "emb_ln.g"], P[prefix + "emb_ln.b"])


def image_hidden(P: Mapping[str, Tensor], cfg: ModelConfig, batch: RegionBatch) -> Tensor:
    return transformer_stack(P, "image/", image_embed(P, batch), batch.key_bias(), cfg)


def text_hidden(P: Mapping[str, Tensor], cfg: ModelConfig, batch: TokenBatch) -> Tensor:
    return transformer_stack(P, "text/", text_embed(P, batch), batch.key_bias(), cfg)


# -- masking ------------------------------------------------------------------


def _check_mask_indices(indices, length: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if np.any(idx == 0):
        raise ValueError("position 0 ([CLS]) cannot be masked")
    if idx.size and (idx.min() < 1 or idx.max() >= length):
        raise ValueError(f"mask index out of range [1, {length})")
    if np.unique(idx).size != idx.size:
        raise ValueError("mask indices must be unique")
    return idx


def mask_tokens(tokens: TokenSequence, mask) -> TokenSequence:
    """Apply a mask to a caption.

    ``mask`` is either a plain index collection (each position becomes [MASK])
    or a plan object carrying ``indices`` and resolved ``replacements``.
    """
    replacements = getattr(mask, "replacements", None)
    idx = _check_mask_indices(getattr(mask, "indices", mask), len(tokens))
    ids = tokens.ids.copy()
    ids[idx] = MASK_ID if replacements is None else replacements
    return TokenSequence(ids)


def mask_regions(regions: RegionSequence, mask) -> RegionSequence:
    """Zero the features of masked regions; geometry and class_dist are kept.

    Indices are sequence positions, so region ``k`` (0-based) is position ``k+1``.
    """
    idx = _check_mask_indices(getattr(mask, "indices", mask), len(regions) + 1)
    feats = regions.features.copy()
    feats[idx - 1] = 0.0
    return RegionSequence(feats, regions.boxes, regions.class_dist)


# -- public single-sequence and bulk encoding --------------------------------


def encode_image(model: DualEncoder, regions: RegionSequence) -> EncodedSequence:
    check_regions(model.config, regions)
    h = image_hidden(model.bind(), model.config, RegionBatch.from_sequences([regions]))
    return EncodedSequence(h.data[0])


def encode_text(model: DualEncoder, tokens: TokenSequence) -> EncodedSequence:
    check_tokens(model.config, tokens)
    z = text_hidden(model.bind(), model.config, TokenBatch.from_sequences([tokens]))
    return EncodedSequence(z.data[0])


def masked_encode(model: DualEncoder, sequence, mask, mode: str) -> EncodedSequence:
    if mode == "text":
        return encode_text(model, mask_tokens(sequence, mask))
    if mode == "image":
        return encode_image(model, mask_regions(sequence, mask))
    raise ValueError(f"mode must be 'text' or 'image', got {mode!r}")


def encode_images(model: DualEncoder, seqs: Sequence[RegionSequence], chunk: int = 512) -> np.ndarray:
    """Global [CLS] vectors (n, d) for many region sequences, chunked and padded."""
    for s in seqs:
        check_regions(model.config, s)
    P = model.bind()
    out = [image_hidden(P, model.config, RegionBatch.from_sequences(seqs[i:i + chunk])).data[:, 0]
           for i in range(0, len(seqs), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.config.dim))


def encode_texts(model: DualEncoder, seqs: Sequence[TokenSequence], chunk: int = 512) -> np.ndarray:
    for s in seqs:
        check_tokens(model.config, s)
    P = model.bind()
    out = [text_hidden(P, model.config, TokenBatch.from_sequences(seqs[i:i + chunk])).data[:, 0]
           for i in range(0, len(seqs), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.config.dim))
