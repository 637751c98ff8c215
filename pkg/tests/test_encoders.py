from __future__ import annotations

import numpy as np
import pytest
from _util import TINY, random_regions, random_tokens
from hypothesis import given, settings
from hypothesis import strategies as st

from lightdot.encoders import (
    CLS_ID,
    MASK_ID,
    BASE_CONFIG,
    DualEncoder,
    ModelConfig,
    RegionSequence,
    TokenSequence,
    encode_image,
    encode_images,
    encode_text,
    encode_texts,
    masked_encode,
    no_decay_names,
)
from lightdot.objectives import plan_text_mask


@pytest.fixture(scope="module")
def model():
    return DualEncoder.create(TINY, seed=0)


def test_text_output_has_one_state_per_position(model):
    toks = random_tokens(np.random.default_rng(0), TINY, t=5)
    assert encode_text(model, toks).hidden.shape == (6, TINY.dim)


def test_image_output_has_cls_plus_regions(model):
    regs = random_regions(np.random.default_rng(0), TINY, n=3)
    enc = encode_image(model, regs)
    assert enc.hidden.shape == (4, TINY.dim)
    assert np.array_equal(enc.global_vec, enc.hidden[0])


def test_out_of_vocab_id_rejected(model):
    with pytest.raises(ValueError):
        encode_text(model, TokenSequence([CLS_ID, TINY.vocab]))


def test_token_sequence_requires_cls():
    with pytest.raises(ValueError):
        TokenSequence([5, 6])


def test_region_arrays_must_agree():
    with pytest.raises(ValueError):
        RegionSequence(np.zeros((2, 6)), np.zeros((3, 7)), np.full((2, 5), 0.2))


def test_too_many_regions_rejected(model):
    with pytest.raises(ValueError):
        encode_image(model, random_regions(np.random.default_rng(0), TINY, n=TINY.max_regions + 1))


def test_changing_one_token_changes_cls_state(model):
    toks = random_tokens(np.random.default_rng(1), TINY, t=5)
    other = toks.ids.copy()
    other[3] = 4 + (other[3] - 4 + 1) % (TINY.vocab - 4)
    assert not np.allclose(encode_text(model, toks).global_vec, encode_text(model, TokenSequence(other)).global_vec)


def test_zero_layers_means_no_mixing():
    cfg = ModelConfig(layers=0, dim=8, heads=2, vocab=20, classes=5, feat_dim=6, max_regions=5, max_tokens=6)
    m = DualEncoder.create(cfg, seed=0)
    a = TokenSequence([CLS_ID, 5, 6, 7])
    b = TokenSequence([CLS_ID, 9, 6, 11])
    np.testing.assert_array_equal(encode_text(m, a).hidden[2], encode_text(m, b).hidden[2])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_image_encoder_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    m = DualEncoder.create(TINY, seed=seed % 7)
    regs = random_regions(rng, TINY, n=4)
    perm = rng.permutation(4)
    shuffled = RegionSequence(regs.features[perm], regs.boxes[perm], regs.class_dist[perm])
    h, hp = encode_image(m, regs).hidden, encode_image(m, shuffled).hidden
    np.testing.assert_allclose(hp[0], h[0], atol=1e-10)
    np.testing.assert_allclose(hp[1:], h[1:][perm], atol=1e-10)


def test_encoders_share_no_parameters(model):
    m = model.copy()
    regs = random_regions(np.random.default_rng(2), TINY, n=3)
    before = encode_image(m, regs).hidden
    for k in m.params:
        if k.startswith("text/"):
            m.params[k] += 1.0
    np.testing.assert_array_equal(encode_image(m, regs).hidden, before)
    assert not set(k for k in m.params if k.startswith("text/")) & set(k for k in m.params if k.startswith("image/"))


def test_batched_padding_matches_single_sequence_forward(model):
    rng = np.random.default_rng(3)
    toks = [random_tokens(rng, TINY) for _ in range(5)]
    regs = [random_regions(rng, TINY) for _ in range(5)]
    np.testing.assert_allclose(encode_texts(model, toks),
                               np.stack([encode_text(model, t).global_vec for t in toks]), atol=1e-10)
    np.testing.assert_allclose(encode_images(model, regs),
                               np.stack([encode_image(model, r).global_vec for r in regs]), atol=1e-10)


def test_empty_mask_is_identity(model):
    toks = random_tokens(np.random.default_rng(4), TINY, t=4)
    regs = random_regions(np.random.default_rng(4), TINY, n=3)
    np.testing.assert_array_equal(masked_encode(model, toks, [], "text").hidden, encode_text(model, toks).hidden)
    np.testing.assert_array_equal(masked_encode(model, regs, [], "image").hidden, encode_image(model, regs).hidden)


def test_masking_cls_rejected(model):
    toks = random_tokens(np.random.default_rng(5), TINY, t=4)
    with pytest.raises(ValueError):
        masked_encode(model, toks, [0], "text")
    with pytest.raises(ValueError):
        masked_encode(model, random_regions(np.random.default_rng(5), TINY, n=2), [0, 1], "image")


def test_fully_masked_image_depends_only_on_geometry(model):
    rng = np.random.default_rng(6)
    a = random_regions(rng, TINY, n=3)
    b = RegionSequence(rng.normal(size=a.features.shape), a.boxes, a.class_dist)
    np.testing.assert_array_equal(masked_encode(model, a, [1, 2, 3], "image").hidden,
                                  masked_encode(model, b, [1, 2, 3], "image").hidden)


def test_planned_text_mask_position_holds_allowed_id(model):
    rng = np.random.default_rng(7)
    toks = random_tokens(rng, TINY, t=4)
    plan = plan_text_mask(toks, 0.5, rng, TINY.vocab)
    from lightdot.encoders import mask_tokens
    masked = mask_tokens(toks, plan)
    for i, orig in zip(plan.indices, plan.originals):
        assert masked.ids[i] == MASK_ID or 4 <= masked.ids[i] < TINY.vocab or masked.ids[i] == orig


def test_weight_decay_exemptions():
    names = no_decay_names(DualEncoder.create(TINY, 0).params)
    assert "image/cls" in names
    assert "text/layer0.ln1.g" in names and "text/layer0.attn.bq" in names and "text/final_ln.g" in names
    assert "text/layer0.attn.wq" not in names and "text/tok_emb" not in names


def test_config_hash_distinguishes_dims():
    assert ModelConfig().hash() != ModelConfig(dim=64).hash()
    assert ModelConfig().hash() == ModelConfig().hash()


def test_base_config_is_constructible():
    assert BASE_CONFIG.dim == 768 and BASE_CONFIG.layers == 12 and BASE_CONFIG.heads == 12
    with pytest.raises(ValueError):
        ModelConfig(dim=30, heads=4)


def test_outputs_are_finite_for_large_inputs(model):
    regs = random_regions(np.random.default_rng(8), TINY, n=3)
    big = RegionSequence(regs.features * 1e6, regs.boxes, regs.class_dist)
    assert np.all(np.isfinite(encode_image(model, big).hidden))
