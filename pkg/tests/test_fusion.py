import itertools

import numpy as np
import pytest

from soundmap.encoders import GaussianEmbedding
from soundmap.errors import InputDomainError
from soundmap.fusion import (COMPONENTS, Metadata, MetadataBatch, MetadataFusion, cyclic, dropout_mask,
                             metadata_dropout)
from soundmap.numerics.autograd import Tensor, backward
from soundmap.numerics.gradcheck import grad_check_params
from soundmap.probloss import csd_matrix
from soundmap.rng import derive_rng

D = 16
EMBEDDERS = ("latlon", "month", "hour", "audio_source", "text_source")


def make_fusion(dtype=np.float32, seed=0):
    f = MetadataFusion(D, 2, 4, derive_rng(seed, "fusion-test"))
    # embedders start at zero; give them weight so metadata actually matters
    r = derive_rng(seed, "fusion-test", "embedders")
    for name, p in f.named_parameters().items():
        if name.split(".")[0] in EMBEDDERS:
            p.data[...] = r.normal(0, 0.5, size=p.shape)
    return f.astype(dtype)


META = Metadata((38.6, -90.2), 7, 18, 2, 1)
OTHER = Metadata((-12.0, 150.0), 1, 3, 0, 0)


@pytest.fixture(scope="module")
def fusion():
    return make_fusion()


@pytest.fixture(scope="module")
def h():
    return Tensor(derive_rng(0, "h").normal(size=(1, D)).astype(np.float32))


def test_metadata_ranges():
    with pytest.raises(InputDomainError):
        Metadata(month=13)
    with pytest.raises(InputDomainError):
        Metadata(month=0)
    with pytest.raises(InputDomainError):
        Metadata(hour=24)
    with pytest.raises(InputDomainError):
        Metadata(latlon=(91.0, 0.0))
    with pytest.raises(InputDomainError):
        Metadata(audio_source=4)


def test_hour_featurization_periodic():
    assert np.allclose(cyclic(0, 24), cyclic(24, 24), atol=1e-12)
    assert np.allclose(cyclic(1, 12), cyclic(13, 12), atol=1e-12)


def test_all_masked_gives_no_tokens(fusion):
    assert fusion.meta_tokens(META.masked((False,) * 5)) == []
    assert len(fusion.meta_tokens(META)) == 5
    assert len(fusion.meta_tokens(META.masked((True, False, True, False, False)))) == 2


def test_embedders_start_at_zero():
    f = MetadataFusion(D, 1, 4, derive_rng(0, "fresh"))
    tokens, _ = f.embed_metadata(MetadataBatch.stack([META]))
    assert not tokens.data.any()


@pytest.mark.parametrize("mask", list(itertools.product([False, True], repeat=5)))
def test_every_mask_pattern(fusion, h, mask):
    a = fusion(h, MetadataBatch.stack([META.masked(mask)]))
    b = fusion(h, MetadataBatch.stack([OTHER.masked(mask)]))
    assert a.mu.shape == (1, D) and a.log_var.shape == (1, D)
    assert np.isfinite(a.mu.data).all() and np.isfinite(a.log_var.data).all()
    # swapping the values of the masked components changes nothing
    mixed = Metadata(*(getattr(META if m else OTHER, c) for c, m in zip(COMPONENTS, mask)), present_mask=mask)
    c = fusion(h, MetadataBatch.stack([mixed]))
    assert np.array_equal(a.mu.data, c.mu.data)
    if any(mask):
        assert not np.allclose(a.mu.data, b.mu.data)
    else:
        assert np.array_equal(a.mu.data, b.mu.data)


def test_all_masked_equals_metadata_free(fusion, h):
    masked = fusion(h, MetadataBatch.stack([META.masked((False,) * 5)]))
    free = fusion(h, None)
    assert np.array_equal(masked.mu.data, free.mu.data)
    assert np.array_equal(masked.log_var.data, free.log_var.data)
    assert np.array_equal(fusion.fuse_tokens(h, []).mu.data, free.mu.data)


def test_token_order_irrelevant(fusion, h):
    toks = fusion.meta_tokens(META)
    ref = fusion.fuse_tokens(h, toks)
    for perm in itertools.permutations(range(5)):
        out = fusion.fuse_tokens(h, [toks[i] for i in perm])
        assert np.allclose(out.mu.data, ref.mu.data, atol=1e-5)


def test_batched_matches_token_list(fusion, h):
    batched = fusion(h, MetadataBatch.stack([META]))
    listed = fusion.fuse_tokens(h, fusion.meta_tokens(META))
    assert np.allclose(batched.mu.data, listed.mu.data, atol=1e-5)


def test_dropout_extremes():
    r = derive_rng(0, "drop")
    assert metadata_dropout(META, 0.0, r).present_mask == META.present_mask
    assert metadata_dropout(META, 1.0, r).present_mask == (False,) * 5
    with pytest.raises(InputDomainError):
        metadata_dropout(META, 1.5, r)


def test_dropout_keep_frequency():
    r = derive_rng(0, "drop-freq")
    kept = np.array([metadata_dropout(META, 0.5, r).present_mask for _ in range(10_000)])
    freq = kept.mean(axis=0)
    assert np.all(np.abs(freq - 0.5) <= 0.02), freq
    batched = dropout_mask(np.ones((10_000, 5), bool), 0.5, derive_rng(0, "drop-batch"))
    assert np.all(np.abs(batched.mean(axis=0) - 0.5) <= 0.02)


def test_dropout_never_restores_absent():
    r = derive_rng(1, "drop")
    m = META.masked((False, True, False, True, True))
    for _ in range(200):
        out = metadata_dropout(m, 0.3, r).present_mask
        assert not out[0] and not out[2]


def test_gradient_reaches_unmasked_embedders_only():
    f = make_fusion(np.float64)
    rng = derive_rng(0, "fusion-grad")
    h = Tensor(rng.normal(size=(3, D)))
    target = GaussianEmbedding(Tensor(rng.normal(size=(3, D))), Tensor(rng.normal(size=(3, D)) * 0.1))
    mask = (True, False, True, True, False)
    meta = MetadataBatch.stack([META.masked(mask), OTHER.masked(mask), META.masked(mask)])

    def loss():
        z = f(h, meta)
        return csd_matrix(z, target).sum()

    params = {k: v for k, v in f.named_parameters().items() if k.split(".")[0] in EMBEDDERS}
    grads = backward(loss(), params)
    for name, g in grads.items():
        on = mask[EMBEDDERS.index(name.split(".")[0])]
        if on:
            assert np.abs(g).max() > 0, name
        else:
            assert not np.abs(g).any(), name
    errs = grad_check_params(loss, params, 1e-3, coords_per_param=6, rng=derive_rng(0, "coords"))
    assert max(errs.values()) < 1e-4
