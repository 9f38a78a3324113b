import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from her2flex.data import Modality
from her2flex.encoder import (
    DomainHead, SharedEncoder, SpecificEncoder, alignment_loss, domain_classification_loss,
    encode_shared, encode_specific, encoder_loss, median_bandwidth, mmd_distance, pooled_features,
)
from her2flex.errors import DimensionMismatch, EmptyBatch, ModalityMismatch, ShapeMismatch
from her2flex.fusion import ClassifierHead, weighted_cross_entropy_logits

from oracles import brute


def _imgs(n=4, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g)


# --- encoders -------------------------------------------------------------------

def test_shared_encoder_dims_and_determinism():
    torch.manual_seed(0)
    enc = SharedEncoder().eval()
    x = _imgs(2, 64)
    f = encode_shared(enc, x)
    assert tuple(f.shape) == (2, 64, 8, 8)
    assert torch.equal(f, encode_shared(enc, x))
    assert torch.isfinite(f).all()


def test_shared_encoder_rejects_bad_shapes():
    enc = SharedEncoder()
    with pytest.raises(ShapeMismatch):
        encode_shared(enc, torch.rand(1, 3, 12, 12))
    with pytest.raises(ShapeMismatch):
        encode_shared(enc, torch.rand(1, 1, 16, 16))


def test_specific_encoder_modality_contract():
    he = SpecificEncoder(Modality.HE)
    with pytest.raises(ModalityMismatch):
        encode_specific(he, _imgs(), Modality.IHC)
    assert tuple(encode_specific(he, _imgs(1, 64), Modality.HE).shape) == (1, 32, 8, 8)


def test_specific_branches_differ_after_independent_init():
    torch.manual_seed(0)
    he = SpecificEncoder(Modality.HE)
    ihc = SpecificEncoder(Modality.IHC)
    x = _imgs(2, 16)
    assert not torch.allclose(encode_specific(he, x, Modality.HE), encode_specific(ihc, x, Modality.IHC))
    assert not set(map(id, he.parameters())) & set(map(id, ihc.parameters()))


def test_weight_sharing_single_parameter_store():
    from her2flex.fusion import Her2Net
    net = Her2Net()
    # one shared encoder instance serves both stains
    params = [id(p) for p in net.shared.parameters()]
    assert len(params) == len(set(params))
    calls = []
    hook = net.shared.register_forward_hook(lambda m, i, o: calls.append(i[0].shape[0]))
    he, ihc = _imgs(2, 64), _imgs(2, 64, 1)
    bundle = net.encode(he, ihc)
    hook.remove()
    # both stains go through the same module in a single batched call
    assert calls == [4]
    assert bundle.f_s_he.shape == bundle.f_s_ihc.shape
    assert torch.allclose(bundle.f_s, 0.5 * (bundle.f_s_he + bundle.f_s_ihc))


def test_weight_isolation():
    torch.manual_seed(0)
    he, ihc = SpecificEncoder(Modality.HE), SpecificEncoder(Modality.IHC)
    opt = torch.optim.AdamW(list(he.parameters()) + list(ihc.parameters()), 1e-2)
    before = [p.detach().clone() for p in ihc.parameters()]
    for _ in range(3):
        loss = encode_specific(he, _imgs(), Modality.HE).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, ihc.parameters()))


def test_all_encoder_parameters_receive_classification_gradient():
    torch.manual_seed(0)
    enc = SharedEncoder(widths=(4, 8), strides=(2, 2)).double()
    head = ClassifierHead(8).double()
    x = torch.rand(4, 3, 16, 16, dtype=torch.float64)
    loss = weighted_cross_entropy_logits(head(enc(x)), torch.tensor([0, 1, 2, 3]), [1.0] * 4)
    loss.backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


# --- domain classification ------------------------------------------------------------

def test_domain_loss_confident_correct():
    probs = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert domain_classification_loss(None, probs, [Modality.HE, Modality.IHC]).item() <= 1e-6


def test_domain_loss_half():
    probs = torch.full((3, 2), 0.5, dtype=torch.float64)
    loss = domain_classification_loss(None, probs, [Modality.HE, Modality.IHC, Modality.HE])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-9)


def test_domain_loss_hand_computed():
    probs = torch.tensor([[0.2, 0.8]], dtype=torch.float64)
    assert domain_classification_loss(None, probs, [Modality.IHC]).item() == pytest.approx(0.223144, abs=1e-6)


def test_domain_loss_empty():
    with pytest.raises(EmptyBatch):
        domain_classification_loss(None, torch.zeros(0, 2), [])


def test_domain_head_probabilities():
    head = DomainHead(8)
    p = head(torch.randn(5, 8, 3, 3))
    assert torch.allclose(p.sum(-1), torch.ones(5), atol=1e-6)


def test_domain_loss_descends():
    torch.manual_seed(0)
    he, ihc = SpecificEncoder(Modality.HE, (4, 8), (2, 2)), SpecificEncoder(Modality.IHC, (4, 8), (2, 2))
    head = DomainHead(8)
    params = list(he.parameters()) + list(ihc.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=0.05)
    x_he, x_ihc = _imgs(4, 16, 0), _imgs(4, 16, 1)
    labels = [Modality.HE] * 4 + [Modality.IHC] * 4

    def loss():
        feats = torch.cat([encode_specific(he, x_he, Modality.HE), encode_specific(ihc, x_ihc, Modality.IHC)])
        return domain_classification_loss(head, feats, labels)

    first = loss().item()
    for _ in range(100):
        opt.zero_grad()
        val = loss()
        val.backward()
        opt.step()
    assert loss().item() < first


# --- MMD ---------------------------------------------------------------------------------

def test_mmd_identical_sets_zero():
    x = np.random.default_rng(0).normal(size=(6, 3))
    assert mmd_distance(x, x[::-1], 1.3) == pytest.approx(0.0, abs=1e-9)


def test_mmd_hand_computed():
    assert mmd_distance([0.0], [1.0], 1.0) == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-12)
    assert mmd_distance([0.0], [1.0], 1.0) == pytest.approx(0.786939, abs=1e-6)


def test_mmd_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        mmd_distance(np.zeros((2, 3)), np.zeros((2, 4)), 1.0)


vectors = st.integers(1, 5).flatmap(lambda n: arrays(np.float64, (n, 3), elements=st.floats(-3, 3)))


@settings(max_examples=50, deadline=None)
@given(vectors, vectors, st.floats(0.1, 5.0))
def test_mmd_symmetric_nonnegative(x, y, sigma):
    xy, yx = mmd_distance(x, y, sigma), mmd_distance(y, x, sigma)
    assert xy >= 0.0
    assert xy == pytest.approx(yx, abs=1e-12)


def test_mmd_descends_on_shared_features():
    torch.manual_seed(0)
    enc = SharedEncoder(widths=(4, 8), strides=(2, 2))
    opt = torch.optim.SGD(enc.parameters(), lr=0.1)
    he, ihc = _imgs(6, 16, 0), _imgs(6, 16, 1) * 0.5 + 0.5

    def loss():
        return mmd_distance(pooled_features(enc(he)), pooled_features(enc(ihc)), 0.5)

    first = loss().item()
    for _ in range(100):
        opt.zero_grad()
        val = loss()
        val.backward()
        opt.step()
    assert loss().item() < first


def test_median_bandwidth_and_alignment():
    a = torch.tensor([[0.0, 0.0], [3.0, 4.0]])
    b = torch.tensor([[0.0, 0.0]])
    # distances 5, 0 (dropped), 5 -> median 5
    assert median_bandwidth(a, b) == pytest.approx(5.0)
    f = torch.rand(4, 8, 2, 2, dtype=torch.float64)
    assert alignment_loss(f, f).item() == pytest.approx(0.0, abs=1e-12)


# --- encoder objective -------------------------------------------------------------------------------

@pytest.mark.parametrize("args,expected", [
    ((0.5, 0.25, 1.0, 1.0), 0.75),
    ((3.0, 9.0, 0.0, 0.0), 0.0),
    ((0.693, 0.787, 1.0, 0.1), 0.7717),
])
def test_encoder_loss(args, expected):
    assert encoder_loss(*args) == pytest.approx(expected, abs=1e-12)


def test_encoder_loss_rejects_negative():
    with pytest.raises(ValueError):
        encoder_loss(1.0, 1.0, -0.1, 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mmd_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    sigma = float(rng.uniform(0.3, 3.0))
    assert mmd_distance(x, y, sigma) == pytest.approx(brute.mmd(x, y, sigma), abs=1e-9)
