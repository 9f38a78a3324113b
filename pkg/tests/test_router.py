import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from her2flex.data import Direction, Modality
from her2flex.errors import ArityViolation, DegenerateDataset
from her2flex.router import (
    Arity, BranchDecision, InputRequest, ModalityClassifier, PathKind, classify_modality,
    hue_oracle_modality, route, train_selector,
)


def _clf(seed=0):
    torch.manual_seed(seed)
    return ModalityClassifier()


def _images(corpus):
    imgs = np.stack([s.he for s in corpus] + [s.ihc for s in corpus])
    labels = [Modality.HE] * len(corpus) + [Modality.IHC] * len(corpus)
    return imgs, labels


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_probabilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    clf = _clf(seed % 7)
    x = torch.from_numpy(rng.random((3, 3, 16, 16))).float()
    p = clf.probabilities(x).double()
    assert torch.allclose(p.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-6)


def test_grayscale_image_gets_a_decision():
    img = np.repeat(np.linspace(0, 1, 32 * 32).reshape(32, 32, 1), 3, axis=-1)
    modality, conf = classify_modality(_clf(), img)
    assert modality in (Modality.HE, Modality.IHC)
    assert 0.5 <= conf <= 1.0


def test_classify_deterministic(small_corpus):
    clf = _clf()
    assert classify_modality(clf, small_corpus[0].he) == classify_modality(clf, small_corpus[0].he)


def test_route_dual():
    img = np.zeros((16, 16, 3))
    d = route(InputRequest(Arity.DUAL, he=img, ihc=img), _clf())
    assert d.path is PathKind.DUAL_PATH and d.direction is None


class _Fixed(torch.nn.Module):
    """Stand-in selector that always answers one modality."""

    def __init__(self, modality):
        super().__init__()
        self.bias = torch.nn.Parameter(torch.tensor([3.0, -3.0] if modality is Modality.HE else [-3.0, 3.0]))

    def forward(self, x):
        return self.bias.expand(x.shape[0], 2)

    def probabilities(self, x):
        return torch.softmax(self(x), -1)


@pytest.mark.parametrize("modality,direction", [
    (Modality.HE, Direction.HE_TO_IHC),
    (Modality.IHC, Direction.IHC_TO_HE),
])
def test_route_single(modality, direction):
    d = route(InputRequest(Arity.SINGLE, he=np.zeros((16, 16, 3))), _Fixed(modality))
    assert d.path is PathKind.SINGLE_PATH
    assert d.detected_modality is modality and d.direction is direction
    assert d.confidence == pytest.approx(torch.softmax(torch.tensor([3.0, -3.0]), 0)[0].item())


def test_routing_table_exhaustive():
    img = np.zeros((16, 16, 3))
    for arity, he, ihc in itertools.product(Arity, (None, img), (None, img)):
        req = InputRequest(arity, he=he, ihc=ihc)
        present = (he is not None) + (ihc is not None)
        valid = present == (2 if arity is Arity.DUAL else 1)
        if valid:
            d = route(req, _clf())
            assert isinstance(d, BranchDecision)
            if d.path is PathKind.SINGLE_PATH:
                assert Direction.from_source(d.detected_modality) is d.direction
        else:
            with pytest.raises(ArityViolation):
                route(req, _clf())


def test_branch_decision_coupling_enforced():
    with pytest.raises(ValueError):
        BranchDecision(PathKind.DUAL_PATH, Direction.HE_TO_IHC)
    with pytest.raises(ValueError):
        BranchDecision(PathKind.SINGLE_PATH, Direction.IHC_TO_HE, Modality.HE)
    with pytest.raises(ValueError):
        BranchDecision(PathKind.SINGLE_PATH)
    rec = BranchDecision(PathKind.SINGLE_PATH, Direction.HE_TO_IHC, Modality.HE, 0.9).as_record()
    assert rec == {"path": "SinglePath", "direction": "HEtoIHC", "detected_modality": "HE", "confidence": 0.9}


def test_hue_oracle_on_synthetic(small_corpus):
    for s in small_corpus:
        assert hue_oracle_modality(s.he) is Modality.HE
        assert hue_oracle_modality(s.ihc) is Modality.IHC


def test_train_selector_loss_decreases(small_corpus):
    imgs, labels = _images(small_corpus)
    _, hist = train_selector(_clf(), imgs, labels, epochs=3, seed=0)
    assert len(hist) == 4 and hist[0].epoch == 0
    assert hist[-1].loss < hist[0].loss


def test_train_selector_overfits_eight_images(small_corpus):
    imgs, labels = _images(small_corpus[:4])
    # batch of 8, one step per epoch, 200 steps
    clf, hist = train_selector(_clf(), imgs, labels, epochs=200, seed=0, batch_size=8)
    first = next(h.epoch for h in hist if h.accuracy == 1.0)
    assert first <= 200
    assert hist[-1].accuracy == 1.0


def test_train_selector_deterministic(small_corpus):
    imgs, labels = _images(small_corpus[:6])
    a, _ = train_selector(_clf(), imgs, labels, epochs=2, seed=3)
    b, _ = train_selector(_clf(), imgs, labels, epochs=2, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_train_selector_degenerate(small_corpus):
    imgs = np.stack([s.he for s in small_corpus[:4]])
    with pytest.raises(DegenerateDataset):
        train_selector(_clf(), imgs, [Modality.HE] * 4)
