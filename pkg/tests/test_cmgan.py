import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from her2flex.cmgan import (
    AdversarialRole, DiscriminatorNet, GeneratorNet, adversarial_loss, build_pyramid, gan_train_step,
    generator_forward, mean_image_psnr_baseline, pyramid_l1_loss, receptive_grid, reconstruction_loss,
)
from her2flex.data import Direction
from her2flex.errors import ShapeMismatch, TooManyLevels
from her2flex.layers import count_parameters, to_tensor

from oracles import brute

images = arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1))


# --- pyramid --------------------------------------------------------------------

def test_pyramid_single_level_is_input(rng):
    img = rng.random((6, 6, 3))
    (lv,) = build_pyramid(img, 1)
    assert np.array_equal(lv, img)


def test_pyramid_constant_image():
    img = np.full((16, 16, 3), 0.37)
    for lv in build_pyramid(img, 3):
        assert np.allclose(lv, 0.37, atol=1e-15)


def test_pyramid_hand_computed_level2():
    img = np.arange(1, 17, dtype=np.float64).reshape(4, 4)
    lv = build_pyramid(img, 2)
    assert lv[1].tolist() == [[3.5, 5.5], [11.5, 13.5]]


def test_pyramid_dims_are_ceil():
    lv = build_pyramid(np.zeros((9, 7, 3)), 3)
    assert [x.shape[:2] for x in lv] == [(9, 7), (5, 4), (3, 2)]


def test_pyramid_too_many_levels():
    with pytest.raises(TooManyLevels):
        build_pyramid(np.zeros((4, 4, 3)), 4)


@settings(max_examples=40, deadline=None)
@given(images, st.integers(1, 4))
def test_pyramid_mean_preserved(img, levels):
    for lv in build_pyramid(img, levels):
        assert lv.mean() == pytest.approx(img.mean(), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (5, 7, 2), elements=st.floats(0, 1)))
def test_pyramid_matches_loop_oracle(img):
    lv = build_pyramid(img, 3)
    ref = brute.avg_pool_2x2(img)
    assert np.allclose(lv[1], ref, atol=1e-12)
    assert np.allclose(lv[2], brute.avg_pool_2x2(ref), atol=1e-12)


# --- pyramid L1 -------------------------------------------------------------------

def test_pyramid_l1_identical_is_zero(rng):
    img = rng.random((8, 8, 3))
    for s in (1, 2, 3):
        assert pyramid_l1_loss(img, img, s) == 0.0


def test_pyramid_l1_constant_offset():
    a = np.full((8, 8, 3), 0.2)
    assert pyramid_l1_loss(a + 0.1, a, 3) == pytest.approx(0.3, abs=1e-12)


def test_pyramid_l1_single_entry():
    a = np.zeros((2, 2, 3))
    b = a.copy()
    b[0, 1, 2] = 0.5
    assert pyramid_l1_loss(a, b, 1) == pytest.approx(0.0416667, abs=1e-7)


def test_pyramid_l1_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        pyramid_l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 6, 3)))


@settings(max_examples=40, deadline=None)
@given(images, images)
def test_pyramid_l1_symmetric_nonnegative(a, b):
    ab, ba = pyramid_l1_loss(a, b, 3), pyramid_l1_loss(b, a, 3)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert ab >= 0.0
    assert (ab == 0.0) == bool(np.array_equal(a, b))


def test_pyramid_l1_tensor_path_keeps_graph():
    a = torch.rand(2, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    loss = pyramid_l1_loss(a, torch.zeros_like(a), 3)
    loss.backward()
    assert a.grad is not None and torch.isfinite(a.grad).all()


# --- adversarial / reconstruction -----------------------------------------------------

@pytest.mark.parametrize("role", list(AdversarialRole))
def test_adversarial_half_scores(role):
    assert adversarial_loss(np.full((3, 3), 0.5), role) == pytest.approx(math.log(2), abs=1e-9)


def test_adversarial_perfect_real():
    assert adversarial_loss(np.full((4,), 1 - 1e-7), AdversarialRole.DISC_REAL) <= 1e-6
    assert adversarial_loss(np.full((4,), 1.0), AdversarialRole.DISC_REAL) <= 1e-6
    assert adversarial_loss(np.zeros(4), AdversarialRole.DISC_FAKE) <= 1e-6


def test_adversarial_hand_computed():
    assert adversarial_loss([0.9, 0.6], AdversarialRole.GENERATOR_STEP) == pytest.approx(0.308093, abs=1e-6)


def test_adversarial_extremes_finite():
    for role in AdversarialRole:
        assert math.isfinite(adversarial_loss([0.0, 1.0], role))


@pytest.mark.parametrize("args,expected", [
    ((1.0, 2.0, 1.0, 1.0), 3.0),
    ((0.693, 0.01, 1.0, 100.0), 1.693),
    ((0.4, 7.0, 1.0, 0.0), 0.4),
])
def test_reconstruction_loss(args, expected):
    assert reconstruction_loss(*args) == pytest.approx(expected, abs=1e-12)


def test_reconstruction_loss_rejects_negative_weights():
    with pytest.raises(ValueError):
        reconstruction_loss(1.0, 1.0, -1.0, 1.0)


# --- networks ------------------------------------------------------------------------

def test_generator_shape_range_and_determinism(rng):
    torch.manual_seed(0)
    g = GeneratorNet(Direction.HE_TO_IHC, base=4, depth=3)
    src = rng.random((32, 32, 3)).astype(np.float32)
    out = generator_forward(g, src)
    assert out.shape == src.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.array_equal(out, generator_forward(g, src))


def test_generator_rejects_indivisible_input():
    g = GeneratorNet(base=4, depth=3)
    with pytest.raises(ShapeMismatch):
        generator_forward(g, np.zeros((20, 20, 3), dtype=np.float32))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.5, 20.0))
def test_generator_range_for_arbitrary_parameters(seed, scale):
    torch.manual_seed(seed)
    g = GeneratorNet(base=2, depth=2).double()
    with torch.no_grad():
        for p in g.parameters():
            p.mul_(scale)
    out = g(torch.rand(1, 3, 8, 8, dtype=torch.float64) * 4 - 2)
    assert torch.isfinite(out).all()
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_discriminator_grid_deterministic():
    d = DiscriminatorNet(base=4, n_layers=2)
    assert receptive_grid(d, 32) == receptive_grid(d, 32) == (6, 6)
    assert receptive_grid(d, 64) == (14, 14)
    s = d(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32))
    assert torch.isfinite(s).all() and s.min() > 0 and s.max() < 1


def test_every_generator_parameter_gets_gradient():
    torch.manual_seed(0)
    g = GeneratorNet(base=2, depth=2).double()
    src = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    tgt = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    loss = reconstruction_loss(torch.tensor(0.0, dtype=torch.float64), pyramid_l1_loss(g(src), tgt, 3))
    loss.backward()
    for name, p in g.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_generator_gradient_matches_finite_differences():
    torch.manual_seed(1)
    g = GeneratorNet(base=2, depth=2).double()
    assert count_parameters(g) <= 5000
    d = DiscriminatorNet(base=2, n_layers=1).double()
    src = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    tgt = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    params = list(g.parameters())

    def objective():
        fake = g(src)
        gan = adversarial_loss(d(src, fake), AdversarialRole.GENERATOR_STEP)
        return reconstruction_loss(gan, pyramid_l1_loss(fake, tgt, 3), 1.0, 100.0)

    loss = objective()
    analytic = torch.cat([t.reshape(-1) for t in torch.autograd.grad(loss, params)])
    numeric = torch.zeros_like(analytic)
    eps = 1e-6
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = objective().item()
                flat[i] = old - eps
                down = objective().item()
                flat[i] = old
                numeric[k] = (up - down) / (2 * eps)
                k += 1
    rel = (analytic - numeric).norm() / max(analytic.norm(), numeric.norm())
    assert rel < 1e-3, rel.item()


# --- training step ---------------------------------------------------------------------

def _gan(seed=0, base=4):
    torch.manual_seed(seed)
    g = GeneratorNet(base=base, depth=2)
    d = DiscriminatorNet(base=base, n_layers=2)
    return g, d, torch.optim.AdamW(g.parameters(), 1e-3), torch.optim.AdamW(d.parameters(), 1e-3)


def _pairs(small_corpus, n=4):
    return (to_tensor(np.stack([s.he[:32, :32] for s in small_corpus[:n]])),
            to_tensor(np.stack([s.ihc[:32, :32] for s in small_corpus[:n]])))


class _Spy(torch.optim.Optimizer):
    """Wraps an optimizer and snapshots other modules' parameters around step()."""

    def __init__(self, inner, watched):
        self.inner, self.watched, self.unchanged = inner, watched, []

    def zero_grad(self, set_to_none=True):
        self.inner.zero_grad(set_to_none=set_to_none)

    def step(self):
        before = [p.detach().clone() for p in self.watched.parameters()]
        self.inner.step()
        self.unchanged.append(all(torch.equal(a, b) for a, b in zip(before, self.watched.parameters())))


def test_gan_step_isolation(small_corpus):
    g, d, og, od = _gan()
    spy_g, spy_d = _Spy(og, d), _Spy(od, g)
    src, tgt = _pairs(small_corpus)
    g_before = [p.detach().clone() for p in g.parameters()]
    res = gan_train_step(g, d, src, tgt, spy_g, spy_d)
    assert spy_d.unchanged == [True]  # D step leaves G alone
    assert spy_g.unchanged == [True]  # G step leaves D alone
    assert not all(torch.equal(a, b) for a, b in zip(g_before, g.parameters()))
    assert all(math.isfinite(v) for v in (res.g_loss, res.d_loss, res.l1, res.gan))


def test_gan_step_deterministic(small_corpus):
    src, tgt = _pairs(small_corpus)
    runs = []
    for _ in range(2):
        g, d, og, od = _gan(seed=7)
        runs.append([gan_train_step(g, d, src, tgt, og, od) for _ in range(5)])
    assert runs[0] == runs[1]


def test_gan_overfits_four_pairs(small_corpus):
    g, d, og, od = _gan(seed=0, base=8)
    src, tgt = _pairs(small_corpus)

    def l1():
        with torch.no_grad():
            g.eval()
            return pyramid_l1_loss(g(src), tgt, 3).item()

    initial = l1()
    for _ in range(500):
        gan_train_step(g, d, src, tgt, og, od)
    assert l1() < 0.1 * initial


def test_mean_image_baseline_identical_targets():
    t = np.full((5, 8, 8, 3), 0.3)
    assert mean_image_psnr_baseline(t, t) == 99.0
