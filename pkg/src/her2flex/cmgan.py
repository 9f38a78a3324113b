"""Cross-modal reconstruction: pyramid pix2pix generator / discriminator pairs.

One generator per direction (HE->IHC, IHC->HE). Each is trained against a
conditional PatchGAN discriminator with an adversarial term plus an L1 term
summed over an average-pooled image pyramid.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Direction
from .errors import NonFiniteLoss, ShapeMismatch, TooManyLevels
from .layers import ResidualBlock, to_images, to_tensor

EPS = 1e-7


class AdversarialRole(enum.Enum):
    GENERATOR_STEP = "GeneratorStep"
    DISC_REAL = "DiscReal"
    DISC_FAKE = "DiscFake"


def _as_batch(img):
    """Accept (H, W, C) arrays or (B, C, H, W) tensors; return a float64/32 tensor batch."""
    if isinstance(img, torch.Tensor):
        return img if img.ndim == 4 else img[None]
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return to_tensor(arr, dtype=torch.float64)


def _halve(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = F.pad(x, (0, w % 2, 0, h % 2), mode="replicate")
    return F.avg_pool2d(x, 2)


def build_pyramid(img, levels: int) -> list:
    """Return ``levels`` images; level 1 is the input, each next level is a
    2x2 average pool of the previous one (odd edges replicated).

    Numpy (H, W[, C]) input yields numpy levels of the same layout; tensors
    (B, C, H, W) yield tensors.
    """
    if levels < 1:
        raise TooManyLevels("pyramid needs at least one level")
    is_numpy = not isinstance(img, torch.Tensor)
    x = _as_batch(img)
    if min(x.shape[-2:]) < 2 ** (levels - 1):
        raise TooManyLevels(f"{tuple(x.shape[-2:])} too small for {levels} pyramid levels")
    out = [x]
    for _ in range(levels - 1):
        out.append(_halve(out[-1]))
    if is_numpy:
        squeeze = np.asarray(img).ndim == 2
        conv = [lv[0].permute(1, 2, 0).numpy() for lv in out]
        return [c[..., 0] if squeeze else c for c in conv]
    return out


def pyramid_l1_loss(gen, target, levels: int = 3):
    """Sum over pyramid levels of the mean absolute error."""
    g, t = _as_batch(gen), _as_batch(target)
    if g.shape != t.shape:
        raise ShapeMismatch(f"generated {tuple(g.shape)} vs target {tuple(t.shape)}")
    total = 0.0
    for a, b in zip(build_pyramid(g, levels), build_pyramid(t, levels)):
        total = total + (a - b).abs().mean()
    if not isinstance(gen, torch.Tensor):
        return float(total)
    return total


def adversarial_loss(scores, role: AdversarialRole):
    """Binary cross-entropy of discriminator probabilities against the role's target."""
    s = scores if isinstance(scores, torch.Tensor) else torch.from_numpy(np.array(scores, dtype=np.float64))
    s = s.clamp(EPS, 1.0 - EPS)
    if role is AdversarialRole.DISC_FAKE:
        loss = -torch.log1p(-s).mean()
    else:
        loss = -torch.log(s).mean()
    return loss if isinstance(scores, torch.Tensor) else float(loss)


def reconstruction_loss(gan_term, l1_terms, lambda_gan: float = 1.0, lambda_l1: float = 100.0):
    if lambda_gan < 0 or lambda_l1 < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_gan * gan_term + lambda_l1 * l1_terms


class SpatialAttentionGate(nn.Module):
    """Sigmoid mask from a 7x7 conv over channel-wise mean and max maps."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(1, keepdim=True), x.amax(1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(pooled))


class GeneratorNet(nn.Module):
    """U-Net style generator with residual encoder levels, an attention-gated
    bottleneck and skip connections. Output passes through a sigmoid."""

    def __init__(self, direction: Direction = Direction.HE_TO_IHC, base: int = 16, depth: int = 3):
        super().__init__()
        self.direction = Direction(direction)
        self.depth = depth
        widths = [base * 2 ** i for i in range(depth + 1)]
        self.stem = ResidualBlock(3, widths[0], norm=True)
        self.down = nn.ModuleList(ResidualBlock(widths[i], widths[i + 1], stride=2, norm=True)
                                  for i in range(depth))
        self.bottleneck = ResidualBlock(widths[-1], widths[-1], norm=True)
        self.attention = SpatialAttentionGate()
        self.up = nn.ModuleList(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in reversed(range(depth)))
        self.fuse = nn.ModuleList(ResidualBlock(2 * widths[i], widths[i], norm=True) for i in reversed(range(depth)))
        self.head = nn.Conv2d(widths[0], 3, 1)

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.depth

    def forward(self, x):
        f = self.downsample_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ShapeMismatch(f"input {tuple(x.shape[-2:])} not divisible by {f}")
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = self.attention(self.bottleneck(skips.pop()))
        for up, fuse in zip(self.up, self.fuse):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = fuse(torch.cat([h, skips.pop()], dim=1))
        return torch.sigmoid(self.head(h))


class DiscriminatorNet(nn.Module):
    """Conditional PatchGAN: scores (source, candidate) pairs on a grid of patches."""

    def __init__(self, base: int = 16, n_layers: int = 2):
        super().__init__()
        layers = [nn.Conv2d(6, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = base
        for _ in range(n_layers - 1):
            layers += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch *= 2
        layers += [nn.Conv2d(ch, ch * 2, 4, stride=1, padding=1), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(ch * 2, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, source, candidate):
        return torch.sigmoid(self.net(torch.cat([source, candidate], dim=1)))


def generator_forward(g: GeneratorNet, src) -> np.ndarray:
    """Run a generator in inference mode on one (H, W, 3) image or a batch."""
    single = np.asarray(src).ndim == 3
    dtype = next(g.parameters()).dtype
    g.eval()
    with torch.no_grad():
        out = to_images(g(to_tensor(src, dtype=dtype)))
    return out[0] if single else out


@dataclass
class GanStepResult:
    g_loss: float
    d_loss: float
    l1: float
    gan: float


def gan_train_step(g: GeneratorNet, d: DiscriminatorNet, src: torch.Tensor, tgt: torch.Tensor,
                   opt_g: torch.optim.Optimizer, opt_d: torch.optim.Optimizer,
                   lambda_gan: float = 1.0, lambda_l1: float = 100.0, levels: int = 3) -> GanStepResult:
    """One discriminator update on (real, detached fake) then one generator update."""
    g.train()
    d.train()
    fake = g(src)
    d_loss = 0.5 * (adversarial_loss(d(src, tgt), AdversarialRole.DISC_REAL)
                    + adversarial_loss(d(src, fake.detach()), AdversarialRole.DISC_FAKE))
    if not torch.isfinite(d_loss):
        raise NonFiniteLoss(f"discriminator loss is {d_loss.item()}")
    opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    opt_d.step()

    for p in d.parameters():
        p.requires_grad_(False)
    gan = adversarial_loss(d(src, fake), AdversarialRole.GENERATOR_STEP)
    for p in d.parameters():
        p.requires_grad_(True)
    l1 = pyramid_l1_loss(fake, tgt, levels)
    g_loss = reconstruction_loss(gan, l1, lambda_gan, lambda_l1)
    if not torch.isfinite(g_loss):
        raise NonFiniteLoss(f"generator loss is {g_loss.item()} (gan={gan.item()}, l1={l1.item()})")
    opt_g.zero_grad(set_to_none=True)
    g_loss.backward()
    opt_g.step()
    return GanStepResult(g_loss.item(), d_loss.item(), l1.item(), gan.item())


def mean_image_psnr_baseline(train_targets: np.ndarray, val_targets: np.ndarray) -> float:
    """PSNR of predicting the per-pixel training mean for every validation target."""
    from .metrics import psnr

    mean_img = np.asarray(train_targets, dtype=np.float64).mean(axis=0)
    return float(np.mean([psnr(mean_img, t) for t in val_targets]))


def receptive_grid(d: DiscriminatorNet, size: int) -> tuple:
    """Score-grid dims a discriminator produces for ``size`` x ``size`` input."""
    with torch.no_grad():
        x = torch.zeros(1, 3, size, size, dtype=next(d.parameters()).dtype)
        return tuple(d(x, x).shape[-2:])

