"""Shared / modality-specific feature encoders and their training losses.

The shared encoder is a single weight set applied to both stains; each stain
also has its own specific encoder. Specific features are pushed to be
stain-discriminative (domain classification loss), shared features are pulled
together across stains (MMD alignment loss).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Modality
from .errors import DimensionMismatch, EmptyBatch, ModalityMismatch, ShapeMismatch
from .layers import ResidualEncoder

EPS = 1e-7


class SharedEncoder(ResidualEncoder):
    def __init__(self, widths: Sequence[int] = (16, 32, 64, 64), strides: Sequence[int] = (2, 2, 2, 1)):
        super().__init__(3, widths, strides)


class SpecificEncoder(ResidualEncoder):
    """Per-stain branch. Two instances (HE, IHC) share architecture only."""

    def __init__(self, modality: Modality, widths: Sequence[int] = (16, 32, 32),
                 strides: Sequence[int] = (2, 2, 2)):
        super().__init__(3, widths, strides)
        self.modality = Modality(modality)


class DomainHead(nn.Module):
    """GAP + linear layer giving a 2-way (HE, IHC) probability.

    The pooled vector is L2-normalised before the linear layer, so the loss
    can only be lowered through the direction of the features, not by
    inflating their scale.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Linear(channels, 2)

    def forward(self, feats):
        v = F.normalize(feats.mean(dim=(-2, -1)), dim=-1)
        return torch.softmax(self.fc(v), dim=-1)


@dataclass
class FeatureBundle:
    """Shared and specific feature maps for one batch.

    ``reconstructed`` names the modalities whose images came from a generator.
    """

    f_s: torch.Tensor
    f_he: torch.Tensor
    f_ihc: torch.Tensor
    reconstructed: frozenset = field(default_factory=frozenset)
    f_s_he: Optional[torch.Tensor] = None
    f_s_ihc: Optional[torch.Tensor] = None

    def check_finite(self) -> None:
        for name in ("f_s", "f_he", "f_ihc"):
            if not torch.isfinite(getattr(self, name)).all():
                raise FloatingPointError(f"non-finite values in {name}")


def _check_input(enc: ResidualEncoder, img: torch.Tensor) -> None:
    if img.ndim != 4 or img.shape[1] != 3:
        raise ShapeMismatch(f"expected (B, 3, H, W), got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h % enc.downsample or w % enc.downsample:
        raise ShapeMismatch(f"input {h}x{w} not divisible by encoder stride {enc.downsample}")


def encode_shared(enc: SharedEncoder, img: torch.Tensor) -> torch.Tensor:
    _check_input(enc, img)
    return enc(img)


def encode_specific(enc: SpecificEncoder, img: torch.Tensor, modality: Modality) -> torch.Tensor:
    if enc.modality is not Modality(modality):
        raise ModalityMismatch(f"{enc.modality.value} branch invoked for {Modality(modality).value} input")
    _check_input(enc, img)
    return enc(img)


def domain_classification_loss(head: Optional[DomainHead], features, labels: Sequence[Modality]):
    """Mean binary cross-entropy of the head's stain prediction.

    ``features`` is a (B, C, h, w) tensor or a list of (C, h, w) maps; pass
    ``head=None`` to score precomputed (B, 2) probabilities directly.
    """
    if len(labels) == 0:
        raise EmptyBatch("domain classification loss needs at least one item")
    if isinstance(features, (list, tuple)):
        features = torch.stack(list(features))
    if len(features) != len(labels):
        raise ShapeMismatch(f"{len(features)} features vs {len(labels)} labels")
    probs = features if head is None else head(features)
    idx = torch.tensor([Modality(m).index for m in labels])
    p_true = probs.gather(1, idx[:, None]).squeeze(1).clamp(EPS, 1.0 - EPS)
    return -torch.log(p_true).mean()


def gaussian_kernel(a: torch.Tensor, b: torch.Tensor, sigma) -> torch.Tensor:
    d2 = (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)
    return torch.exp(-d2 / (2.0 * sigma ** 2))


def mmd_distance(x, y, sigma):
    """Biased (V-statistic) squared MMD with a Gaussian kernel.

    Accepts (n, d) / (m, d) tensors or nested sequences; returns a tensor for
    tensor input and a float otherwise.
    """
    as_float = not isinstance(x, torch.Tensor)
    x = torch.from_numpy(np.array(x, dtype=np.float64)) if as_float else x
    y = torch.from_numpy(np.array(y, dtype=np.float64)) if not isinstance(y, torch.Tensor) else y
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if len(x) < 1 or len(y) < 1:
        raise EmptyBatch("MMD needs at least one vector per side")
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"vector dims {x.shape[1]} and {y.shape[1]} differ")
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    val = (gaussian_kernel(x, x, sigma).mean() + gaussian_kernel(y, y, sigma).mean()
           - 2.0 * gaussian_kernel(x, y, sigma).mean())
    val = val.clamp_min(0.0)
    return float(val) if as_float else val


def median_bandwidth(x: torch.Tensor, y: torch.Tensor) -> float:
    """Median pairwise distance over the pooled batch (median heuristic)."""
    z = torch.cat([x, y]).detach()
    d = torch.cdist(z, z)
    iu = torch.triu_indices(len(z), len(z), offset=1)
    vals = d[iu[0], iu[1]]
    vals = vals[vals > 0]
    return float(vals.median()) if len(vals) else 1.0


def alignment_loss(f_s_he: torch.Tensor, f_s_ihc: torch.Tensor, sigma: Optional[float] = None):
    """MMD between globally pooled shared features of the two stains."""
    a = f_s_he.mean(dim=(-2, -1))
    b = f_s_ihc.mean(dim=(-2, -1))
    if sigma is None:
        sigma = median_bandwidth(a, b)
    return mmd_distance(a, b, sigma)


def encoder_loss(domain_term, align_term, lambda_domain: float = 1.0, lambda_align: float = 0.1):
    if lambda_domain < 0 or lambda_align < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_domain * domain_term + lambda_align * align_term


def pooled_features(feats: torch.Tensor) -> torch.Tensor:
    """Global average pool (B, C, h, w) -> (B, C)."""
    return F.adaptive_avg_pool2d(feats, 1).flatten(1)
