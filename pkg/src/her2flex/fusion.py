"""Attention-weighted fusion of shared/specific features and the grade classifier.

Feature maps are concatenated (shared, HE-specific, IHC-specific), reduced by
a 1x1 convolution, re-weighted per channel by
``sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))`` and classified into the four
HER2 grades.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Her2Grade, Modality
from .encoder import (
    DomainHead,
    FeatureBundle,
    SharedEncoder,
    SpecificEncoder,
    alignment_loss,
    domain_classification_loss,
    encode_shared,
    encode_specific,
    encoder_loss,
)
from .errors import InvalidDistribution, LengthMismatch, SpatialMismatch
from .layers import ResidualEncoder

EPS = 1e-7


class AttentionMlp(nn.Module):
    """Bias-free two-layer MLP shared by the average- and max-pooled paths."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.w0 = nn.Linear(channels, channels // reduction, bias=False)
        self.w1 = nn.Linear(channels // reduction, channels, bias=False)

    def forward(self, v):
        return self.w1(F.relu(self.w0(v)))


def concat_and_reduce(bundle: FeatureBundle, reducer: nn.Module) -> torch.Tensor:
    shapes = {t.shape[-2:] for t in (bundle.f_s, bundle.f_he, bundle.f_ihc)}
    if len(shapes) != 1:
        raise SpatialMismatch(f"feature maps disagree on spatial dims: {sorted(tuple(s) for s in shapes)}")
    return reducer(torch.cat([bundle.f_s, bundle.f_he, bundle.f_ihc], dim=1))


def channel_attention(mlp: AttentionMlp, feats: torch.Tensor) -> torch.Tensor:
    """Channel weights in (0, 1) for (B, C, h, w) or (C, h, w) features."""
    single = feats.ndim == 3
    x = feats[None] if single else feats
    avg = x.mean(dim=(-2, -1))
    mx = x.amax(dim=(-2, -1))
    m = torch.sigmoid(mlp(avg) + mlp(mx))
    return m[0] if single else m


def apply_attention(feats: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    ch = feats.shape[-3]
    if weights.shape[-1] != ch:
        raise LengthMismatch(f"{weights.shape[-1]} weights for {ch} channels")
    return feats * weights[..., None, None]


class ClassifierHead(nn.Module):
    """GAP + linear map to grade logits."""

    def __init__(self, channels: int, n_classes: int = len(Her2Grade)):
        super().__init__()
        self.fc = nn.Linear(channels, n_classes)

    def forward(self, feats):
        return self.fc(feats.mean(dim=(-2, -1)))


def classify_grade(head: ClassifierHead, fused: torch.Tensor) -> torch.Tensor:
    return torch.softmax(head(fused), dim=-1)


def predict_grades(probs) -> list:
    """Argmax per row; ties go to the lowest grade."""
    p = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    p = np.atleast_2d(p)
    return [Her2Grade(int(i)) for i in np.argmax(p, axis=1)]


def weighted_cross_entropy(probs, label, weights):
    """Mean over samples of ``-w[y] * ln p[y]`` (probabilities clamped at 1e-7).

    ``probs`` is a (C,) or (B, C) array/tensor, ``label`` an int or sequence.
    """
    as_float = not isinstance(probs, torch.Tensor)
    p = torch.from_numpy(np.array(probs, dtype=np.float64)) if as_float else probs
    w = torch.as_tensor(weights, dtype=p.dtype)
    if p.ndim == 1:
        p = p[None]
    y = torch.as_tensor(np.atleast_1d(np.asarray(label, dtype=np.int64)))
    sums = p.detach().sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
        raise InvalidDistribution(f"probabilities sum to {sums.tolist()}")
    if (w <= 0).any():
        raise ValueError("class weights must be positive")
    p_true = p.gather(1, y[:, None]).squeeze(1).clamp(EPS, 1.0)
    loss = -(w[y] * torch.log(p_true)).mean()
    return float(loss) if as_float else loss


def weighted_cross_entropy_logits(logits: torch.Tensor, labels: torch.Tensor, weights) -> torch.Tensor:
    """Same objective as :func:`weighted_cross_entropy`, computed from logits."""
    w = torch.as_tensor(weights, dtype=logits.dtype)
    logp = F.log_softmax(logits, dim=-1).gather(1, labels[:, None]).squeeze(1)
    return -(w[labels] * logp).mean()


def total_loss(cls_term, enc_term, recon_term):
    return cls_term + enc_term + recon_term


def inverse_frequency_weights(counts: Sequence[int]) -> np.ndarray:
    """Class weights proportional to 1/count, normalised to mean 1."""
    c = np.asarray(counts, dtype=np.float64)
    if (c <= 0).any():
        raise ValueError(f"every class needs at least one training sample, got counts {c.tolist()}")
    w = 1.0 / c
    return w / w.mean()


@dataclass
class Her2Output:
    logits: torch.Tensor
    probs: torch.Tensor
    bundle: FeatureBundle
    fused: torch.Tensor
    attention: Optional[torch.Tensor]


@dataclass(frozen=True)
class NetConfig:
    shared_widths: tuple = (16, 32, 64, 64)
    shared_strides: tuple = (2, 2, 2, 1)
    specific_widths: tuple = (16, 32, 32)
    specific_strides: tuple = (2, 2, 2)
    reduced_channels: int = 64
    reduction: int = 8
    attention: bool = True


class Her2Net(nn.Module):
    """Shared/specific encoders, attention fusion and grade head in one module."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        self.shared = SharedEncoder(cfg.shared_widths, cfg.shared_strides)
        self.spec_he = SpecificEncoder(Modality.HE, cfg.specific_widths, cfg.specific_strides)
        self.spec_ihc = SpecificEncoder(Modality.IHC, cfg.specific_widths, cfg.specific_strides)
        self.domain_head = DomainHead(self.spec_he.out_channels)
        in_ch = self.shared.out_channels + 2 * self.spec_he.out_channels
        self.reducer = nn.Conv2d(in_ch, cfg.reduced_channels, 1)
        self.attn = AttentionMlp(cfg.reduced_channels, cfg.reduction) if cfg.attention else None
        self.head = ClassifierHead(cfg.reduced_channels)

    def encode(self, he: torch.Tensor, ihc: torch.Tensor, reconstructed=frozenset()) -> FeatureBundle:
        # one pass over both stains so batch statistics cover both
        s_he, s_ihc = encode_shared(self.shared, torch.cat([he, ihc])).split(len(he))
        return FeatureBundle(
            f_s=0.5 * (s_he + s_ihc),
            f_he=encode_specific(self.spec_he, he, Modality.HE),
            f_ihc=encode_specific(self.spec_ihc, ihc, Modality.IHC),
            reconstructed=frozenset(reconstructed),
            f_s_he=s_he,
            f_s_ihc=s_ihc,
        )

    def forward(self, he: torch.Tensor, ihc: torch.Tensor, reconstructed=frozenset()) -> Her2Output:
        bundle = self.encode(he, ihc, reconstructed)
        reduced = concat_and_reduce(bundle, self.reducer)
        weights = None
        if self.attn is not None:
            weights = channel_attention(self.attn, reduced)
            fused = apply_attention(reduced, weights)
        else:
            fused = reduced
        logits = self.head(fused)
        return Her2Output(logits, torch.softmax(logits, -1), bundle, fused, weights)

    def encoder_terms(self, out: Her2Output):
        """Domain-classification and alignment losses for one forward pass."""
        b = out.bundle
        n = len(b.f_he)
        feats = torch.cat([b.f_he, b.f_ihc])
        labels = [Modality.HE] * n + [Modality.IHC] * n
        l_domain = domain_classification_loss(self.domain_head, feats, labels)
        l_align = alignment_loss(b.f_s_he, b.f_s_ihc) if n > 1 else b.f_s_he.sum() * 0.0
        return l_domain, l_align

    def losses(self, out: Her2Output, labels: torch.Tensor, class_weights,
               lambda_domain: float = 1.0, lambda_align: float = 0.1) -> dict:
        l_cls = weighted_cross_entropy_logits(out.logits, labels, class_weights)
        l_domain, l_align = self.encoder_terms(out)
        l_enc = encoder_loss(l_domain, l_align, lambda_domain, lambda_align)
        return {"L_cls": l_cls, "L_domain": l_domain, "L_align": l_align, "L_enc": l_enc}


class BaselineNet(nn.Module):
    """Plain residual CNN on one stain (3 channels) or an image-level concat (6)."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (16, 32, 64, 64),
                 strides: Sequence[int] = (2, 2, 2, 1)):
        super().__init__()
        self.features = ResidualEncoder(in_channels, widths, strides)
        self.head = ClassifierHead(self.features.out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))
