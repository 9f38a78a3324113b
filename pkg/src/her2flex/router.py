"""Missing-modality branch selection.

The caller states whether an input is dual or single stain. Dual inputs go
straight to the fusion network; a single image is first classified as H&E or
IHC so the matching reconstruction direction can be activated.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import Direction, Modality
from .errors import ArityViolation, DegenerateDataset, NonFiniteLoss
from .fusion import weighted_cross_entropy_logits
from .layers import to_tensor


class Arity(enum.Enum):
    DUAL = "dual"
    SINGLE = "single"


class PathKind(enum.Enum):
    DUAL_PATH = "DualPath"
    SINGLE_PATH = "SinglePath"


@dataclass
class InputRequest:
    arity: Arity
    he: Optional[np.ndarray] = None
    ihc: Optional[np.ndarray] = None

    def validate(self) -> None:
        present = (self.he is not None) + (self.ihc is not None)
        if self.arity is Arity.DUAL and present != 2:
            raise ArityViolation(f"dual arity declared but {present} image(s) supplied")
        if self.arity is Arity.SINGLE and present != 1:
            raise ArityViolation(f"single arity declared but {present} image(s) supplied")

    @property
    def single_image(self) -> np.ndarray:
        return self.he if self.he is not None else self.ihc


@dataclass(frozen=True)
class BranchDecision:
    path: PathKind
    direction: Optional[Direction] = None
    detected_modality: Optional[Modality] = None
    confidence: float = 1.0

    def __post_init__(self):
        if self.path is PathKind.DUAL_PATH and self.direction is not None:
            raise ValueError("dual path never reconstructs")
        if self.path is PathKind.SINGLE_PATH:
            if self.direction is None or self.detected_modality is None:
                raise ValueError("single path needs a detected modality and a direction")
            if Direction.from_source(self.detected_modality) is not self.direction:
                raise ValueError(f"{self.detected_modality.value} input cannot use {self.direction.value}")

    def as_record(self) -> dict:
        return {
            "path": self.path.value,
            "direction": self.direction.value if self.direction else None,
            "detected_modality": self.detected_modality.value if self.detected_modality else None,
            "confidence": round(float(self.confidence), 6),
        }


class ModalityClassifier(nn.Module):
    """Three conv blocks, global average pooling and one linear layer (2 logits)."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32)):
        super().__init__()
        layers, prev = [], 3
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            prev = w
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(prev, 2)

    def forward(self, x):
        return self.fc(self.features(x).mean(dim=(-2, -1)))

    def probabilities(self, x):
        return torch.softmax(self(x), dim=-1)


_MODALITIES = (Modality.HE, Modality.IHC)


def classify_modality(clf: ModalityClassifier, img: np.ndarray) -> tuple[Modality, float]:
    clf.eval()
    dtype = next(clf.parameters()).dtype
    with torch.no_grad():
        p = clf.probabilities(to_tensor(img, dtype=dtype))[0].double().numpy()
    k = int(np.argmax(p))
    return _MODALITIES[k], float(p[k])


def route(req: InputRequest, clf: ModalityClassifier) -> BranchDecision:
    req.validate()
    if req.arity is Arity.DUAL:
        return BranchDecision(PathKind.DUAL_PATH)
    modality, conf = classify_modality(clf, req.single_image)
    return BranchDecision(PathKind.SINGLE_PATH, Direction.from_source(modality), modality, conf)


def hue_oracle_modality(img: np.ndarray, threshold: float = -0.05) -> Modality:
    """Colour-statistic reference: H&E is pink/purple (blue above green),
    IHC is pale with brown DAB (green at or above blue)."""
    img = np.asarray(img, dtype=np.float64)
    return Modality.IHC if (img[..., 1] - img[..., 2]).mean() > threshold else Modality.HE


@dataclass
class SelectorEpoch:
    epoch: int
    loss: float
    accuracy: float


def train_selector(clf: ModalityClassifier, images: np.ndarray, labels: Sequence[Modality],
                   epochs: int = 5, seed: int = 0, lr: float = 1e-3, batch_size: int = 32,
                   weight_decay: float = 1e-2) -> tuple[ModalityClassifier, list[SelectorEpoch]]:
    """Fit the selector with uniformly weighted two-class cross-entropy.

    History row 0 is the untrained model; rows 1..epochs follow each epoch.
    """
    y = np.array([Modality(m).index for m in labels], dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise DegenerateDataset("selector training needs both H&E and IHC images")
    dtype = next(clf.parameters()).dtype
    x = to_tensor(images, dtype=dtype)
    yt = torch.from_numpy(y)
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(clf.parameters(), lr=lr, weight_decay=weight_decay)
    weights = [1.0, 1.0]

    def evaluate(e):
        clf.eval()
        with torch.no_grad():
            logits = clf(x)
            loss = weighted_cross_entropy_logits(logits, yt, weights).item()
            acc = (logits.argmax(1) == yt).double().mean().item()
        return SelectorEpoch(e, loss, acc)

    history = [evaluate(0)]
    for e in range(1, epochs + 1):
        clf.train()
        order = rng.permutation(len(y))
        for i in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[i:i + batch_size])
            loss = weighted_cross_entropy_logits(clf(x[idx]), yt[idx], weights)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"selector loss {loss.item()} at epoch {e}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        history.append(evaluate(e))
    return clf, history
