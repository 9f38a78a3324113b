"""Paired H&E / IHC samples: file layout, synthesis, augmentation and splitting.

Images are float32 arrays of shape (H, W, 3) in [0, 1]. On disk a corpus
follows the BCI layout::

    <root>/HE/<id>_<split>_<grade>.png
    <root>/IHC/<id>_<split>_<grade>.png

where ``<grade>`` is one of ``0``, ``1+``, ``2+``, ``3+``.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import GradeMismatch, MissingGrade, TooFewSamples, UnpairedSample

__all__ = [
    "Her2Grade",
    "Modality",
    "Direction",
    "PairedSample",
    "AugmentConfig",
    "GeometryDraw",
    "parse_grade_from_filename",
    "format_filename",
    "load_image",
    "save_image",
    "load_dataset",
    "write_corpus",
    "augment",
    "sample_geometry",
    "hflip",
    "vflip",
    "corrupt",
    "split_dataset",
    "synth_corpus",
    "synth_sample",
    "brown_proxy",
    "class_counts",
]


class Her2Grade(enum.IntEnum):
    G0 = 0
    G1 = 1
    G2 = 2
    G3 = 3

    @property
    def label(self) -> str:
        return _GRADE_LABELS[self.value]

    @classmethod
    def from_label(cls, label: str) -> "Her2Grade":
        try:
            return cls(_GRADE_LABELS.index(label))
        except ValueError:
            raise MissingGrade(f"unknown HER2 grade label {label!r}") from None


_GRADE_LABELS = ("0", "1+", "2+", "3+")


class Modality(enum.Enum):
    HE = "HE"
    IHC = "IHC"

    @property
    def index(self) -> int:
        return 0 if self is Modality.HE else 1

    @property
    def other(self) -> "Modality":
        return Modality.IHC if self is Modality.HE else Modality.HE


class Direction(enum.Enum):
    HE_TO_IHC = "HEtoIHC"
    IHC_TO_HE = "IHCtoHE"

    @property
    def source(self) -> Modality:
        return Modality.HE if self is Direction.HE_TO_IHC else Modality.IHC

    @property
    def target(self) -> Modality:
        return self.source.other

    @classmethod
    def from_source(cls, modality: Modality) -> "Direction":
        return cls.HE_TO_IHC if modality is Modality.HE else cls.IHC_TO_HE


@dataclass
class PairedSample:
    id: str
    grade: Her2Grade
    he: Optional[np.ndarray] = None
    ihc: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.he is None and self.ihc is None:
            raise ValueError(f"sample {self.id!r} carries neither H&E nor IHC")
        self.grade = Her2Grade(self.grade)

    def image(self, modality: Modality) -> Optional[np.ndarray]:
        return self.he if modality is Modality.HE else self.ihc


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation knobs. Geometry is shared by both images of a pair,
    photometric jitter is drawn per modality.

    With probability ``degrade_prob`` one stain of the sample (chosen at
    random) is additionally darkened by up to ``degrade_brightness`` and
    overlaid with Gaussian noise of std up to ``degrade_noise``.
    """

    enabled: bool = True
    rotation_max_deg: float = 15.0
    hflip: bool = True
    vflip: bool = True
    crop_fraction: float = 0.9
    brightness_delta: float = 0.1
    contrast_delta: float = 0.1
    noise_std: float = 0.0
    degrade_prob: float = 0.0
    degrade_brightness: float = 0.3
    degrade_noise: float = 0.1

    def __post_init__(self):
        if self.rotation_max_deg < 0:
            raise ValueError("rotation_max_deg must be >= 0")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError("crop_fraction must lie in (0, 1]")
        if not 0.0 <= self.degrade_prob <= 1.0:
            raise ValueError("degrade_prob must lie in [0, 1]")


# --------------------------------------------------------------------------
# filenames and disk IO

_NAME_RE = re.compile(r"^(?P<id>.+)_(?P<split>[^_]+)_(?P<grade>0|1\+|2\+|3\+)\.(?P<ext>[A-Za-z0-9]+)$")


def _match_name(name: str) -> re.Match:
    m = _NAME_RE.match(Path(name).name)
    if m is None:
        raise MissingGrade(f"no HER2 grade token in filename {name!r}")
    return m


def parse_grade_from_filename(name: str) -> Her2Grade:
    """Return the grade encoded as ``<id>_<split>_<grade>.<ext>``."""
    return Her2Grade.from_label(_match_name(name).group("grade"))


def format_filename(sample_id: str, split: str, grade: Her2Grade, ext: str = "png") -> str:
    if "_" in split:
        raise ValueError("split token may not contain '_'")
    return f"{sample_id}_{split}_{Her2Grade(grade).label}.{ext}"


def load_image(path, size: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _index_dir(directory: Path) -> dict:
    out = {}
    for p in sorted(directory.iterdir()):
        if not p.is_file():
            continue
        m = _match_name(p.name)
        out[(m.group("id"), m.group("split"))] = (p, Her2Grade.from_label(m.group("grade")))
    return out


def load_dataset(he_dir, ihc_dir=None, require_pairs: bool = True,
                 size: Optional[int] = None) -> list[PairedSample]:
    """Load a BCI-style corpus, pairing files on their ``<id>_<split>`` prefix.

    Either directory may be None for single-modality corpora, in which case
    ``require_pairs`` must be false. Images are resized to ``size`` when given.
    """
    he_idx = _index_dir(Path(he_dir)) if he_dir is not None else {}
    ihc_idx = _index_dir(Path(ihc_dir)) if ihc_dir is not None else {}
    keys = sorted(set(he_idx) | set(ihc_idx))
    samples = []
    for key in keys:
        he, ihc = he_idx.get(key), ihc_idx.get(key)
        if require_pairs and (he is None or ihc is None):
            missing = "IHC" if ihc is None else "HE"
            raise UnpairedSample(f"{key[0]}_{key[1]} has no {missing} counterpart")
        if he is not None and ihc is not None and he[1] != ihc[1]:
            raise GradeMismatch(f"{he[0].name} and {ihc[0].name} disagree on grade")
        grade = (he or ihc)[1]
        samples.append(PairedSample(
            id=key[0],
            grade=grade,
            he=load_image(he[0], size) if he else None,
            ihc=load_image(ihc[0], size) if ihc else None,
        ))
    samples.sort(key=lambda s: s.id)
    return samples


def write_corpus(samples: Sequence[PairedSample], root, split_of: Optional[dict] = None) -> list[dict]:
    """Write samples in the BCI layout and return one manifest row per sample."""
    root = Path(root)
    (root / "HE").mkdir(parents=True, exist_ok=True)
    (root / "IHC").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        split = (split_of or {}).get(s.id, "all")
        name = format_filename(s.id, split, s.grade)
        if s.he is not None:
            save_image(root / "HE" / name, s.he)
        if s.ihc is not None:
            save_image(root / "IHC" / name, s.ihc)
        rows.append({"id": s.id, "split": split, "grade": s.grade.label, "file": name})
    return rows


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class GeometryDraw:
    angle: float
    flip_h: bool
    flip_v: bool
    crop_top: float
    crop_left: float


def sample_geometry(cfg: AugmentConfig, rng: np.random.Generator) -> GeometryDraw:
    angle = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    flip_h = bool(cfg.hflip and rng.random() < 0.5)
    flip_v = bool(cfg.vflip and rng.random() < 0.5)
    top, left = rng.random(2)
    return GeometryDraw(angle, flip_h, flip_v, float(top), float(left))


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def vflip(img: np.ndarray) -> np.ndarray:
    return img[::-1]


def _geometry_coords(shape, g: GeometryDraw, crop_fraction: float) -> np.ndarray:
    """Source coordinates (2, H, W) for rotate -> flip -> crop-and-rescale,
    composed into a single resampling."""
    h, w = shape[:2]
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    ch, cw = h * crop_fraction, w * crop_fraction
    y = (ii + 0.5) * ch / h - 0.5 + g.crop_top * (h - ch)
    x = (jj + 0.5) * cw / w - 0.5 + g.crop_left * (w - cw)
    if g.flip_v:
        y = (h - 1) - y
    if g.flip_h:
        x = (w - 1) - x
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(g.angle)
    dy, dx = y - cy, x - cx
    src_y = cy + math.cos(a) * dy - math.sin(a) * dx
    src_x = cx + math.sin(a) * dy + math.cos(a) * dx
    return np.stack([src_y, src_x])


def _apply_geometry(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.map_coordinates(img[..., c], coords, order=1, mode="mirror")
                     for c in range(img.shape[-1])], axis=-1)


def _apply_photometric(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    c = rng.uniform(1.0 - cfg.contrast_delta, 1.0 + cfg.contrast_delta)
    mean = img.mean()
    out = (img - mean) * c + mean + b
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=img.shape)
    return out


def augment(sample: PairedSample, cfg: AugmentConfig, rng: np.random.Generator) -> PairedSample:
    if not cfg.enabled:
        return sample
    geo = sample_geometry(cfg, rng)
    ref = sample.he if sample.he is not None else sample.ihc
    coords = _geometry_coords(ref.shape, geo, cfg.crop_fraction)
    out = {}
    for name in ("he", "ihc"):
        img = getattr(sample, name)
        if img is None:
            out[name] = None
            continue
        img = _apply_geometry(img.astype(np.float64), coords)
        img = _apply_photometric(img, cfg, rng)
        out[name] = np.clip(img, 0.0, 1.0).astype(np.float32)
    if cfg.degrade_prob > 0 and rng.random() < cfg.degrade_prob:
        present = [k for k in ("he", "ihc") if out[k] is not None]
        name = present[int(rng.integers(len(present)))]
        out[name] = corrupt(out[name], -rng.uniform(0.0, cfg.degrade_brightness),
                            rng.uniform(0.0, cfg.degrade_noise), rng)
    return replace(sample, **out)


def corrupt(img: np.ndarray, brightness: float = -0.3, noise_std: float = 0.1,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Simulate a degraded stain: additive brightness shift plus Gaussian noise."""
    rng = rng if rng is not None else np.random.default_rng(0)
    out = img.astype(np.float64) + brightness + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# splitting

def split_dataset(samples: Sequence, seed: int):
    """Shuffle and split 8:1:1. Validation and test take floor(n/10) each."""
    n = len(samples)
    if n < 10:
        raise TooFewSamples(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    k = n // 10
    val = [samples[i] for i in order[:k]]
    test = [samples[i] for i in order[k:2 * k]]
    train = [samples[i] for i in order[2 * k:]]
    return train, val, test


def class_counts(samples: Sequence[PairedSample]) -> np.ndarray:
    counts = np.zeros(len(Her2Grade), dtype=np.int64)
    for s in samples:
        counts[int(s.grade)] += 1
    return counts


# --------------------------------------------------------------------------
# synthetic paired stains
#
# Both renderings share one latent layout of cells. A grade-dependent
# fraction of cells is HER2-positive. In IHC those cells carry a brown
# membrane ring whose intensity and arc completeness grow with grade; in
# H&E the same cells only show slightly enlarged, elongated nuclei. Arcs
# start at the poles of the nucleus, so their placement follows the
# orientation visible in H&E.

_POS_FRACTION = (0.04, 0.30, 0.60, 0.90)
_RING_INTENSITY = (0.15, 0.40, 0.65, 0.90)
_RING_COMPLETENESS = (0.30, 0.55, 0.80, 1.00)
_CELL_DENSITY = (15.0, 16.5, 18.0, 19.5)  # expected cells per 64x64 patch

_HE_STROMA = np.array([0.90, 0.64, 0.80])
_HE_NUCLEUS = np.array([0.36, 0.20, 0.55])
_IHC_BACKGROUND = np.array([0.93, 0.91, 0.88])
_IHC_NUCLEUS = np.array([0.50, 0.58, 0.80])
_DAB_BROWN = np.array([0.52, 0.30, 0.10])


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def synth_sample(grade: Her2Grade, size: int, rng: np.random.Generator,
                 sample_id: str = "synth") -> PairedSample:
    g = int(grade)
    scale = size / 64.0
    n_cells = max(4, int(rng.poisson(_CELL_DENSITY[g] * scale * scale)))
    frac = float(np.clip(_POS_FRACTION[g] + rng.normal(0.0, 0.07), 0.0, 1.0))
    intensity = _RING_INTENSITY[g] * rng.uniform(0.85, 1.15)
    completeness = float(np.clip(_RING_COMPLETENESS[g] + rng.normal(0.0, 0.05), 0.1, 1.0))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    nuc = np.zeros((size, size))
    ring = np.zeros((size, size))
    for _ in range(n_cells):
        cy, cx = rng.uniform(0, size, 2)
        positive = rng.random() < frac
        r = rng.uniform(2.0, 2.7) * scale
        if positive:
            r *= 1.2
            elong = rng.uniform(1.2, 1.45)
        else:
            elong = rng.uniform(1.0, 1.15)
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        d = np.sqrt((u / (r * elong)) ** 2 + (v * elong / r) ** 2)
        nuc = np.maximum(nuc, 1.0 / (1.0 + np.exp((d - 1.0) * 6.0)))
        if positive:
            rm = 1.9 * r
            dm = np.sqrt((u / (rm * elong)) ** 2 + (v * elong / rm) ** 2)
            band = np.exp(-((dm - 1.0) * rm) ** 2 / (2 * (0.8 * scale) ** 2))
            # membrane signal grows from the two poles of the long axis
            pole = np.abs(np.arctan2(v, u))
            arc = np.minimum(pole, math.pi - pole) < completeness * math.pi / 2
            ring = np.maximum(ring, band * arc)

    texture = _smooth_field(rng, size, 4.0 * scale)[..., None]
    he = _HE_STROMA + 0.04 * texture
    he = he * (1 - 0.85 * nuc[..., None]) + _HE_NUCLEUS * 0.85 * nuc[..., None]
    he = he + rng.normal(0.0, 0.03, size=he.shape)

    texture = _smooth_field(rng, size, 4.0 * scale)[..., None]
    ihc = _IHC_BACKGROUND + 0.03 * texture
    ihc = ihc * (1 - 0.6 * nuc[..., None]) + _IHC_NUCLEUS * 0.6 * nuc[..., None]
    a = (intensity * ring)[..., None]
    ihc = ihc * (1 - a) + _DAB_BROWN * a
    ihc = ihc + rng.normal(0.0, 0.03, size=ihc.shape)

    return PairedSample(
        id=sample_id,
        grade=Her2Grade(g),
        he=np.clip(he, 0, 1).astype(np.float32),
        ihc=np.clip(ihc, 0, 1).astype(np.float32),
    )


def synth_corpus(n_per_grade: int, size: int = 64, seed: int = 0) -> list[PairedSample]:
    """Deterministic synthetic corpus of ``4 * n_per_grade`` registered pairs.

    Every sample draws from its own generator seeded by ``(seed, grade, index)``,
    so samples can be produced in any order or in parallel.
    """
    if n_per_grade < 1:
        raise ValueError("n_per_grade must be >= 1")
    if size < 32:
        raise ValueError("size must be >= 32")
    out = []
    for g in Her2Grade:
        for i in range(n_per_grade):
            rng = np.random.default_rng([seed, int(g), i])
            out.append(synth_sample(g, size, rng, sample_id=f"{int(g) * n_per_grade + i:05d}"))
    out.sort(key=lambda s: s.id)
    return out


def brown_proxy(img: np.ndarray) -> float:
    """Mean of R - B over the image; rises with DAB (brown) stain load."""
    img = np.asarray(img, dtype=np.float64)
    return float((img[..., 0] - img[..., 2]).mean())
