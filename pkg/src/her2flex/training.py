"""Staged training and evaluation of the pipeline arms.

Stages: modality selector, one CM-GAN per direction, one classifier per
experiment arm, and an optional joint fine-tune of the dual model together
with the HE->IHC generator under the summed objective.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .cmgan import (
    AdversarialRole,
    DiscriminatorNet,
    GeneratorNet,
    adversarial_loss,
    gan_train_step,
    pyramid_l1_loss,
    reconstruction_loss,
)
from .config import RunConfig
from .data import AugmentConfig, Direction, Her2Grade, Modality, PairedSample, augment, corrupt
from .encoder import pooled_features
from .errors import MissingCheckpoint, NonFiniteLoss
from .fusion import (
    BaselineNet,
    Her2Net,
    inverse_frequency_weights,
    predict_grades,
    total_loss,
    weighted_cross_entropy_logits,
)
from .layers import to_images, to_tensor
from .metrics import MetricsReport, confusion, prf_metrics, psnr, ssim
from .router import ModalityClassifier, train_selector

log = logging.getLogger(__name__)

ARMS = (
    "he_only_baseline",
    "ihc_only_baseline",
    "he_plus_fake_ihc",
    "ihc_plus_fake_he",
    "dual_concat_baseline",
    "dual_full",
    "dual_no_attention",
)


@dataclass(frozen=True)
class ArmSpec:
    """How an arm builds its model and sources its two inputs.

    ``he`` / ``ihc`` are "real", "fake" (reconstructed from the other stain)
    or None (unused).
    """

    name: str
    model: str  # "her2" or "baseline"
    he: Optional[str]
    ihc: Optional[str]
    attention: bool = True

    @property
    def directions(self) -> tuple:
        out = []
        if self.ihc == "fake":
            out.append(Direction.HE_TO_IHC)
        if self.he == "fake":
            out.append(Direction.IHC_TO_HE)
        return tuple(out)

    @property
    def reconstructed(self) -> frozenset:
        r = set()
        if self.he == "fake":
            r.add(Modality.HE)
        if self.ihc == "fake":
            r.add(Modality.IHC)
        return frozenset(r)


ARM_SPECS = {
    "he_only_baseline": ArmSpec("he_only_baseline", "baseline", "real", None),
    "ihc_only_baseline": ArmSpec("ihc_only_baseline", "baseline", None, "real"),
    "dual_concat_baseline": ArmSpec("dual_concat_baseline", "baseline", "real", "real"),
    "dual_full": ArmSpec("dual_full", "her2", "real", "real"),
    "dual_no_attention": ArmSpec("dual_no_attention", "her2", "real", "real", attention=False),
    "he_plus_fake_ihc": ArmSpec("he_plus_fake_ihc", "her2", "real", "fake"),
    "ihc_plus_fake_he": ArmSpec("ihc_plus_fake_he", "her2", "fake", "real"),
}


def arm_spec(name: str) -> ArmSpec:
    try:
        return ARM_SPECS[name]
    except KeyError:
        raise ValueError(f"unknown arm {name!r}; choose from {', '.join(ARMS)}") from None


# --------------------------------------------------------------------------
# plumbing

def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def stack(samples: Sequence[PairedSample], modality: Modality) -> np.ndarray:
    return np.stack([s.image(modality) for s in samples]).astype(np.float32)


def grade_array(samples: Sequence[PairedSample]) -> np.ndarray:
    return np.array([int(s.grade) for s in samples], dtype=np.int64)


def make_optimizer(params, lr: float, weight_decay: float, power: float, total_steps: int):
    """AdamW with polynomial decay of the learning rate to zero over ``total_steps``."""
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.PolynomialLR(opt, total_iters=max(1, total_steps), power=power)
    return opt, sched


def batch_indices(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def augment_batch(he: Optional[np.ndarray], ihc: Optional[np.ndarray], idx: np.ndarray,
                  cfg: AugmentConfig, rng: np.random.Generator):
    """Augment the selected pairs; returns (he, ihc) float32 batches (or None)."""
    if not cfg.enabled:
        return (he[idx] if he is not None else None, ihc[idx] if ihc is not None else None)
    out_he, out_ihc = [], []
    for i in idx:
        s = augment(PairedSample(str(i), Her2Grade.G0,
                                 he[i] if he is not None else None,
                                 ihc[i] if ihc is not None else None), cfg, rng)
        out_he.append(s.he)
        out_ihc.append(s.ihc)
    return (np.stack(out_he) if he is not None else None,
            np.stack(out_ihc) if ihc is not None else None)


def class_weights(cfg: RunConfig, grades: np.ndarray) -> np.ndarray:
    if cfg.loss.class_weights == "uniform":
        return np.ones(len(Her2Grade))
    return inverse_frequency_weights(np.bincount(grades, minlength=len(Her2Grade)))


def reconstruct(g: GeneratorNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    g.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(to_images(g(to_tensor(images[i:i + batch_size]))))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# selector

def train_selector_stage(cfg: RunConfig, train: Sequence[PairedSample], val: Sequence[PairedSample]):
    """Train the stain classifier on every H&E and IHC image of the train split."""
    seed_everything(cfg.seed)
    clf = ModalityClassifier(cfg.model.selector_widths)
    imgs, labels = _modality_set(train)
    clf, hist = train_selector(clf, imgs, labels, epochs=cfg.optim.selector_epochs, seed=cfg.seed,
                               lr=cfg.optim.selector_lr, batch_size=cfg.optim.batch_size,
                               weight_decay=cfg.optim.weight_decay)
    vimgs, vlabels = _modality_set(val)
    clf.eval()
    with torch.no_grad():
        pred = clf(to_tensor(vimgs)).argmax(1).numpy()
    val_acc = float(np.mean(pred == np.array([m.index for m in vlabels])))
    rows = [{"epoch": h.epoch, "loss": h.loss, "train_accuracy": h.accuracy} for h in hist]
    rows[-1]["val_accuracy"] = val_acc
    return clf, rows, val_acc


def _modality_set(samples):
    imgs, labels = [], []
    for s in samples:
        for m in (Modality.HE, Modality.IHC):
            if s.image(m) is not None:
                imgs.append(s.image(m))
                labels.append(m)
    return np.stack(imgs), labels


# --------------------------------------------------------------------------
# CM-GAN

@dataclass
class GanResult:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    history: list


def build_gan(cfg: RunConfig, direction: Direction):
    g = GeneratorNet(direction, base=cfg.model.gen_base, depth=cfg.model.gen_depth)
    d = DiscriminatorNet(base=cfg.model.disc_base, n_layers=cfg.model.disc_layers)
    return g, d


def reconstruction_quality(g: GeneratorNet, src: np.ndarray, tgt: np.ndarray, levels: int) -> dict:
    fake = reconstruct(g, src)
    return {
        "val_l1": float(np.mean([pyramid_l1_loss(f, t, levels) for f, t in zip(fake, tgt)])),
        "val_psnr": float(np.mean([psnr(f, t) for f, t in zip(fake, tgt)])),
        "val_ssim": float(np.mean([ssim(f, t) for f, t in zip(fake, tgt)])),
    }


def train_cmgan_stage(cfg: RunConfig, direction: Direction, train: Sequence[PairedSample],
                      val: Sequence[PairedSample], progress: Optional[Callable] = None) -> GanResult:
    """Alternate discriminator / generator updates for ``gan_epochs`` epochs.

    Only geometric augmentation is applied: photometric jitter on the target
    stain would be unpredictable noise for the L1 term.
    """
    seed_everything(cfg.seed + 101 * (1 + list(Direction).index(direction)))
    g, d = build_gan(cfg, direction)
    src = stack(train, direction.source)
    tgt = stack(train, direction.target)
    vsrc, vtgt = stack(val, direction.source), stack(val, direction.target)
    o = cfg.optim
    steps = o.gan_epochs * -(-len(src) // o.batch_size)
    opt_g, sch_g = make_optimizer(g.parameters(), o.gan_lr, o.weight_decay, o.poly_power, steps)
    opt_d, sch_d = make_optimizer(d.parameters(), o.gan_lr, o.weight_decay, o.poly_power, steps)
    aug = replace(cfg.augment, brightness_delta=0.0, contrast_delta=0.0, noise_std=0.0, degrade_prob=0.0)
    rng = np.random.default_rng([cfg.seed, 7, list(Direction).index(direction)])
    history = []
    for epoch in range(1, o.gan_epochs + 1):
        sums = np.zeros(4)
        nb = 0
        for idx in batch_indices(len(src), o.batch_size, rng):
            bs, bt = augment_batch(src, tgt, idx, aug, rng)
            r = gan_train_step(g, d, to_tensor(bs), to_tensor(bt), opt_g, opt_d,
                               cfg.loss.lambda_gan, cfg.loss.lambda_l1, cfg.loss.pyramid_levels)
            sch_g.step()
            sch_d.step()
            sums += (r.g_loss, r.d_loss, r.l1, r.gan)
            nb += 1
        row = {"epoch": epoch, "g_loss": float(sums[0] / nb), "d_loss": float(sums[1] / nb),
               "l1": float(sums[2] / nb), "gan": float(sums[3] / nb)}
        row.update(reconstruction_quality(g, vsrc, vtgt, cfg.loss.pyramid_levels))
        history.append(row)
        if progress:
            progress(f"cmgan {direction.value}", row)
    return GanResult(g, d, history)


# --------------------------------------------------------------------------
# classifiers

def build_arm_model(cfg: RunConfig, arm: str) -> nn.Module:
    spec = arm_spec(arm)
    if spec.model == "her2":
        return Her2Net(cfg.model.net_config(attention=spec.attention))
    in_ch = 3 * ((spec.he is not None) + (spec.ihc is not None))
    return BaselineNet(in_ch, cfg.model.shared_widths, cfg.model.shared_strides)


@dataclass
class ArmInputs:
    he: Optional[np.ndarray]
    ihc: Optional[np.ndarray]
    grades: np.ndarray
    ids: list
    reconstructed: frozenset = frozenset()


def arm_inputs(arm: str, samples: Sequence[PairedSample], generators: dict,
               corrupt_modality: Optional[Modality] = None, brightness: float = -0.3,
               noise_std: float = 0.1, seed: int = 0) -> ArmInputs:
    """Assemble the arm's (H&E, IHC) arrays, reconstructing or corrupting as asked.

    Corruption hits the named stain after any reconstruction.
    """
    spec = arm_spec(arm)
    arrays = {}
    for m, source in ((Modality.HE, spec.he), (Modality.IHC, spec.ihc)):
        if source == "real":
            arrays[m] = stack(samples, m)
        elif source == "fake":
            direction = Direction.from_source(m.other)
            if direction not in generators:
                raise MissingCheckpoint(f"arm {arm} needs the {direction.value} generator")
            arrays[m] = reconstruct(generators[direction], stack(samples, m.other))
        else:
            arrays[m] = None
    if corrupt_modality is not None and arrays.get(corrupt_modality) is not None:
        rng = np.random.default_rng([seed, 99])
        arrays[corrupt_modality] = np.stack([corrupt(x, brightness, noise_std, rng)
                                             for x in arrays[corrupt_modality]])
    return ArmInputs(arrays[Modality.HE], arrays[Modality.IHC], grade_array(samples),
                     [s.id for s in samples], spec.reconstructed)


def _baseline_input(he, ihc):
    parts = [t for t in (he, ihc) if t is not None]
    return torch.cat(parts, dim=1)


def forward_arm(model: nn.Module, he: Optional[torch.Tensor], ihc: Optional[torch.Tensor],
                reconstructed=frozenset()):
    """Returns (logits, Her2Output or None)."""
    if isinstance(model, Her2Net):
        out = model(he, ihc, reconstructed)
        return out.logits, out
    return model(_baseline_input(he, ihc)), None


def _arm_loss(cfg: RunConfig, model, logits, out, labels, weights) -> dict:
    l_cls = weighted_cross_entropy_logits(logits, labels, weights)
    terms = {"L_cls": l_cls}
    if out is not None:
        enc = model.losses(out, labels, weights, cfg.loss.lambda_domain, cfg.loss.lambda_align)
        terms.update({k: enc[k] for k in ("L_domain", "L_align", "L_enc")})
    else:
        terms["L_enc"] = l_cls * 0.0
    terms["L_total"] = terms["L_cls"] + terms["L_enc"]
    return terms


@dataclass
class ClassifierResult:
    model: nn.Module
    history: list
    best_epoch: int
    best_val_accuracy: float


@torch.no_grad()
def predict_arm(model: nn.Module, inputs: ArmInputs, batch_size: int = 128):
    """Return (probabilities (N, 4), pooled fused features (N, C) or None)."""
    model.eval()
    probs, feats = [], []
    for idx in batch_indices(len(inputs.grades), batch_size, None):
        he = to_tensor(inputs.he[idx]) if inputs.he is not None else None
        ihc = to_tensor(inputs.ihc[idx]) if inputs.ihc is not None else None
        logits, out = forward_arm(model, he, ihc, inputs.reconstructed)
        probs.append(torch.softmax(logits, -1).double().numpy())
        if out is not None:
            feats.append(pooled_features(out.fused).double().numpy())
        else:
            feats.append(pooled_features(model.features(_baseline_input(he, ihc))).double().numpy())
    return np.concatenate(probs), np.concatenate(feats)


def accuracy_of(probs: np.ndarray, grades: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == grades))


def train_classifier_stage(cfg: RunConfig, arm: str, train: ArmInputs, val: ArmInputs,
                           progress: Optional[Callable] = None) -> ClassifierResult:
    o = cfg.optim
    if o.epochs < 1:
        raise ValueError("classifier training needs at least one epoch")
    seed_everything(cfg.seed + 1000 + ARMS.index(arm))
    model = build_arm_model(cfg, arm)
    steps = o.epochs * -(-len(train.grades) // o.batch_size)
    opt, sched = make_optimizer(model.parameters(), o.lr, o.weight_decay, o.poly_power, steps)
    weights = class_weights(cfg, train.grades)
    rng = np.random.default_rng([cfg.seed, 11, ARMS.index(arm)])
    labels_all = torch.from_numpy(train.grades)
    history = []
    best = (-1.0, 0, None)
    for epoch in range(1, o.epochs + 1):
        model.train()
        sums: dict = {}
        nb = 0
        for idx in batch_indices(len(train.grades), o.batch_size, rng):
            bhe, bihc = augment_batch(train.he, train.ihc, idx, cfg.augment, rng)
            he = to_tensor(bhe) if bhe is not None else None
            ihc = to_tensor(bihc) if bihc is not None else None
            logits, out = forward_arm(model, he, ihc, train.reconstructed)
            terms = _arm_loss(cfg, model, logits, out, labels_all[idx], weights)
            if not torch.isfinite(terms["L_total"]):
                raise NonFiniteLoss(f"{arm} epoch {epoch}: " + ", ".join(
                    f"{k}={v.item():.4g}" for k, v in terms.items()))
            opt.zero_grad(set_to_none=True)
            terms["L_total"].backward()
            opt.step()
            sched.step()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            nb += 1
        probs, _ = predict_arm(model, val)
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()},
               "val_accuracy": accuracy_of(probs, val.grades)}
        history.append(row)
        if row["val_accuracy"] > best[0]:
            best = (row["val_accuracy"], epoch, copy.deepcopy(model.state_dict()))
        if progress:
            progress(f"classifier {arm}", row)
    model.load_state_dict(best[2])
    return ClassifierResult(model, history, best[1], best[0])


# --------------------------------------------------------------------------
# joint fine-tune

@dataclass
class JointResult:
    model: Her2Net
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    history: list = field(default_factory=list)


def joint_objective(cfg: RunConfig, model: Her2Net, g: GeneratorNet, d: DiscriminatorNet,
                    he: torch.Tensor, ihc: torch.Tensor, labels: torch.Tensor, weights) -> dict:
    """Summed objective over classification, encoder and reconstruction terms.

    The classifier sees the real pair and the (real H&E, reconstructed IHC)
    pair, so classification gradients also reach the generator.
    """
    fake = g(he)
    for p in d.parameters():
        p.requires_grad_(False)
    gan = adversarial_loss(d(he, fake), AdversarialRole.GENERATOR_STEP)
    for p in d.parameters():
        p.requires_grad_(True)
    l_recon = reconstruction_loss(gan, pyramid_l1_loss(fake, ihc, cfg.loss.pyramid_levels),
                                  cfg.loss.lambda_gan, cfg.loss.lambda_l1)
    out_real = model(he, ihc)
    out_fake = model(he, fake, frozenset({Modality.IHC}))
    l_cls = 0.5 * (weighted_cross_entropy_logits(out_real.logits, labels, weights)
                   + weighted_cross_entropy_logits(out_fake.logits, labels, weights))
    enc = model.losses(out_real, labels, weights, cfg.loss.lambda_domain, cfg.loss.lambda_align)
    return {"L_cls": l_cls, "L_enc": enc["L_enc"], "L_recon": l_recon,
            "L_total": total_loss(l_cls, enc["L_enc"], l_recon), "fake": fake}


def train_joint_stage(cfg: RunConfig, model: Her2Net, g: GeneratorNet, d: DiscriminatorNet,
                      train: ArmInputs, val: ArmInputs, progress: Optional[Callable] = None) -> JointResult:
    seed_everything(cfg.seed + 5000)
    o = cfg.optim
    steps = o.joint_epochs * -(-len(train.grades) // o.batch_size)
    params = list(model.parameters()) + list(g.parameters())
    opt, sched = make_optimizer(params, o.lr, o.weight_decay, o.poly_power, steps)
    opt_d, sched_d = make_optimizer(d.parameters(), o.gan_lr, o.weight_decay, o.poly_power, steps)
    weights = class_weights(cfg, train.grades)
    rng = np.random.default_rng([cfg.seed, 13])
    # the real IHC doubles as the reconstruction target, so it is never degraded here
    aug = replace(cfg.augment, degrade_prob=0.0)
    labels_all = torch.from_numpy(train.grades)
    history = []
    for epoch in range(1, o.joint_epochs + 1):
        model.train()
        g.train()
        d.train()
        sums: dict = {}
        nb = 0
        for idx in batch_indices(len(train.grades), o.batch_size, rng):
            bhe, bihc = augment_batch(train.he, train.ihc, idx, aug, rng)
            he, ihc = to_tensor(bhe), to_tensor(bihc)
            with torch.no_grad():
                fake = g(he)
            d_loss = 0.5 * (adversarial_loss(d(he, ihc), AdversarialRole.DISC_REAL)
                            + adversarial_loss(d(he, fake), AdversarialRole.DISC_FAKE))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            sched_d.step()
            terms = joint_objective(cfg, model, g, d, he, ihc, labels_all[idx], weights)
            terms.pop("fake")
            if not torch.isfinite(terms["L_total"]):
                raise NonFiniteLoss(f"joint epoch {epoch}: " + ", ".join(
                    f"{k}={v.item():.4g}" for k, v in terms.items()))
            opt.zero_grad(set_to_none=True)
            terms["L_total"].backward()
            opt.step()
            sched.step()
            terms["d_loss"] = d_loss
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            nb += 1
        probs, _ = predict_arm(model, val)
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()},
               "val_accuracy": accuracy_of(probs, val.grades)}
        history.append(row)
        if progress:
            progress("joint", row)
    return JointResult(model, g, d, history)


# --------------------------------------------------------------------------
# evaluation

@dataclass
class ArmEvaluation:
    arm: str
    report: MetricsReport
    predictions: list
    features: np.ndarray
    probs: np.ndarray


def evaluate_arm(arm: str, model: nn.Module, inputs: ArmInputs, arity: str) -> ArmEvaluation:
    probs, feats = predict_arm(model, inputs)
    pred = predict_grades(probs)
    cm = confusion(inputs.grades, [int(p) for p in pred])
    report = prf_metrics(cm)
    report.extra["arm"] = arm
    report.extra["n_samples"] = int(len(inputs.grades))
    rows = []
    recon = ";".join(sorted(m.value for m in inputs.reconstructed)) or "none"
    for i, sid in enumerate(inputs.ids):
        row = {"id": sid, "arity": arity, "reconstructed": recon}
        row.update({f"p_{g.label}": round(float(probs[i, int(g)]), 6) for g in Her2Grade})
        row["predicted"] = pred[i].label
        row["true"] = Her2Grade(int(inputs.grades[i])).label
        rows.append(row)
    return ArmEvaluation(arm, report, rows, feats, probs)


def arm_arity(arm: str) -> str:
    spec = arm_spec(arm)
    real = (spec.he == "real") + (spec.ihc == "real")
    return "dual" if real == 2 else "single"
