"""Command line interface.

    her2flex synth  --out DIR [--config CFG] [--force]
    her2flex train  --run RUN --stage {selector,cmgan,classifier,joint} [--config CFG]
    her2flex eval   --run RUN --arm ARM [--corrupt {none,he,ihc}]
    her2flex infer  --run RUN --arity {dual,single} IMAGE [IMAGE] [--dump-reconstruction] [--out JSON]
    her2flex export-features --run RUN [--arm ARM] [--split test]

Relative ``--run`` / ``--out`` paths resolve under ``$HER2FLEX_OUT`` when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, module_arrays, restore_modules, save_checkpoint
from .config import RunConfig
from .data import Direction, Modality, load_dataset, load_image, save_image, split_dataset, synth_corpus, write_corpus
from .errors import ArityViolation, Her2FlexError, MissingCheckpoint
from .metrics import psnr, ssim, tsne_fit
from .router import Arity, InputRequest, ModalityClassifier, PathKind, route
from . import training as T

log = logging.getLogger("her2flex")

OUT_ENV = "HER2FLEX_OUT"
STAGES = ("selector", "cmgan", "classifier", "joint")


# --------------------------------------------------------------------------
# helpers

def resolve(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def write_rows(path: Path, rows: Sequence[dict]) -> None:
    """Comma-delimited rows; column order follows first appearance."""
    cols: list = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in cols})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else v


def run_config(run: Path, config: Optional[str]) -> RunConfig:
    """Resolve the run's config: an explicit file is persisted into the run."""
    run.mkdir(parents=True, exist_ok=True)
    if config:
        cfg = RunConfig.load(config)
        cfg.save(run / "config.ini")
        return cfg
    if not (run / "config.ini").exists():
        raise MissingCheckpoint(f"{run} has no config.ini; pass --config")
    return RunConfig.load(run / "config.ini")


def load_corpus(cfg: RunConfig):
    if cfg.data.root:
        root = Path(cfg.data.root)
        samples = load_dataset(root / "HE", root / "IHC", require_pairs=True, size=cfg.data.size)
    else:
        samples = synth_corpus(cfg.data.n_per_grade, cfg.data.size, cfg.seed)
    return split_dataset(samples, cfg.seed)


def ckpt_path(run: Path, name: str) -> Path:
    return run / "checkpoints" / f"{name}.ckpt"


def _progress(stage, row):
    log.info("%s %s", stage, " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                      for k, v in row.items()))


def load_generator(run: Path, cfg: RunConfig, direction: Direction):
    arrays, header = load_checkpoint(ckpt_path(run, f"cmgan-{direction.value}"), expected_stage="cmgan")
    g, d = T.build_gan(cfg, direction)
    restore_modules({"generator": g, "discriminator": d}, arrays)
    return g, d


def load_generators(run: Path, cfg: RunConfig, directions) -> dict:
    return {dr: load_generator(run, cfg, dr)[0] for dr in directions}


def load_classifier(run: Path, cfg: RunConfig, arm: str):
    arrays, header = load_checkpoint(ckpt_path(run, f"classifier-{arm}"), expected_stage="classifier")
    if header["extra"].get("arm") != arm:
        raise MissingCheckpoint(f"checkpoint holds arm {header['extra'].get('arm')!r}, not {arm!r}")
    model = T.build_arm_model(cfg, arm)
    restore_modules({"model": model}, arrays)
    return model


def load_selector(run: Path, cfg: RunConfig) -> ModalityClassifier:
    arrays, _ = load_checkpoint(ckpt_path(run, "selector"), expected_stage="selector")
    clf = ModalityClassifier(cfg.model.selector_widths)
    restore_modules({"selector": clf}, arrays)
    return clf


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig(seed=args.seed)
    overrides = {k: v for k, v in (("n_per_grade", args.n_per_grade), ("size", args.size)) if v is not None}
    if overrides:
        cfg = cfg.replace(data=overrides)
    out = resolve(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise Her2FlexError(f"{out} is not empty; pass --force to overwrite")
    samples = synth_corpus(cfg.data.n_per_grade, cfg.data.size, cfg.seed)
    rows = write_corpus(samples, out)
    for r in rows:
        r["seed"] = cfg.seed
    write_rows(out / "manifest.csv", rows)
    cfg.replace(data={"root": str(out)}).save(out / "config.ini")
    print(f"wrote {len(rows)} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    run = resolve(args.run)
    cfg = run_config(run, args.config)
    train, val, _ = load_corpus(cfg)
    hist_dir = run / "history"
    if args.stage == "selector":
        clf, rows, val_acc = T.train_selector_stage(cfg, train, val)
        save_checkpoint(ckpt_path(run, "selector"), module_arrays({"selector": clf}), "selector",
                        cfg.to_dict(), {"val_accuracy": val_acc})
        write_rows(hist_dir / "selector.csv", rows)
        print(f"selector val accuracy {val_acc:.4f}")
    elif args.stage == "cmgan":
        directions = [Direction(d) for d in args.direction] if args.direction else list(Direction)
        for direction in directions:
            res = T.train_cmgan_stage(cfg, direction, train, val, _progress)
            save_checkpoint(ckpt_path(run, f"cmgan-{direction.value}"),
                            module_arrays({"generator": res.generator, "discriminator": res.discriminator}),
                            "cmgan", cfg.to_dict(), {"direction": direction.value})
            write_rows(hist_dir / f"cmgan-{direction.value}.csv", res.history)
            _figures(cfg, lambda: _reconstruction_figure(res.generator, direction, val,
                                                          run / "figures" / f"reconstruction-{direction.value}.png"))
            print(f"cmgan {direction.value} val psnr {res.history[-1]['val_psnr']:.3f} dB")
    elif args.stage == "classifier":
        arms = args.arms or list(cfg.eval.arms)
        for arm in arms:
            spec = T.arm_spec(arm)
            gens = load_generators(run, cfg, spec.directions)
            res = T.train_classifier_stage(cfg, arm, T.arm_inputs(arm, train, gens),
                                           T.arm_inputs(arm, val, gens), _progress)
            save_checkpoint(ckpt_path(run, f"classifier-{arm}"), module_arrays({"model": res.model}),
                            "classifier", cfg.to_dict(),
                            {"arm": arm, "best_epoch": res.best_epoch, "val_accuracy": res.best_val_accuracy})
            write_rows(hist_dir / f"classifier-{arm}.csv", res.history)
            _figures(cfg, lambda: _history_figure(res.history, run / "figures" / f"history-{arm}.png", arm))
            print(f"{arm}: best val accuracy {res.best_val_accuracy:.4f} (epoch {res.best_epoch})")
    elif args.stage == "joint":
        model = load_classifier(run, cfg, "dual_full")
        g, d = load_generator(run, cfg, Direction.HE_TO_IHC)
        res = T.train_joint_stage(cfg, model, g, d, T.arm_inputs("dual_full", train, {}),
                                  T.arm_inputs("dual_full", val, {}), _progress)
        save_checkpoint(ckpt_path(run, "joint"),
                        module_arrays({"model": res.model, "generator": res.generator,
                                       "discriminator": res.discriminator}),
                        "joint", cfg.to_dict(), {"val_accuracy": res.history[-1]["val_accuracy"]})
        write_rows(hist_dir / "joint.csv", res.history)
        print(f"joint val accuracy {res.history[-1]['val_accuracy']:.4f}")
    return 0


def cmd_eval(args) -> int:
    run = resolve(args.run)
    cfg = run_config(run, None)
    _, _, test = load_corpus(cfg)
    arm = args.arm
    spec = T.arm_spec(arm)
    model = load_classifier(run, cfg, arm)
    gens = load_generators(run, cfg, spec.directions)
    corrupt_mod = None if args.corrupt == "none" else Modality(args.corrupt.upper())
    inputs = T.arm_inputs(arm, test, gens, corrupt_mod, cfg.eval.corrupt_brightness,
                          cfg.eval.corrupt_noise, cfg.seed)
    ev = T.evaluate_arm(arm, model, inputs, T.arm_arity(arm))
    if spec.reconstructed:
        m = next(iter(spec.reconstructed))
        real = T.stack(test, m)
        fake = inputs.he if m is Modality.HE else inputs.ihc
        ev.report.psnr_db = float(np.mean([psnr(f, r) for f, r in zip(fake, real)]))
        ev.report.ssim = float(np.mean([ssim(f, r) for f, r in zip(fake, real)]))
    ev.report.extra["corrupted"] = args.corrupt
    suffix = "" if args.corrupt == "none" else f"-corrupt-{args.corrupt}"
    out = run / "eval" / f"{arm}{suffix}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(ev.report.to_json())
    write_rows(out / "confusion.csv", [
        {"true": t, **{f"pred_{p}": n for p, n in zip(("0", "1+", "2+", "3+"), row)}}
        for t, row in zip(("0", "1+", "2+", "3+"), ev.report.confusion)])
    write_rows(out / "predictions.csv", ev.predictions)
    _figures(cfg, lambda: _confusion_figure(ev, out / "confusion.png"))
    print(f"{arm}{suffix}: accuracy {ev.report.accuracy:.4f} macro_f1 {ev.report.macro_f1:.4f}")
    return 0


def cmd_infer(args) -> int:
    run = resolve(args.run)
    cfg = run_config(run, None)
    arity = Arity(args.arity)
    images = [load_image(p, cfg.data.size) for p in args.images]
    if arity is Arity.DUAL:
        if len(images) != 2:
            raise ArityViolation(f"--arity dual needs 2 images (H&E then IHC), got {len(images)}")
        req = InputRequest(arity, he=images[0], ihc=images[1])
        decision = route(req, None)
    else:
        if len(images) != 1:
            raise ArityViolation(f"--arity single needs 1 image, got {len(images)}")
        decision = route(InputRequest(arity, he=images[0]), load_selector(run, cfg))
        if decision.detected_modality is Modality.IHC:
            req = InputRequest(arity, ihc=images[0])
        else:
            req = InputRequest(arity, he=images[0])

    sources = {Modality.HE: "real" if req.he is not None else "reconstructed",
               Modality.IHC: "real" if req.ihc is not None else "reconstructed"}
    he, ihc = req.he, req.ihc
    if decision.path is PathKind.DUAL_PATH:
        arm = "dual_full"
    else:
        arm = "he_plus_fake_ihc" if decision.direction is Direction.HE_TO_IHC else "ihc_plus_fake_he"
        g = load_generators(run, cfg, [decision.direction])[decision.direction]
        src = he if he is not None else ihc
        fake = T.reconstruct(g, src[None])[0]
        if decision.direction is Direction.HE_TO_IHC:
            ihc = fake
        else:
            he = fake
    model = load_classifier(run, cfg, arm)
    inputs = T.ArmInputs(he[None], ihc[None], np.zeros(1, dtype=np.int64), [Path(args.images[0]).stem],
                         frozenset(m for m, s in sources.items() if s == "reconstructed"))
    probs, _ = T.predict_arm(model, inputs)
    from .fusion import predict_grades

    record = {
        "id": Path(args.images[0]).stem,
        "arity": arity.value,
        "decision": decision.as_record(),
        "arm": arm,
        "modalities": {m.value: s for m, s in sources.items()},
        "reconstruction_used": decision.path is PathKind.SINGLE_PATH,
        "probabilities": {lab: round(float(p), 6) for lab, p in zip(("0", "1+", "2+", "3+"), probs[0])},
        "predicted_grade": predict_grades(probs)[0].label,
    }
    out = resolve(args.out) if args.out else run / "infer" / f"{record['id']}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.dump_reconstruction and decision.path is PathKind.SINGLE_PATH:
        # the fake stain goes beside the record
        target = decision.direction.target.value
        fake_path = out.with_name(f"{out.stem}-{target}-reconstructed.png")
        save_image(fake_path, fake)
        record["reconstruction_file"] = fake_path.name
    text = json.dumps(record, indent=2, sort_keys=True)
    out.write_text(text + "\n")
    print(text)
    return 0


def cmd_export_features(args) -> int:
    run = resolve(args.run)
    cfg = run_config(run, None)
    splits = dict(zip(("train", "val", "test"), load_corpus(cfg)))
    samples = splits[args.split]
    arm = args.arm
    spec = T.arm_spec(arm)
    model = load_classifier(run, cfg, arm)
    inputs = T.arm_inputs(arm, samples, load_generators(run, cfg, spec.directions))
    _, feats = T.predict_arm(model, inputs)
    out = run / "features" / f"{arm}-{args.split}"
    write_rows(out / "features.csv", [
        {"id": sid, "grade": ("0", "1+", "2+", "3+")[g], **{f"f{j}": float(v) for j, v in enumerate(row)}}
        for sid, g, row in zip(inputs.ids, inputs.grades, feats)])
    perplexity = min(cfg.eval.tsne_perplexity, (len(feats) - 1) / 3.0 - 1e-6)
    res = tsne_fit(feats, perplexity, cfg.seed, cfg.eval.tsne_iterations)
    write_rows(out / "tsne.csv", [
        {"id": sid, "x": float(p[0]), "y": float(p[1]), "grade": ("0", "1+", "2+", "3+")[g]}
        for sid, g, p in zip(inputs.ids, inputs.grades, res.embedding)])
    _figures(cfg, lambda: _tsne_figure(res.embedding, inputs.grades, out / "tsne.png", arm))
    print(f"exported {len(feats)} feature rows to {out} (final KL {res.kl_final:.4f})")
    return 0


# --------------------------------------------------------------------------
# figures (imported lazily so headless library use never touches matplotlib)

def _figures(cfg: RunConfig, fn) -> None:
    if cfg.eval.figures:
        fn()


def _reconstruction_figure(g, direction: Direction, samples, path):
    from .plotting import plot_reconstructions

    src = T.stack(samples[:4], direction.source)
    plot_reconstructions(src, T.reconstruct(g, src), T.stack(samples[:4], direction.target), path,
                         titles=(f"real {direction.source.value}", f"fake {direction.target.value}",
                                 f"real {direction.target.value}"))


def _history_figure(rows, path, arm):
    from .plotting import plot_history

    plot_history(rows, ["L_cls", "L_enc", "val_accuracy"], path, title=arm)


def _confusion_figure(ev, path):
    from .plotting import plot_confusion

    plot_confusion(np.asarray(ev.report.confusion), path, title=ev.arm)


def _tsne_figure(points, grades, path, arm):
    from .plotting import plot_tsne

    plot_tsne(points, grades, path, title=f"t-SNE, {arm}")


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="her2flex", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic paired corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-per-grade", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--run", required=True)
    t.add_argument("--config")
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--arms", nargs="+", choices=T.ARMS)
    t.add_argument("--direction", nargs="+", choices=[d.value for d in Direction])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one arm on the test split")
    e.add_argument("--run", required=True)
    e.add_argument("--arm", required=True, choices=T.ARMS)
    e.add_argument("--corrupt", default="none", choices=("none", "he", "ihc"))
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict the HER2 grade of one case")
    i.add_argument("--run", required=True)
    i.add_argument("--arity", required=True, choices=[a.value for a in Arity])
    i.add_argument("images", nargs="+")
    i.add_argument("--dump-reconstruction", action="store_true",
                   help="also write the reconstructed stain beside the record")
    i.add_argument("--out", help="record path (default RUN/infer/<id>.json)")
    i.set_defaults(func=cmd_infer)

    x = sub.add_parser("export-features", help="dump pooled fused features and a t-SNE embedding")
    x.add_argument("--run", required=True)
    x.add_argument("--arm", default="dual_full", choices=T.ARMS)
    x.add_argument("--split", default="test", choices=("train", "val", "test"))
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Her2FlexError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
