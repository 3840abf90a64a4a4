"""Command-line entry point: ``modality-forge <command> ...``.

Exit codes: 0 success, 2 malformed spec/config/input, 3 too few modalities or
subjects, 4 checkpoint fingerprint mismatch, 5 unknown modality, 6 unknown
metric, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("modality_forge")

EXIT_SPEC, EXIT_MODALITIES, EXIT_FINGERPRINT, EXIT_MODALITY, EXIT_METRIC = 2, 3, 4, 5, 6
CACHE_ENV = "MODALITY_FORGE_CACHE"


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _json_out(doc) -> None:
    print(json.dumps(doc, sort_keys=True))


# -- config handling --------------------------------------------------------


def _load_run_config(path, manifest=None):
    from modality_forge.networks import NetConfig
    from modality_forge.training.config import ConfigError, RunConfig, TrainConfig

    try:
        if path:
            return RunConfig.load(path)
        if manifest is None:
            return RunConfig()
        # no file: size the networks to the data
        K = max(manifest.K, 1)
        return RunConfig(networks=NetConfig(K=K),
                         training=TrainConfig(K=K, modalities=list(manifest.modalities)))
    except ConfigError as exc:
        raise CLIError(str(exc), EXIT_SPEC) from exc


def _override(train_cfg, args, names):
    """Flags win over the config file."""
    from modality_forge.training.config import ConfigError

    changes = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    if not changes:
        return train_cfg
    try:
        return dataclasses.replace(train_cfg, **changes)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CLIError(str(exc), EXIT_SPEC) from exc


def _read_data(path):
    from modality_forge.data import ManifestError, read_manifest

    if path is None:
        raise CLIError("no data directory given (--data or data.root in the config)", EXIT_SPEC)
    try:
        return read_manifest(path)
    except (ManifestError, OSError, ValueError) as exc:
        raise CLIError(f"cannot read dataset manifest in {path}: {exc}", EXIT_SPEC) from exc


def _load_ckpt(path, expected=None):
    from modality_forge.training.checkpoint import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(Path(path), expected=expected)
    except CheckpointError as exc:
        code = EXIT_FINGERPRINT if "fingerprint" in str(exc) else EXIT_SPEC
        raise CLIError(str(exc), code) from exc


def _modality_index(ckpt, name: str) -> int:
    names = ckpt.meta.get("modalities") or ckpt.train_config.modalities
    if name not in names:
        raise CLIError(f"unknown modality {name!r}; checkpoint knows {names}", EXIT_MODALITY)
    return names.index(name)


def _subject_of(path: Path, given: str | None) -> str:
    if given:
        return given
    stem = Path(path).stem
    subject, sep, _ = stem.rpartition("_")
    return subject if sep else stem


def _read_input(path):
    from modality_forge.data.volume_io import VolumeFormatError, read_array

    try:
        vol = read_array(path)
    except (OSError, VolumeFormatError) as exc:
        raise CLIError(f"cannot read volume {path}: {exc}", EXIT_SPEC) from exc
    if vol.ndim == 2:
        vol = vol[None]
    if vol.ndim != 3:
        raise CLIError(f"expected a 2D slice or 3D volume, got shape {vol.shape}", EXIT_SPEC)
    return vol


# -- commands ---------------------------------------------------------------


def cmd_phantom(args) -> int:
    from modality_forge.data import PhantomSpec, PhantomSpecError, generate_phantom

    try:
        spec = PhantomSpec.from_file(args.spec) if args.spec else PhantomSpec()
        spec.validate()
    except PhantomSpecError as exc:
        raise CLIError(f"invalid phantom spec: {exc}", EXIT_SPEC) from exc
    out = args.out
    if out is None:
        cache = os.environ.get(CACHE_ENV)
        if not cache:
            raise CLIError(f"--out not given and {CACHE_ENV} is unset", EXIT_SPEC)
        key = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:12]
        out = Path(cache) / f"phantom-{key}-seed{args.seed}"
        if (out / "manifest.json").exists():
            _json_out({"out": str(out), "cached": True})
            return 0
    try:
        man = generate_phantom(spec, args.seed, out)
    except PhantomSpecError as exc:
        raise CLIError(str(exc), EXIT_SPEC) from exc
    _json_out({"out": str(out), "entries": len(man.entries), "subjects": len(man.subjects())})
    return 0


def cmd_train_translate(args) -> int:
    from modality_forge.plotting import training_curves
    from modality_forge.training.checkpoint import save_checkpoint
    from modality_forge.training.translation import TrainingError, train_translation

    pre = _load_run_config(args.config) if args.config else None
    data = args.data or (pre.data.get("root") if pre else None)
    man = _read_data(data)
    run = pre or _load_run_config(None, man)
    if len(set(e.modality for e in man.entries)) < 2 or man.K < 2:
        raise CLIError("translation training needs a dataset with at least two modalities",
                       EXIT_MODALITIES)
    if run.networks.K != man.K:
        raise CLIError(f"config K={run.networks.K} but dataset has {man.K} modalities", EXIT_SPEC)
    train = _override(run.training, args, ("seed", "lr", "max_steps", "translation_epochs",
                                           "batch_size", "log_every"))
    run = dataclasses.replace(run, training=train, data={**run.data, "root": str(data)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")  # snapshot before the first step
    resume = args.resume
    if resume is None and (out / "checkpoint" / "manifest.json").exists():
        resume = out / "checkpoint"
    if resume is not None:
        _load_ckpt(resume, expected=run.networks)  # surface fingerprint errors early
    try:
        ckpt = train_translation(man, train, run.networks, out_dir=out, resume=resume,
                                 steps=args.steps)
    except TrainingError as exc:
        raise CLIError(str(exc), EXIT_MODALITIES if "modalit" in str(exc) else 1) from exc
    save_checkpoint(ckpt, out / "checkpoint")
    if (out / "train_log.jsonl").exists():
        training_curves(out / "train_log.jsonl", out / "training_curves.png")
    _json_out({"out": str(out), "step": ckpt.step, "checkpoint": str(out / "checkpoint")})
    return 0


def cmd_train_seg(args) -> int:
    from modality_forge.data.sampling import build_pool
    from modality_forge.plotting import metric_summary, training_curves
    from modality_forge.training.checkpoint import save_checkpoint
    from modality_forge.training.segmentation import evaluate_segmentation, train_segmentation

    run = _load_run_config(args.config) if args.config else None
    tr = _load_ckpt(args.from_ckpt, expected=run.networks if run else None)
    data = args.data or (run.data.get("root") if run else None)
    man = _read_data(data)
    train = run.training if run else tr.train_config
    train = _override(train, args, ("seed", "segmentation_epochs", "finetune_epochs",
                                    "steps_per_epoch", "batch_size"))
    if args.baseline:
        train = dataclasses.replace(train, seg_baseline=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"from_ckpt": str(args.from_ckpt), "data": {"root": str(data)},
                "networks": dataclasses.asdict(tr.net_config), "training": train.to_dict()}
    (out / "config.json").write_text(json.dumps(snapshot, indent=1) + "\n")
    ckpt = train_segmentation(tr, man, train, out_dir=out)
    save_checkpoint(ckpt, out / "checkpoint")
    report = {"train": ckpt.meta["train_dice"]}
    if any(e.split == "test" for e in man.entries):
        pool = build_pool(man, "test", size=train.seg_size, num_classes=tr.net_config.num_classes)
        report["test"] = evaluate_segmentation(ckpt, pool)
    doc = json.loads((out / "dice_report.json").read_text())
    doc.update({"dice_by_split": report,
                "mean_by_split": {k: float(np.mean(list(v.values()))) for k, v in report.items()}})
    (out / "dice_report.json").write_text(json.dumps(doc, indent=1) + "\n")
    with open(out / "dice_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "structure", "dice"])
        for split, vals in report.items():
            for k, v in vals.items():
                w.writerow([split, k, v])
    training_curves(out / "train_log.jsonl", out / "training_curves.png", keys=("loss",))
    metric_summary([{"metric": f"dice ({split})", "structure": k, "target": "labels",
                     "mean": v, "std": 0.0} for split, vals in report.items() for k, v in vals.items()],
                   out / "dice_report.png")
    _json_out({"out": str(out), "mean_dice": doc["mean_by_split"]})
    return 0


def cmd_translate(args) -> int:
    from modality_forge.data.volume_io import write_array
    from modality_forge.plotting import modality_panel
    from modality_forge.training.translation import TrainingError, impute_modalities

    ckpt = _load_ckpt(args.ckpt)
    if ckpt.translation is None:
        raise CLIError("checkpoint has no translation module", EXIT_SPEC)
    src = _modality_index(ckpt, args.source)
    vol = _read_input(args.input)
    subject = _subject_of(args.input, args.subject)
    names = ckpt.meta.get("modalities") or ckpt.train_config.modalities
    try:
        outs = impute_modalities(vol, src, ckpt)
    except (TrainingError, ValueError) as exc:
        raise CLIError(str(exc), EXIT_SPEC) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, img in zip(names, outs):
        p = out / f"{subject}_{name}.mvol"
        write_array(np.asarray(img, np.float32), p)
        written.append(str(p))
    (out / "provenance.json").write_text(json.dumps({"source": args.source, "input": str(args.input),
                                                     "subject": subject}) + "\n")
    modality_panel(outs, names, out / f"{subject}_translations.png", source=args.source)
    _json_out({"written": written})
    return 0


def cmd_segment(args) -> int:
    from modality_forge.data.volume_io import write_array
    from modality_forge.plotting import label_panel
    from modality_forge.training.segmentation import predict_labels

    ckpt = _load_ckpt(args.ckpt)
    if ckpt.segmentation is None:
        raise CLIError("checkpoint has no segmentation model", EXIT_SPEC)
    src = _modality_index(ckpt, args.source)
    vol = _read_input(args.input)
    subject = _subject_of(args.input, args.subject)
    try:
        labels = predict_labels(ckpt, vol, src)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_SPEC) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = out / f"{subject}_labels.mvol"
    write_array(labels.astype(np.float32), p)
    label_panel(vol, labels, out / f"{subject}_labels.png")
    _json_out({"written": str(p), "classes": sorted(int(v) for v in np.unique(labels))})
    return 0


def cmd_evaluate(args) -> int:
    from modality_forge.metrics.report import (SubjectMismatchError, UnknownMetricError,
                                               check_metrics, evaluate)
    from modality_forge.plotting import metric_summary

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    try:
        check_metrics(metrics)
        report = evaluate(args.pred, args.truth, metrics, num_classes=args.num_classes)
    except UnknownMetricError as exc:
        raise CLIError(str(exc), EXIT_METRIC) from exc
    except SubjectMismatchError as exc:
        raise CLIError(str(exc), EXIT_SPEC) from exc
    paths = report.write(args.out)
    metric_summary(report.aggregates(), Path(args.out).with_suffix(".png"))
    _json_out({k: str(v) for k, v in paths.items()})
    return 0


def cmd_analyze_latent(args) -> int:
    from modality_forge.data.sampling import build_pool
    from modality_forge.metrics.embedding import EmbeddingError, analyze_embeddings
    from modality_forge.plotting import similarity_histogram

    ckpt = _load_ckpt(args.ckpt)
    if ckpt.translation is None:
        raise CLIError("checkpoint has no translation module", EXIT_SPEC)
    man = _read_data(args.data)
    size = (ckpt.train_config.resize_size,) * 2
    try:
        pool = build_pool(man, args.split, size=size)
        analysis = analyze_embeddings(ckpt, pool, max_images=args.max_images, seed=args.seed)
    except EmbeddingError as exc:
        raise CLIError(str(exc), EXIT_MODALITIES) from exc
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_SPEC) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = analysis.to_dict()
    out.write_text(json.dumps(doc, indent=1) + "\n")
    hist = doc["histogram"]
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "positive", "negative"])
        for i in range(len(hist["positive"])):
            w.writerow([hist["edges"][i], hist["edges"][i + 1], hist["positive"][i], hist["negative"][i]])
    similarity_histogram(hist, out.with_suffix(".png"))
    _json_out({"gap": doc["gap"], "silhouette": doc["silhouette"], "degenerate": doc["degenerate"]})
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modality-forge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a procedural multi-modality phantom dataset")
    s.add_argument("--spec", help="phantom spec (JSON or YAML); defaults if omitted")
    s.add_argument("--out", help=f"output directory (default: under ${CACHE_ENV})")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train-translate", help="train the translation module")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--steps", type=int, help="optimizer steps to run in this invocation")
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--epochs", dest="translation_epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--log-every", dest="log_every", type=int)
    s.set_defaults(func=cmd_train_translate)

    s = sub.add_parser("train-seg", help="train the segmentation model on a translation checkpoint")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--from-ckpt", dest="from_ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--baseline", action="store_true",
                   help="single-input model with a fresh encoder, no imputation")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", dest="segmentation_epochs", type=int)
    s.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    s.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.set_defaults(func=cmd_train_seg)

    for name, func, help_ in (("translate", cmd_translate, "impute every modality from one volume"),
                              ("segment", cmd_segment, "label a volume")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--input", required=True)
        s.add_argument("--source", required=True, help="modality name of the input")
        s.add_argument("--out", required=True)
        s.add_argument("--subject", help="subject id for output names (default: from input name)")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--metrics", default="psnr,ssim,ms_ssim,dice,asd")
    s.add_argument("--num-classes", dest="num_classes", type=int)
    s.add_argument("--out", required=True, help="report JSON path; CSV and PNG written alongside")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze-latent", help="content similarity and attribute clustering")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="JSON path; CSV histogram and PNG written alongside")
    s.add_argument("--split", default="test")
    s.add_argument("--max-images", dest="max_images", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_analyze_latent)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: unexpected failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
