"""Directory-level evaluation producing per-pair rows and mean +/- std aggregates."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from modality_forge.data.volume_io import read_array
from modality_forge.metrics.image_quality import ms_ssim, psnr, ssim
from modality_forge.metrics.segmentation import EmptyMaskError, asd, dice

IMAGE_METRICS = {"psnr": psnr, "ssim": ssim, "ms_ssim": ms_ssim}
LABEL_METRICS = ("dice", "asd")
METRICS = (*IMAGE_METRICS, *LABEL_METRICS)
LABELS_NAME = "labels"
PROVENANCE = "provenance.json"
ROW_FIELDS = ("subject", "source", "target", "metric", "structure", "value")
SUMMARY_FIELDS = ("source", "target", "metric", "structure", "mean", "std", "min", "max", "n")


class UnknownMetricError(ValueError):
    pass


class SubjectMismatchError(ValueError):
    def __init__(self, only_pred, only_truth):
        self.only_pred, self.only_truth = sorted(only_pred), sorted(only_truth)
        super().__init__(f"subject mismatch: only in pred {self.only_pred}, "
                         f"only in truth {self.only_truth}")


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def add(self, subject, source, target, metric, value, structure=""):
        self.rows.append(dict(subject=subject, source=source, target=target, metric=metric,
                              structure=structure, value=float(value)))

    def aggregates(self) -> list[dict]:
        groups = defaultdict(list)
        for r in self.rows:
            groups[(r["source"], r["target"], r["metric"], r["structure"])].append(r["value"])
        out = []
        for (source, target, metric, structure), vals in sorted(groups.items(), key=str):
            v = np.asarray(vals)
            # identical members (e.g. all-inf PSNR) have zero spread
            std = 0.0 if (v == v[0]).all() else float(v.std())
            out.append(dict(source=source, target=target, metric=metric, structure=structure,
                            mean=float(v.mean()), std=std, min=float(v.min()),
                            max=float(v.max()), n=int(v.size)))
        return out

    def value(self, metric, target=None, structure=None) -> float:
        """Mean over rows matching the filters."""
        vals = [r["value"] for r in self.rows if r["metric"] == metric
                and (target is None or r["target"] == target)
                and (structure is None or r["structure"] == structure)]
        if not vals:
            raise KeyError(metric)
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {"rows": self.rows, "aggregates": self.aggregates(), "skipped": self.skipped}

    def write(self, path) -> dict[str, Path]:
        """JSON at ``path`` plus ``<stem>.csv`` (rows) and ``<stem>_summary.csv``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True))
        rows_csv = path.with_suffix(".csv")
        summary_csv = path.with_name(path.stem + "_summary.csv")
        _write_csv(rows_csv, ROW_FIELDS, self.rows)
        _write_csv(summary_csv, SUMMARY_FIELDS, self.aggregates())
        return {"json": path, "csv": rows_csv, "summary": summary_csv}


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def check_metrics(names) -> list[str]:
    names = list(names)
    bad = [n for n in names if n not in METRICS]
    if bad:
        raise UnknownMetricError(f"unknown metric(s) {bad}; choose from {list(METRICS)}")
    return names


def scan(directory) -> dict[tuple[str, str], Path]:
    """Map (subject, name) to path for every ``{subject}_{name}.mvol`` file."""
    out = {}
    for p in sorted(Path(directory).glob("*.mvol")):
        subject, sep, name = p.stem.rpartition("_")
        if sep:
            out[(subject, name)] = p
    return out


def evaluate_pair(report, subject, name, pred, truth, metrics, source="", num_classes=None,
                  spacing=1.0):
    if name == LABELS_NAME:
        pred, truth = pred.astype(np.int64), truth.astype(np.int64)
        C = num_classes or int(max(pred.max(), truth.max())) + 1
        for k in range(1, C):
            if "dice" in metrics:
                report.add(subject, source, name, "dice", dice(pred, truth, k), str(k))
            if "asd" in metrics:
                try:
                    report.add(subject, source, name, "asd", asd(pred == k, truth == k, spacing), str(k))
                except EmptyMaskError as err:
                    report.skipped.append(dict(subject=subject, metric="asd", structure=str(k),
                                               code=err.code))
        return
    rng = float(truth.max() - truth.min()) or 1.0
    for m in metrics:
        if m in IMAGE_METRICS:
            report.add(subject, source, name, m, IMAGE_METRICS[m](pred, truth, rng))


def evaluate(pred_dir, truth_dir, metrics=METRICS, num_classes=None, spacing=1.0) -> MetricReport:
    """Compare matching ``{subject}_{name}.mvol`` files of two directories.

    Image files are scored with the image metrics, ``{subject}_labels.mvol``
    with Dice and ASD per foreground structure. A ``provenance.json`` with a
    ``source`` field in ``pred_dir`` tags rows with the source modality.
    """
    metrics = check_metrics(metrics)
    pred, truth = scan(pred_dir), scan(truth_dir)
    ps, ts = {s for s, _ in pred}, {s for s, _ in truth}
    if ps != ts:
        raise SubjectMismatchError(ps - ts, ts - ps)
    prov = Path(pred_dir) / PROVENANCE
    source = json.loads(prov.read_text()).get("source", "") if prov.exists() else ""
    report = MetricReport()
    for key in sorted(set(pred) & set(truth)):
        evaluate_pair(report, key[0], key[1], read_array(pred[key]), read_array(truth[key]),
                      metrics, source, num_classes, spacing)
    return report
