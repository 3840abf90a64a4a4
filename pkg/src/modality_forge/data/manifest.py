"""``manifest.json`` reading/writing and slice loading."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from modality_forge.data.types import DatasetManifest, LabelMap, ManifestEntry, SliceImage
from modality_forge.data.volume_io import load_volume, read_array

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


def write_manifest(manifest: DatasetManifest, root=None) -> Path:
    root = Path(root or manifest.root)
    doc = {
        "version": MANIFEST_VERSION,
        "modalities": list(manifest.modalities),
        "entries": [],
    }
    for e in manifest.entries:
        item = {"subject": e.subject, "modality": e.modality, "volume": e.volume, "split": e.split}
        if e.labels is not None:
            item["labels"] = e.labels
        doc["entries"].append(item)
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    modalities = list(doc["modalities"])
    entries = []
    seen = set()
    for item in doc["entries"]:
        e = ManifestEntry(item["subject"], item["modality"], item["volume"],
                          item.get("labels"), item.get("split", "train"))
        if e.modality not in modalities:
            raise ManifestError(f"entry references unknown modality {e.modality!r}")
        key = (e.subject, e.modality)
        if key in seen:
            raise ManifestError(f"duplicate entry {key}")
        seen.add(key)
        if check_files:
            for rel in (e.volume, e.labels):
                if rel is not None and not (path.parent / rel).exists():
                    raise ManifestError(f"missing file {rel}")
        entries.append(e)
    return DatasetManifest(str(path.parent), modalities, entries, doc["version"])


def load_entry(manifest: DatasetManifest, entry: ManifestEntry) -> list[SliceImage]:
    code = manifest.modality_code(entry.modality)
    return load_volume(Path(manifest.root) / entry.volume, code, entry.subject)


def load_labels(manifest: DatasetManifest, entry: ManifestEntry, num_classes: int) -> list[LabelMap]:
    if entry.labels is None:
        raise ManifestError(f"entry {entry.subject}/{entry.modality} has no labels")
    arr = read_array(Path(manifest.root) / entry.labels)
    if arr.ndim == 2:
        arr = arr[None]
    return [LabelMap(np.rint(a).astype(np.int64), num_classes) for a in arr]
