"""In-memory slice pools and unpaired pair sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from modality_forge.data.manifest import load_entry, load_labels
from modality_forge.data.preprocess import resize_array, resize_labels
from modality_forge.data.types import DatasetManifest, SliceImage


@dataclass
class SlicePool:
    """All slices of a manifest split, stacked for fast batch assembly.

    ``images`` is (N, H, W) float32, ``modality`` / ``subject`` / ``slice``
    are per-row metadata, ``labels`` is (N, H, W) int64 or None.
    """

    images: np.ndarray
    modality: np.ndarray
    subject: list[str]
    slice_index: np.ndarray
    labels: np.ndarray | None
    modalities: list[str]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def K(self) -> int:
        return len(self.modalities)

    def identity(self, i: int) -> tuple[str, int]:
        return self.subject[i], int(self.slice_index[i])

    def slice_image(self, i: int) -> SliceImage:
        from modality_forge.data.types import ModalityCode
        return SliceImage(self.images[i], ModalityCode(int(self.modality[i]), self.K),
                          self.subject[i], int(self.slice_index[i]))

    def subset(self, mask) -> "SlicePool":
        idx = np.flatnonzero(mask)
        return SlicePool(self.images[idx], self.modality[idx], [self.subject[i] for i in idx],
                         self.slice_index[idx], None if self.labels is None else self.labels[idx],
                         list(self.modalities))


def build_pool(manifest: DatasetManifest, split: str | None = "train", size=None,
               num_classes: int | None = None, slices: str | list[int] = "all") -> SlicePool:
    """Load every slice of ``split``. ``size`` optionally resizes to (H, W)."""
    images, mods, subs, idxs, labs = [], [], [], [], []
    label_cache = {}
    entries = [e for e in manifest.entries if split is None or e.split == split]
    if not entries:
        raise ValueError(f"manifest has no entries for split {split!r}")
    for e in entries:
        sl = load_entry(manifest, e)
        keep = range(len(sl)) if slices == "all" else [i for i in slices if i < len(sl)]
        lab = None
        if num_classes is not None and e.labels is not None:
            if e.labels not in label_cache:
                label_cache[e.labels] = load_labels(manifest, e, num_classes)
            lab = label_cache[e.labels]
        for d in keep:
            px = sl[d].pixels
            if size is not None and px.shape != tuple(size):
                px = resize_array(px, *size).astype(np.float32)
            images.append(px)
            mods.append(manifest.modalities.index(e.modality))
            subs.append(e.subject)
            idxs.append(d)
            if lab is not None:
                lb = lab[d].labels
                if size is not None and lb.shape != tuple(size):
                    lb = resize_labels(lb, *size)
                labs.append(lb)
    labels = np.stack(labs) if labs and len(labs) == len(images) else None
    return SlicePool(np.stack(images).astype(np.float32), np.asarray(mods), subs,
                     np.asarray(idxs), labels, list(manifest.modalities))


def sample_pair_indices(n: int, rng: np.random.Generator) -> tuple[int, int]:
    if n == 0:
        raise ValueError("cannot sample from an empty pool")
    i, j = rng.integers(0, n, size=2)
    return int(i), int(j)


def sample_training_pair(source, seed) -> tuple[SliceImage, SliceImage]:
    """Draw two slices uniformly and independently (unpaired).

    ``source`` is a :class:`SlicePool` or a :class:`DatasetManifest`.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(source, DatasetManifest):
        if not source.entries:
            raise ValueError("cannot sample from an empty manifest")
        source = build_pool(source, split=None)
    i, j = sample_pair_indices(len(source), rng)
    return source.slice_image(i), source.slice_image(j)
