from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_SIDE = 16


@dataclass(frozen=True)
class ModalityCode:
    index: int
    K: int

    def __post_init__(self):
        if self.K < 1 or not 0 <= self.index < self.K:
            raise ValueError(f"modality index {self.index} out of range for K={self.K}")

    def one_hot(self) -> np.ndarray:
        code = np.zeros(self.K, dtype=np.float32)
        code[self.index] = 1.0
        return code


@dataclass
class SliceImage:
    pixels: np.ndarray
    modality: ModalityCode
    subject_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ValueError(f"SliceImage needs a 2D array, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("SliceImage intensities must be finite")
        if self.slice_index < 0:
            raise ValueError("slice_index must be non-negative")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels) -> "SliceImage":
        return SliceImage(pixels, self.modality, self.subject_id, self.slice_index)


@dataclass
class LabelMap:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")


@dataclass
class ManifestEntry:
    subject: str
    modality: str
    volume: str
    labels: str | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    root: str
    modalities: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = 1

    @property
    def K(self) -> int:
        return len(self.modalities)

    def modality_code(self, name: str) -> ModalityCode:
        return ModalityCode(self.modalities.index(name), self.K)

    def subjects(self, split: str | None = None) -> list[str]:
        seen = dict.fromkeys(e.subject for e in self.entries if split is None or e.split == split)
        return list(seen)

    def select(self, split: str | None = None, modality: str | None = None) -> "DatasetManifest":
        entries = [e for e in self.entries
                   if (split is None or e.split == split)
                   and (modality is None or e.modality == modality)]
        return DatasetManifest(self.root, list(self.modalities), entries, self.version)
