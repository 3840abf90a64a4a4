"""Procedural multi-modality phantoms with exact ground truth.

Each subject is a stack of axial slices through nested random ellipsoids:
label 0 is background, label 1 the outer "brain" and labels ``2..C-1`` are
inner structures of decreasing size. Every modality sees the same geometry;
only the intensity lookup table, bias field and noise differ, so that

    intensity = lookup[modality][label] * bias_field + noise
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from modality_forge.data.manifest import write_manifest
from modality_forge.data.types import DatasetManifest, ManifestEntry
from modality_forge.data.volume_io import write_array


class PhantomSpecError(ValueError):
    pass


def default_lookup(K: int, C: int) -> list[list[float]]:
    """Distinct, well separated contrast levels; each modality permutes them."""
    levels = np.linspace(0.25, 1.0, C - 1)
    rng = np.random.default_rng(1234 + 17 * K + C)
    perms = [tuple(range(C - 1))]
    while len(perms) < K:
        perm = tuple(rng.permutation(C - 1))
        if perm not in perms or len(perms) >= math.factorial(C - 1):
            perms.append(perm)
    return [[0.0] + [float(levels[p]) for p in perm] for perm in perms]


@dataclass
class PhantomSpec:
    num_subjects: int = 8
    modalities: list[str] = field(default_factory=lambda: ["T1w", "T2w", "T2sw"])
    image_size: tuple[int, int] = (64, 64)
    num_slices: int = 8
    num_classes: int = 5
    lookup: list[list[float]] | None = None
    bias_amplitude: list[float] | float = 0.0
    noise_sigma: list[float] | float = 0.0
    brain_axes: tuple[float, float] = (0.62, 0.85)
    structure_axes: tuple[float, float] = (0.18, 0.45)
    structure_jitter: float = 0.08
    test_fraction: float = 0.25

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.brain_axes = tuple(self.brain_axes)
        self.structure_axes = tuple(self.structure_axes)
        if self.lookup is None:
            self.lookup = default_lookup(self.K, self.num_classes)

    @property
    def K(self) -> int:
        return len(self.modalities)

    def per_modality(self, value) -> list[float]:
        if np.isscalar(value):
            return [float(value)] * self.K
        return [float(v) for v in value]

    def validate(self) -> None:
        if self.num_subjects < 1:
            raise PhantomSpecError("num_subjects must be positive")
        if self.K < 1 or len(set(self.modalities)) != self.K:
            raise PhantomSpecError("modalities must be non-empty and unique")
        if self.num_classes < 2:
            raise PhantomSpecError("num_classes must be at least 2 (background + brain)")
        if min(self.image_size) < 16:
            raise PhantomSpecError("image sides must be >= 16")
        if self.num_slices < 1:
            raise PhantomSpecError("num_slices must be positive")
        lookup = np.asarray(self.lookup, dtype=float)
        if lookup.ndim != 2 or lookup.shape[0] != self.K:
            raise PhantomSpecError(f"lookup must have one row per modality ({self.K})")
        if lookup.shape[1] != self.num_classes:
            raise PhantomSpecError(
                f"num_classes={self.num_classes} but lookup rows have {lookup.shape[1]} entries")
        if not np.all(np.isfinite(lookup)):
            raise PhantomSpecError("lookup values must be finite")
        for name, vals in (("bias_amplitude", self.bias_amplitude), ("noise_sigma", self.noise_sigma)):
            vals = self.per_modality(vals)
            if len(vals) != self.K or min(vals) < 0:
                raise PhantomSpecError(f"{name} must be >= 0, one value per modality")
        if not 0 <= self.test_fraction < 1:
            raise PhantomSpecError("test_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise PhantomSpecError(f"unknown phantom spec keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise PhantomSpecError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "PhantomSpec":
        text = Path(path).read_text()
        try:
            if str(path).endswith((".yaml", ".yml")):
                import yaml
                doc = yaml.safe_load(text)
            else:
                doc = json.loads(text)
        except Exception as exc:
            raise PhantomSpecError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise PhantomSpecError("phantom spec must be a mapping")
        spec = cls.from_dict(doc)
        spec.validate()
        return spec


def _grid(spec: PhantomSpec):
    h, w = spec.image_size
    y = (np.arange(h) + 0.5) / h * 2 - 1
    x = (np.arange(w) + 0.5) / w * 2 - 1
    z = np.linspace(-0.35, 0.35, spec.num_slices) if spec.num_slices > 1 else np.zeros(1)
    return np.meshgrid(z, y, x, indexing="ij")


def _ellipsoid(zz, yy, xx, center, axes, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - center[1], xx - center[2]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / axes[2]) ** 2 + (v / axes[1]) ** 2 + ((zz - center[0]) / axes[0]) ** 2 <= 1.0


def subject_labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Label volume (D, H, W) of one subject."""
    zz, yy, xx = _grid(spec)
    lo, hi = spec.brain_axes
    brain_axes = (1.0, rng.uniform(lo, hi), rng.uniform(lo, hi))
    brain = _ellipsoid(zz, yy, xx, (0, 0, 0), brain_axes, rng.uniform(-0.3, 0.3))
    labels = np.where(brain, 1, 0)
    n_inner = spec.num_classes - 2
    s_lo, s_hi = spec.structure_axes
    for k in range(n_inner):
        # larger structures first; later (smaller) ones may overwrite
        frac = 1.0 - k / max(n_inner, 1)
        size = s_lo + (s_hi - s_lo) * frac
        theta = 2 * np.pi * k / max(n_inner, 1) + rng.uniform(-0.3, 0.3)
        radius = 0.35 * min(brain_axes[1:]) * (0.4 + 0.6 * (k % 2))
        center = (rng.uniform(-0.05, 0.05),
                  radius * np.sin(theta) + rng.uniform(-1, 1) * spec.structure_jitter,
                  radius * np.cos(theta) + rng.uniform(-1, 1) * spec.structure_jitter)
        elong = rng.uniform(0.5, 1.0)
        axes = (0.6, size * elong * min(brain_axes[1:]), size * min(brain_axes[1:]))
        inner = _ellipsoid(zz, yy, xx, center, axes, rng.uniform(0, np.pi)) & brain
        labels[inner] = k + 2
    return labels.astype(np.int64)


def bias_field(spec: PhantomSpec, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth multiplicative field in ``[1 - amplitude, 1 + amplitude]``."""
    zz, yy, xx = _grid(spec)
    coef = rng.normal(size=6)
    poly = (coef[0] * xx + coef[1] * yy + coef[2] * zz
            + coef[3] * xx * yy + coef[4] * (xx ** 2 - 0.5) + coef[5] * (yy ** 2 - 0.5))
    peak = np.abs(poly).max()
    if peak > 0:
        poly = poly / peak
    return 1.0 + amplitude * poly


def render_modality(spec: PhantomSpec, labels: np.ndarray, m: int,
                    rng: np.random.Generator) -> np.ndarray:
    lookup = np.asarray(spec.lookup, dtype=np.float64)[m]
    amp = spec.per_modality(spec.bias_amplitude)[m]
    sigma = spec.per_modality(spec.noise_sigma)[m]
    field_ = bias_field(spec, amp, rng) if amp > 0 else 1.0
    img = lookup[labels] * field_
    if sigma > 0:
        img = img + rng.normal(0.0, sigma, size=labels.shape)
    return img.astype(np.float32)


def analytic_image(spec: PhantomSpec, labels: np.ndarray, m: int) -> np.ndarray:
    """Noise- and bias-free rendering of ``labels`` in modality ``m``."""
    return np.asarray(spec.lookup, dtype=np.float32)[m][labels]


def generate_phantom(spec: PhantomSpec, seed: int, root) -> DatasetManifest:
    spec.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise PhantomSpecError(f"cannot write to {root}: {exc}") from exc
    n_test = int(round(spec.num_subjects * spec.test_fraction))
    entries = []
    for s in range(spec.num_subjects):
        subject = f"sub{s:03d}"
        split = "test" if s >= spec.num_subjects - n_test else "train"
        labels = subject_labels(spec, np.random.default_rng([seed, s]))
        label_file = f"{subject}_labels.mvol"
        write_array(labels.astype(np.float32), root / label_file)
        for m, name in enumerate(spec.modalities):
            img = render_modality(spec, labels, m, np.random.default_rng([seed, s, m + 1]))
            vol_file = f"{subject}_{name}.mvol"
            write_array(img, root / vol_file)
            entries.append(ManifestEntry(subject, name, vol_file, label_file, split))
    manifest = DatasetManifest(str(root), list(spec.modalities), entries)
    write_manifest(manifest, root)
    (root / "phantom_spec.json").write_text(json.dumps({"seed": seed, **spec.to_dict()}, indent=1) + "\n")
    return manifest
