"""Latent-space diagnostics: content similarity distributions and attribute clustering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.metrics import silhouette_score

HIST_BINS = 40


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingAnalysis:
    positive: np.ndarray
    negative: np.ndarray
    silhouette: float
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        """Mean positive-pair similarity minus mean negative-pair similarity."""
        return float(self.positive.mean() - self.negative.mean())

    def histogram(self, bins: int = HIST_BINS) -> dict:
        edges = np.linspace(-1.0, 1.0, bins + 1)
        return {"edges": edges.tolist(),
                "positive": np.histogram(np.clip(self.positive, -1, 1), edges)[0].tolist(),
                "negative": np.histogram(np.clip(self.negative, -1, 1), edges)[0].tolist()}

    def to_dict(self) -> dict:
        return {"gap": self.gap,
                "positive_mean": float(self.positive.mean()),
                "negative_mean": float(self.negative.mean()),
                "positive_std": float(self.positive.std()),
                "negative_std": float(self.negative.std()),
                "n_positive": int(self.positive.size),
                "n_negative": int(self.negative.size),
                "silhouette": self.silhouette,
                "degenerate": self.degenerate,
                "histogram": self.histogram(),
                "meta": self.meta}


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    out = np.einsum("ij,ij->i", a, b) / np.where(denom > 0, denom, 1.0)
    return np.clip(np.where(denom > 0, out, 0.0), -1.0, 1.0)


def attribute_silhouette(codes, labels) -> tuple[float, bool]:
    """Cosine-distance silhouette; (0.0, True) when undefined."""
    codes = np.asarray(codes, dtype=np.float64).reshape(len(codes), -1)
    labels = np.asarray(labels)
    n_labels = len(np.unique(labels))
    if n_labels < 2 or n_labels >= len(codes) or np.ptp(codes, axis=0).max() < 1e-12:
        return 0.0, True
    if (np.linalg.norm(codes, axis=1) == 0).any():
        return 0.0, True
    return float(silhouette_score(codes, labels, metric="cosine")), False


@torch.no_grad()
def analyze_embeddings(ckpt, pool, max_images: int = 64, seed: int = 0) -> EmbeddingAnalysis:
    """Content-code similarity between real images and translations.

    ``pool`` is a SlicePool. Each sampled image is translated to every other
    modality. Positives pair a real image's content code with the code of its
    own translation; negatives pair it with translations of other subjects'
    images, so both samples compare a real code against a generated one.
    """
    from modality_forge.training.translation import to_unit, translate_batch

    subjects = sorted(set(pool.subject))
    present = sorted(set(pool.modality.tolist()))
    if len(subjects) < 2:
        raise EmbeddingError("embedding analysis needs at least 2 subjects")
    if len(present) < 2 or ckpt.net_config.K < 2:
        raise EmbeddingError("embedding analysis needs at least 2 modalities")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(pool), size=min(max_images, len(pool)), replace=False))
    model, rng_range = ckpt.translation.eval(), ckpt.train_config.intensity_range

    def encode(images):
        x = torch.from_numpy(to_unit(images, rng_range).astype(np.float32))[:, None]
        return model.enc_c(x).numpy(), model.enc_a(x).numpy()

    z_c, z_a = encode(pool.images[idx])
    mods = pool.modality[idx]
    subj = np.array([pool.subject[i] for i in idx])

    positive, fake_codes, fake_src = [], [], []
    for t in range(ckpt.net_config.K):
        rows = np.flatnonzero(mods != t)
        if rows.size == 0:
            continue
        attr = None
        real_t = np.flatnonzero(mods == t)
        if (ckpt.prototype_counts is None or ckpt.prototype_counts[t] == 0) and real_t.size:
            # no stored style for t (untrained model): borrow a real t image's code
            attr = torch.from_numpy(z_a[real_t[0]])
        fake = translate_batch(ckpt, pool.images[idx[rows]], t, attr)
        zc_fake = encode(fake)[0]
        positive.append(_cosine_rows(z_c[rows], zc_fake))
        fake_codes.append(zc_fake)
        fake_src.append(rows)
    positive = np.concatenate(positive)
    fake_codes, fake_src = np.concatenate(fake_codes), np.concatenate(fake_src)

    # negatives: every real image against every translation of a different subject
    a, b = np.nonzero(subj[:, None] != subj[fake_src][None, :])
    negative = _cosine_rows(z_c[a], fake_codes[b])
    sil, degenerate = attribute_silhouette(z_a, mods)
    return EmbeddingAnalysis(positive, negative, sil, degenerate,
                             meta={"images": int(len(idx)), "subjects": len(set(subj))})


__all__ = ["EmbeddingAnalysis", "EmbeddingError", "analyze_embeddings", "attribute_silhouette"]
