"""Objective terms of the translation and segmentation modules.

Pixel and element losses are mean-reduced. The log-form adversarial helpers
return the objective exactly as written for the min-max game (values the
discriminator maximizes); the training loop uses the least-squares surrogates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

SIMILARITY_MODES = ("product", "paper-literal")
EPS = 1e-8


class ZeroVectorWarning(RuntimeWarning):
    pass


# --------------------------------------------------------------------------
# similarity


def cosine_sim(x, y, mode: str = "product") -> float:
    """Similarity of two vectors.

    ``product``: x.y / (|x| |y|).  ``paper-literal``: x.y / (|x| + |y|).
    A zero vector yields 0.0 and a :class:`ZeroVectorWarning`.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        warnings.warn("cosine similarity of a zero vector", ZeroVectorWarning, stacklevel=2)
        return 0.0
    if mode == "product":
        return float(x @ y / (nx * ny))
    if mode == "paper-literal":
        return float(x @ y / (nx + ny))
    raise ValueError(f"unknown similarity mode {mode!r}")


def similarity_matrix(codes: torch.Tensor, mode: str = "product") -> torch.Tensor:
    """Pairwise similarities of the rows of ``codes`` (flattened per row)."""
    z = codes.reshape(codes.shape[0], -1)
    norms = z.norm(dim=1).clamp_min(EPS)
    dots = z @ z.T
    if mode == "product":
        return dots / (norms[:, None] * norms[None, :])
    if mode == "paper-literal":
        return dots / (norms[:, None] + norms[None, :])
    raise ValueError(f"unknown similarity mode {mode!r}")


# --------------------------------------------------------------------------
# contrastive losses


@dataclass
class ContrastiveBatch:
    """Codes with a positive-pair mask; every row may act as an anchor.

    The candidate set of anchor ``i`` is every other row. ``anchors`` marks
    the rows that contribute; :func:`validate` rejects anchors without a
    positive or a negative.
    """

    codes: torch.Tensor
    positive: torch.Tensor
    temperature: float = 0.1
    anchors: torch.Tensor | None = None
    dropped: int = 0

    def __post_init__(self):
        n = self.codes.shape[0]
        self.positive = torch.as_tensor(self.positive, dtype=torch.bool)
        if self.positive.shape != (n, n):
            raise ValueError(f"positive mask must be ({n}, {n})")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        eye = torch.eye(n, dtype=torch.bool)
        self.positive = self.positive & ~eye
        if self.anchors is None:
            self.anchors = torch.ones(n, dtype=torch.bool)
        self.anchors = torch.as_tensor(self.anchors, dtype=torch.bool)

    def validate(self) -> None:
        n = self.codes.shape[0]
        eye = torch.eye(n, dtype=torch.bool)
        n_pos = self.positive.sum(1)
        n_neg = (~self.positive & ~eye).sum(1)
        a = self.anchors
        if not a.any():
            raise ValueError("contrastive batch has no anchors")
        if (n_pos[a] == 0).any():
            raise ValueError("an anchor has no positive candidates")
        if (n_neg[a] == 0).any():
            raise ValueError("an anchor has no negative candidates")


def contrastive_loss(batch: ContrastiveBatch, mode: str = "product",
                     reduction: str = "sum") -> torch.Tensor:
    """Supervised InfoNCE: for each anchor, the mean over its positives of
    ``-log softmax`` taken over all other rows. ``reduction`` in sum/mean/none.
    """
    batch.validate()
    sim = similarity_matrix(batch.codes, mode) / batch.temperature
    n = sim.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)
    log_prob = sim - torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    pos = batch.positive.to(sim.device)
    per_anchor = -(log_prob * pos).sum(1) / pos.sum(1).clamp_min(1)
    per_anchor = per_anchor[batch.anchors.to(sim.device)]
    if reduction == "sum":
        return per_anchor.sum()
    if reduction == "mean":
        return per_anchor.mean()
    if reduction == "none":
        return per_anchor
    raise ValueError(f"unknown reduction {reduction!r}")


def attribute_contrastive_loss(batch: ContrastiveBatch, mode: str = "product",
                               reduction: str = "sum") -> torch.Tensor:
    """Attribute codes: positives share the effective modality."""
    return contrastive_loss(batch, mode, reduction)


def content_contrastive_loss(batch: ContrastiveBatch, mode: str = "product",
                             reduction: str = "sum") -> torch.Tensor:
    """Flattened content codes: positives share the subject (anatomy)."""
    return contrastive_loss(batch, mode, reduction)


@dataclass(frozen=True)
class ViewMeta:
    subject: object
    source: int
    target: int
    role: str = "real"

    @property
    def effective_modality(self) -> int:
        return self.target if self.role == "translated" else self.source


def _anchor_mask(positive: torch.Tensor) -> tuple[torch.Tensor, int]:
    n = positive.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    n_pos = (positive & ~eye).sum(1)
    n_neg = (~positive & ~eye).sum(1)
    ok = (n_pos > 0) & (n_neg > 0)
    return ok, int((~ok).sum())


def pair_builder(meta, attr_codes, content_codes, tau_a: float = 0.1, tau_c: float = 0.1):
    """Build the attribute and content contrastive batches for one minibatch.

    Attribute positives share the effective modality (origin for real views,
    target for translated ones). Content positives share ``subject``. Anchors
    lacking a positive or a negative are dropped and counted in ``dropped``.
    """
    meta = [m if isinstance(m, ViewMeta) else ViewMeta(*m) for m in meta]
    eff = torch.tensor([m.effective_modality for m in meta])
    subj = [m.subject for m in meta]
    n = len(meta)
    eye = torch.eye(n, dtype=torch.bool)
    attr_pos = (eff[:, None] == eff[None, :]) & ~eye
    cont_pos = torch.tensor([[subj[i] == subj[j] for j in range(n)] for i in range(n)]) & ~eye
    a_ok, a_drop = _anchor_mask(attr_pos)
    c_ok, c_drop = _anchor_mask(cont_pos)
    attr = ContrastiveBatch(attr_codes, attr_pos, tau_a, a_ok, a_drop)
    cont = ContrastiveBatch(content_codes, cont_pos, tau_c, c_ok, c_drop)
    return attr, cont


# --------------------------------------------------------------------------
# reconstruction terms


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_cycle_loss(rec_i, real_i, rec_j, real_j) -> torch.Tensor:
    _check_same(rec_i, real_i)
    _check_same(rec_j, real_j)
    return (rec_i - real_i).abs().mean() + (rec_j - real_j).abs().mean()


def l1_self_recon_loss(rec_i, real_i, rec_j, real_j) -> torch.Tensor:
    return l1_cycle_loss(rec_i, real_i, rec_j, real_j)


def latent_recon_loss(content_re, content, attr_re, attr) -> torch.Tensor:
    _check_same(content_re, content)
    _check_same(attr_re, attr)
    return 0.5 * ((content_re - content).abs().mean() + (attr_re - attr).abs().mean())


def l2_latent_reg(content, attr) -> torch.Tensor:
    return 0.5 * (content.pow(2).mean() + attr.pow(2).mean())


# --------------------------------------------------------------------------
# adversarial terms


def content_adv_log_objective(d_i, d_j) -> torch.Tensor:
    """Two-modality log objective for the content discriminator.

    ``d_i``, ``d_j`` are sigmoid outputs on content codes from each modality.
    Returns E[0.5 log D + 0.5 log(1-D)] summed over both modalities; its
    extremum -2 ln 2 is reached when D outputs 0.5 everywhere.
    """
    d_i = torch.as_tensor(d_i, dtype=torch.float64)
    d_j = torch.as_tensor(d_j, dtype=torch.float64)
    term = lambda d: (0.5 * torch.log(d) + 0.5 * torch.log1p(-d)).mean()
    return term(d_i) + term(d_j)


def adv_content_loss(logits: torch.Tensor, modality: torch.Tensor):
    """Content adversarial terms for K modalities.

    Returns ``(discriminator_loss, encoder_loss)``: the discriminator is trained
    to predict the source modality; the encoder pushes its prediction to
    uniform (cross-entropy to the uniform distribution, minimum ln K).
    With K=2 the encoder loss is the negated two-modality log objective.
    """
    logp = F.log_softmax(logits, dim=1)
    disc = F.nll_loss(logp, modality)
    enc = -logp.mean(dim=1).mean()
    return disc, enc


def adv_domain_log_objective(real_prob, fake_prob):
    """Log-form domain objective ``E[log D(real)] + E[log(1 - D(fake))]``.

    Returns ``(discriminator_objective, generator_objective)``: the
    discriminator maximizes the first, the generator minimizes the second
    (``E[log(1 - D(fake))]``).
    """
    real_prob = torch.as_tensor(real_prob, dtype=torch.float64)
    fake_prob = torch.as_tensor(fake_prob, dtype=torch.float64)
    gen = torch.log1p(-fake_prob).mean()
    return torch.log(real_prob).mean() + gen, gen


def adv_domain_loss(real_scores, fake_scores, mode: str = "lsgan"):
    """Domain adversarial ``(discriminator_term, generator_term)``.

    ``lsgan`` (default): losses to minimize on raw patch scores.
    ``log``: scores are probabilities; see :func:`adv_domain_log_objective`.
    Either argument may be None when only one side is needed.
    """
    if mode == "log":
        return adv_domain_log_objective(real_scores, fake_scores)
    if mode != "lsgan":
        raise ValueError(f"unknown adversarial mode {mode!r}")
    disc = gen = None
    if real_scores is not None and fake_scores is not None:
        disc = (real_scores - 1).pow(2).mean() + fake_scores.pow(2).mean()
    if fake_scores is not None:
        gen = (fake_scores - 1).pow(2).mean()
    return disc, gen


def domain_cls_loss(logits: torch.Tensor, modality) -> torch.Tensor:
    """Cross-entropy of modality logits against the one-hot (or index) code."""
    modality = torch.as_tensor(modality)
    if modality.dim() == logits.dim():
        if modality.shape[-1] != logits.shape[-1]:
            raise ValueError("modality code length does not match logits")
        modality = modality.argmax(-1)
    if modality.max() >= logits.shape[-1]:
        raise ValueError("modality index exceeds number of logits")
    return F.cross_entropy(logits, modality)


# --------------------------------------------------------------------------
# weighted total


@dataclass
class LossWeights:
    self_recon: float = 10.0
    cycle: float = 10.0
    latent: float = 10.0
    l2: float = 0.01
    cls: float = 1.0
    cl_attr: float = 1.0
    cl_content: float = 1.0
    # adversarial terms are unweighted in the reference objective
    adv_domain: float = 1.0
    adv_content: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0")


TERMS = ("adv_domain", "adv_content", "self_recon", "cycle", "latent", "l2", "cls",
         "cl_attr", "cl_content")


@dataclass
class LossReport:
    terms: dict[str, float]
    total: object
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def total_value(self) -> float:
        return _scalar(self.total)

    def to_dict(self) -> dict:
        return {**self.terms, "total": self.total_value}


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def total_translation_loss(terms: dict, weights: LossWeights | None = None) -> LossReport:
    weights = weights or LossWeights()
    missing = [t for t in TERMS if t not in terms]
    if missing:
        raise KeyError(f"missing loss terms: {missing}")
    w = {f.name: getattr(weights, f.name) for f in fields(weights)}
    total = 0.0
    for name in TERMS:
        total = total + w[name] * terms[name]
    values = {name: _scalar(terms[name]) for name in TERMS}
    return LossReport(values, total, w)


# --------------------------------------------------------------------------
# segmentation


def segmentation_loss(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean over pixels of ``-log p[true class]``; ``probs`` is (B, C, H, W)."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=probs.device)
    if probs.dim() == 3:
        probs = probs[None]
    if labels.dim() == 2:
        labels = labels[None]
    if labels.max() >= probs.shape[1] or labels.min() < 0:
        raise ValueError(f"labels must lie in [0, {probs.shape[1]})")
    p = probs.gather(1, labels[:, None]).squeeze(1)
    return -torch.log(p.clamp_min(1e-12)).mean()


def segmentation_loss_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Same quantity from unnormalized scores, numerically stable."""
    return F.cross_entropy(logits, labels)
