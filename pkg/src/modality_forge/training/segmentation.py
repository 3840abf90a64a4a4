"""Two-phase segmentation training on top of a trained translation module.

Phase 1 freezes the reused content encoder and fits the fusion stem and the
decoder; phase 2 unfreezes everything at the finetune rate. Inputs are the real
slice plus its K-1 imputed modalities, each channel z-scored.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from modality_forge import losses as L
from modality_forge.data.preprocess import normalize_array
from modality_forge.data.sampling import SlicePool, build_pool
from modality_forge.data.types import DatasetManifest
from modality_forge.metrics.segmentation import dice
from modality_forge.networks import NetConfig, build
from modality_forge.training.checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                                                state_hash)
from modality_forge.training.translation import TrainingError, impute_modalities

log = logging.getLogger(__name__)


def fused_inputs(ckpt: Checkpoint, images: np.ndarray, sources: np.ndarray,
                 baseline: bool = False) -> np.ndarray:
    """(N, H, W) intensities -> (N, K, H, W) z-scored real + imputed stacks.

    With ``baseline`` only the real slice is used, giving (N, 1, H, W).
    """
    images = np.asarray(images, dtype=np.float32)
    if baseline:
        return normalize_array(images)[:, None].astype(np.float32)
    K = ckpt.net_config.K
    out = np.empty((len(images), K, *images.shape[1:]), np.float32)
    for s in np.unique(sources):
        rows = np.flatnonzero(sources == s)
        for t, synth in enumerate(impute_modalities(images[rows], int(s), ckpt)):
            out[rows, t] = synth
    return normalize_array(out).astype(np.float32)


def per_structure_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> dict[str, float]:
    return {str(k): dice(pred, truth, k) for k in range(1, num_classes)}


class SegmentationTrainer:
    def __init__(self, ckpt: Checkpoint, inputs: np.ndarray, labels: np.ndarray, log_path=None):
        self.ckpt = ckpt
        self.cfg = ckpt.train_config
        self.model = ckpt.segmentation
        self.inputs = inputs
        self.labels = labels.astype(np.int64)
        self.log_path = Path(log_path) if log_path else None
        self.baseline = bool(ckpt.meta.get("seg_baseline"))

    @property
    def steps_per_epoch(self) -> int:
        if self.cfg.steps_per_epoch:
            return self.cfg.steps_per_epoch
        return max(1, math.ceil(len(self.inputs) / self.cfg.batch_size))

    @property
    def phase_steps(self) -> tuple[int, int]:
        spe = self.steps_per_epoch
        return self.cfg.segmentation_epochs * spe, self.cfg.finetune_epochs * spe

    def batch(self, step: int):
        rng = np.random.default_rng([self.cfg.seed, step])
        idx = rng.integers(0, len(self.inputs), size=self.cfg.batch_size)
        flips = rng.random(len(idx)) < 0.5
        x, y = self.inputs[idx].copy(), self.labels[idx].copy()
        x[flips] = x[flips][..., ::-1]
        y[flips] = y[flips][..., ::-1]
        return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(np.ascontiguousarray(y))

    def _optimizer(self, phase: int) -> torch.optim.Optimizer:
        m, cfg = self.model, self.cfg
        if phase == 1 and not self.baseline:
            params = [*m.fusion.parameters(), *m.decoder.parameters()]
            lr = cfg.lr
        else:
            params = list(m.parameters())
            lr = cfg.lr if phase == 1 else cfg.finetune_lr
        return torch.optim.Adam(params, lr=lr, betas=cfg.betas)

    def run(self, callback=None) -> Checkpoint:
        m = self.model
        p1, p2 = self.phase_steps
        fh = open(self.log_path, "a") if self.log_path else None

        def emit(rec):
            if fh:
                fh.write(json.dumps(rec) + "\n")

        try:
            for phase, n_steps in ((1, p1), (2, p2)):
                frozen = phase == 1 and not self.baseline
                for p in m.enc_c.parameters():
                    p.requires_grad_(not frozen)
                opt = self._optimizer(phase)
                self.ckpt.optimizers = {"seg": opt}
                emit({"event": f"phase{phase}_start", "step": self.ckpt.step,
                      "frozen_encoder": frozen, "lr": opt.param_groups[0]["lr"]})
                for _ in range(n_steps):
                    s = self.ckpt.step
                    x, y = self.batch(s)
                    m.train()
                    if frozen:
                        m.enc_c.eval()
                    opt.zero_grad(set_to_none=True)
                    loss = L.segmentation_loss_logits(m.logits(x), y)
                    if not torch.isfinite(loss):
                        raise TrainingError(f"non-finite segmentation loss at step {s}")
                    loss.backward()
                    opt.step()
                    self.ckpt.step = s + 1
                    rec = {"step": s, "phase": phase, "loss": loss.item(),
                           "encoder_hash": state_hash(m.enc_c)}
                    emit(rec)
                    if callback:
                        callback(s, rec)
                emit({"event": f"phase{phase}_end", "step": self.ckpt.step})
        finally:
            for p in m.enc_c.parameters():
                p.requires_grad_(True)
            if fh:
                fh.close()
        return self.ckpt


def _load_translation(translation_ckpt, expected: NetConfig | None) -> Checkpoint:
    if isinstance(translation_ckpt, Checkpoint):
        ckpt = translation_ckpt
        if expected is not None and expected.fingerprint() != ckpt.fingerprint:
            raise CheckpointError("checkpoint fingerprint does not match the requested network config")
    else:
        ckpt = load_checkpoint(translation_ckpt, expected=expected)
    if ckpt.translation is None:
        raise CheckpointError("not a translation checkpoint")
    return ckpt


def train_segmentation(translation_ckpt, manifest: DatasetManifest, cfg, net_cfg=None,
                       out_dir=None, baseline: bool | None = None, pool: SlicePool | None = None,
                       callback=None) -> Checkpoint:
    """Fit the segmentation model; returns a checkpoint holding both models.

    ``baseline=True`` trains a single-input model with a randomly initialized
    encoder, no imputation and no freezing.
    """
    baseline = cfg.seg_baseline if baseline is None else baseline
    tr = _load_translation(translation_ckpt, net_cfg)
    net_cfg = tr.net_config
    if pool is None:
        pool = build_pool(manifest, "train", size=cfg.seg_size, num_classes=net_cfg.num_classes,
                          slices=cfg.slices)
    if pool.labels is None:
        raise TrainingError("segmentation training needs labeled entries")
    inputs = fused_inputs(tr, pool.images, pool.modality, baseline)
    model = build("segmentation", net_cfg, seed=cfg.seed, fuse_inputs=inputs.shape[1])
    if not baseline:
        model.enc_c.load_state_dict(tr.translation.enc_c.state_dict())
    ckpt = Checkpoint(net_cfg, cfg, translation=tr.translation, segmentation=model,
                      prototypes=tr.prototypes, prototype_counts=tr.prototype_counts,
                      meta={**tr.meta, "seg_baseline": baseline,
                            "translation_step": tr.step})
    log_path = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "train_log.jsonl"
    SegmentationTrainer(ckpt, inputs, pool.labels, log_path).run(callback)
    pred = predict_labels(ckpt, pool.images, pool.modality, inputs=inputs)
    report = per_structure_dice(pred, pool.labels, net_cfg.num_classes)
    ckpt.meta["train_dice"] = report
    if out_dir:
        (Path(out_dir) / "dice_report.json").write_text(json.dumps(
            {"split": "train", "dice": report, "mean": float(np.mean(list(report.values())))},
            indent=1) + "\n")
    return ckpt


@torch.no_grad()
def predict_labels(ckpt: Checkpoint, images: np.ndarray, sources, inputs=None,
                   batch: int = 32) -> np.ndarray:
    """Argmax labels (N, H, W) for intensity slices observed in modality ``sources``."""
    images = np.asarray(images, dtype=np.float32)
    sources = np.broadcast_to(np.asarray(sources), (len(images),))
    if inputs is None:
        inputs = fused_inputs(ckpt, images, sources, bool(ckpt.meta.get("seg_baseline")))
    m = ckpt.segmentation.eval()
    out = [m.logits(torch.from_numpy(inputs[i:i + batch])).argmax(1).numpy()
           for i in range(0, len(inputs), batch)]
    return np.concatenate(out).astype(np.int64)


def evaluate_segmentation(ckpt: Checkpoint, pool: SlicePool) -> dict[str, float]:
    """Per-structure Dice over a labeled pool, every slice stacked as one volume."""
    pred = predict_labels(ckpt, pool.images, pool.modality)
    return per_structure_dice(pred, pool.labels, ckpt.net_config.num_classes)
