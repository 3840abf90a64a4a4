"""Adversarial disentangled translation training and test-time imputation."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from modality_forge import losses as L
from modality_forge.data.preprocess import apply_augmentation, draw_augmentation
from modality_forge.data.sampling import SlicePool, build_pool
from modality_forge.data.types import DatasetManifest, ModalityCode
from modality_forge.networks import NetConfig, build
from modality_forge.training.checkpoint import Checkpoint, load_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    pass


def to_unit(x, intensity_range):
    """Map intensities to the generator's [-1, 1] range."""
    lo, hi = intensity_range
    return np.clip(2.0 * (np.asarray(x) - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def from_unit(x, intensity_range):
    lo, hi = intensity_range
    return (np.asarray(x) + 1.0) * 0.5 * (hi - lo) + lo


def translation_optimizers(ckpt: Checkpoint) -> dict[str, torch.optim.Optimizer]:
    m, cfg = ckpt.translation, ckpt.train_config
    gen_params = [*m.enc_c.parameters(), *m.enc_a.parameters(), *m.gen.parameters()]
    return {
        "gen": torch.optim.Adam(gen_params, lr=cfg.lr, betas=cfg.betas),
        "dis_domain": torch.optim.Adam(m.dis_domain.parameters(), lr=cfg.lr, betas=cfg.betas),
        "dis_content": torch.optim.Adam(m.dis_content.parameters(), lr=cfg.lr, betas=cfg.betas),
    }


def _set_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class TranslationTrainer:
    """Owns the model, optimizers and data pool of one translation run."""

    def __init__(self, pool: SlicePool, ckpt: Checkpoint, log_path=None):
        self.pool = pool
        self.ckpt = ckpt
        self.cfg = ckpt.train_config
        self.model = ckpt.translation
        if not ckpt.optimizers:
            ckpt.optimizers = translation_optimizers(ckpt)
        self.opt = ckpt.optimizers
        self.log_path = Path(log_path) if log_path else None
        crop = self.cfg.crop_size
        self.crop = (crop, crop)
        self.unit_images = to_unit(pool.images, self.cfg.intensity_range).astype(np.float32)
        K, d = ckpt.net_config.K, ckpt.net_config.attr_dim
        if ckpt.prototypes is None:
            ckpt.prototypes = torch.zeros(K, d)
            ckpt.prototype_counts = torch.zeros(K, dtype=torch.long)

    @property
    def steps_per_epoch(self) -> int:
        if self.cfg.steps_per_epoch:
            return self.cfg.steps_per_epoch
        return max(1, math.ceil(len(self.pool) / self.cfg.batch_size))

    @property
    def total_steps(self) -> int:
        total = self.cfg.translation_epochs * self.steps_per_epoch
        return min(total, self.cfg.max_steps) if self.cfg.max_steps else total

    def batch(self, step: int):
        """Deterministic minibatch of ``batch_size / 2`` unpaired (m_i, m_j) pairs."""
        rng = np.random.default_rng([self.cfg.seed, step])
        n_pairs = self.cfg.batch_size // 2
        idx = rng.integers(0, len(self.pool), size=(2, n_pairs))
        order = np.concatenate([idx[0], idx[1]])
        imgs = []
        for i in order:
            top, left, flip = draw_augmentation(self.unit_images[i].shape, self.crop, rng)
            imgs.append(apply_augmentation(self.unit_images[i], top, left, self.crop, flip))
        x = torch.from_numpy(np.stack(imgs)[:, None])
        mods = torch.from_numpy(self.pool.modality[order].astype(np.int64))
        if self.cfg.content_positives == "slice":
            ids = [self.pool.identity(i) for i in order]
        else:
            ids = [self.pool.subject[i] for i in order]
        return x, mods, ids

    def step(self, step: int) -> dict:
        cfg, m = self.cfg, self.model
        K = self.ckpt.net_config.K
        x, mods, ids = self.batch(step)
        n = x.shape[0]
        half = n // 2
        perm = torch.roll(torch.arange(n), half)
        zd = torch.nn.functional.one_hot(mods, K).float()
        m.train()

        z_c = m.enc_c(x)
        z_a = m.enc_a(x)
        fake = m.gen(z_c, z_a[perm], zd[perm])

        # content discriminator
        logs = {}
        for _ in range(cfg.dis_steps):
            self.opt["dis_content"].zero_grad(set_to_none=True)
            d_cont, _ = L.adv_content_loss(m.dis_content(z_c.detach()), mods)
            d_cont.backward()
            self.opt["dis_content"].step()
        logs["d_content"] = d_cont.item()

        # domain discriminator: realness + modality classification on reals
        for _ in range(cfg.dis_steps):
            self.opt["dis_domain"].zero_grad(set_to_none=True)
            real_s, real_cls = m.dis_domain(x, mods)
            fake_s, _ = m.dis_domain(fake.detach(), mods[perm])
            d_adv, _ = L.adv_domain_loss(real_s, fake_s)
            d_cls = L.domain_cls_loss(real_cls, mods)
            (d_adv + d_cls).backward()
            self.opt["dis_domain"].step()
        logs["d_domain"] = d_adv.item()
        logs["d_cls"] = d_cls.item()

        # encoders + generator
        _set_grad(m.dis_domain, False)
        _set_grad(m.dis_content, False)
        try:
            self.opt["gen"].zero_grad(set_to_none=True)
            rec = m.gen(z_c, z_a, zd)
            zc_f = m.enc_c(fake)
            za_f = m.enc_a(fake)
            cyc = m.gen(zc_f, za_f[perm], zd)
            fake_s, fake_cls = m.dis_domain(fake, mods[perm])
            _, g_adv = L.adv_domain_loss(None, fake_s)
            _, e_adv = L.adv_content_loss(m.dis_content(z_c), mods)
            terms = {
                "adv_domain": g_adv,
                "adv_content": e_adv,
                "self_recon": L.l1_self_recon_loss(rec[:half], x[:half], rec[half:], x[half:]),
                "cycle": L.l1_cycle_loss(cyc[:half], x[:half], cyc[half:], x[half:]),
                "latent": L.latent_recon_loss(zc_f, z_c, za_f, z_a[perm]),
                "l2": L.l2_latent_reg(z_c, z_a),
                "cls": L.domain_cls_loss(fake_cls, mods[perm]),
            }
            meta = [L.ViewMeta(ids[i], int(mods[i]), int(mods[i]), "real") for i in range(n)]
            meta += [L.ViewMeta(ids[i], int(mods[i]), int(mods[perm[i]]), "translated")
                     for i in range(n)]
            w = cfg.weights
            zero = x.new_zeros(())
            terms["cl_attr"] = terms["cl_content"] = zero
            drop_a = drop_c = 0
            if w.cl_attr > 0 or w.cl_content > 0:
                attr_b, cont_b = L.pair_builder(meta, torch.cat([z_a, za_f]),
                                                torch.cat([z_c, zc_f]), cfg.tau_a, cfg.tau_c)
                drop_a, drop_c = attr_b.dropped, cont_b.dropped
                if w.cl_attr > 0 and attr_b.anchors.any():
                    terms["cl_attr"] = L.attribute_contrastive_loss(
                        attr_b, cfg.similarity_mode, cfg.contrastive_reduction)
                if w.cl_content > 0 and cont_b.anchors.any():
                    terms["cl_content"] = L.content_contrastive_loss(
                        cont_b, cfg.similarity_mode, cfg.contrastive_reduction)
            report = L.total_translation_loss(terms, w)
            if not torch.isfinite(report.total):
                bad = [k for k, v in report.terms.items() if not math.isfinite(v)]
                raise TrainingDivergedError(
                    f"non-finite total loss at step {step}; non-finite terms: {bad or 'none'}; "
                    f"terms={report.terms}")
            report.total.backward()
            self.opt["gen"].step()
        finally:
            _set_grad(m.dis_domain, True)
            _set_grad(m.dis_content, True)

        self._update_prototypes(z_a.detach(), mods)
        logs.update(report.to_dict())
        logs["dropped_attr"] = drop_a
        logs["dropped_content"] = drop_c
        return logs

    def _update_prototypes(self, z_a: torch.Tensor, mods: torch.Tensor) -> None:
        protos, counts = self.ckpt.prototypes, self.ckpt.prototype_counts
        decay = self.cfg.prototype_decay
        for k in mods.unique().tolist():
            mean = z_a[mods == k].mean(0)
            if counts[k] == 0:
                protos[k] = mean
            else:
                protos[k] = decay * protos[k] + (1 - decay) * mean
            counts[k] += int((mods == k).sum())

    def run(self, steps: int | None = None, callback=None) -> Checkpoint:
        end = self.total_steps if steps is None else self.ckpt.step + steps
        fh = open(self.log_path, "a") if self.log_path else None
        try:
            while self.ckpt.step < end:
                s = self.ckpt.step
                logs = self.step(s)
                self.ckpt.step = s + 1
                if fh and (s % self.cfg.log_every == 0 or s + 1 == end):
                    fh.write(json.dumps({"step": s, "epoch": s // self.steps_per_epoch, **logs}) + "\n")
                if callback:
                    callback(s, logs)
        finally:
            if fh:
                fh.close()
        return self.ckpt


def new_translation_checkpoint(net_cfg: NetConfig, cfg) -> Checkpoint:
    model = build("translation", net_cfg, seed=cfg.seed)
    ckpt = Checkpoint(net_cfg, cfg, translation=model)
    ckpt.optimizers = translation_optimizers(ckpt)
    return ckpt


def train_translation(manifest: DatasetManifest, cfg, net_cfg: NetConfig | None = None,
                      out_dir=None, resume=None, pool: SlicePool | None = None,
                      steps: int | None = None, callback=None) -> Checkpoint:
    """Train the translation module; ``resume`` is a checkpoint or its directory."""
    if manifest.K < 2 or len(set(e.modality for e in manifest.entries)) < 2:
        raise TrainingError("translation training needs at least two modalities")
    net_cfg = net_cfg or NetConfig(K=manifest.K)
    if net_cfg.K != manifest.K:
        raise TrainingError(f"network K={net_cfg.K} but manifest has {manifest.K} modalities")
    if pool is None:
        size = (cfg.resize_size, cfg.resize_size)
        pool = build_pool(manifest, "train", size=size, slices=cfg.slices)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(
            resume, expected=net_cfg, optimizers=translation_optimizers)
        if not ckpt.optimizers:
            ckpt.optimizers = translation_optimizers(ckpt)
        ckpt.train_config = cfg
    else:
        ckpt = new_translation_checkpoint(net_cfg, cfg)
    ckpt.meta.setdefault("modalities", list(manifest.modalities))
    log_path = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "train_log.jsonl"
    trainer = TranslationTrainer(pool, ckpt, log_path)
    return trainer.run(steps, callback)


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def translate_batch(ckpt: Checkpoint, images: np.ndarray, target: int,
                    attr: torch.Tensor | None = None) -> np.ndarray:
    """Translate intensity images (N, H, W) to modality ``target``."""
    m, cfg = ckpt.translation, ckpt.train_config
    m.eval()
    x = torch.from_numpy(to_unit(images, cfg.intensity_range).astype(np.float32))[:, None]
    z_c = m.enc_c(x)
    if attr is None:
        if ckpt.prototype_counts is None or ckpt.prototype_counts[target] == 0:
            raise TrainingError(f"no attribute prototype for modality {target}")
        attr = ckpt.prototypes[target]
    z_a = attr.reshape(1, -1).expand(x.shape[0], -1)
    z_d = torch.nn.functional.one_hot(torch.full((x.shape[0],), target), ckpt.net_config.K).float()
    out = m.gen(z_c, z_a, z_d)[:, 0].numpy()
    return from_unit(out, cfg.intensity_range).astype(np.float32)


def impute_modalities(image, source: ModalityCode | int, ckpt: Checkpoint,
                      reference=None) -> list[np.ndarray]:
    """Synthesize all K modalities from one image; the source slot keeps the input.

    ``reference`` optionally maps target index -> reference image whose encoded
    attribute replaces the stored prototype.
    """
    K = ckpt.net_config.K
    if ckpt.trained_prototypes() < K and not reference:
        raise TrainingError(
            f"checkpoint has prototypes for {ckpt.trained_prototypes()} of {K} modalities")
    src = source.index if isinstance(source, ModalityCode) else int(source)
    image = np.asarray(image, dtype=np.float32)
    batched = image.ndim == 3
    imgs = image if batched else image[None]
    out = []
    for t in range(K):
        if t == src:
            out.append(imgs.copy())
            continue
        attr = None
        if reference and t in reference:
            ref = torch.from_numpy(to_unit(np.asarray(reference[t])[None],
                                           ckpt.train_config.intensity_range).astype(np.float32))
            ckpt.translation.eval()
            with torch.no_grad():
                attr = ckpt.translation.enc_a(ref[:, None])[0]
        out.append(translate_batch(ckpt, imgs, t, attr))
    return out if batched else [o[0] for o in out]
