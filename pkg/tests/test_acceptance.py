"""Exit criteria. Each test prints one ``CRITERION n PASS|FAIL`` line.

The experiment criteria (5-8) train real models at desk scale and take most of
the suite's wall time; their checkpoints are shared through session fixtures.
"""

import json
import math
import sys
import time

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from gradutil import REL_TOL, fd_relative_error
from modality_forge import losses as L
from modality_forge.data import PhantomSpec, generate_phantom
from modality_forge.data.sampling import build_pool
from modality_forge.metrics import analyze_embeddings, asd, dice, ms_ssim, ssim
from modality_forge.metrics.image_quality import MS_WEIGHTS, ms_ssim_scales
from modality_forge.networks import NetConfig, build
from modality_forge.training import (TrainConfig, load_checkpoint, save_checkpoint, state_hash,
                                     train_segmentation, train_translation, translate_batch)
from modality_forge.training.segmentation import evaluate_segmentation
from modality_forge.training.translation import new_translation_checkpoint
from oracles import asd_allpairs, contrastive_bruteforce, cos_literal, cos_product, dice_bruteforce

RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    print(f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- 1. loss oracles --------------------------------------------------------


def _random_contrastive(rng):
    n = int(rng.integers(4, 17))
    d = int(rng.integers(2, 33))
    groups = rng.integers(0, max(2, n // 3), size=n)
    groups[:4] = [0, 0, 1, 1]
    codes = rng.normal(size=(n, d))
    pos = groups[:, None] == groups[None, :]
    np.fill_diagonal(pos, False)
    anchors = pos.any(1) & (~pos & ~np.eye(n, dtype=bool)).any(1)
    return codes, pos, anchors, float(rng.choice([0.05, 0.1, 0.5, 1.0]))


def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(200):
        codes, pos, anchors, tau = _random_contrastive(rng)
        batch = L.ContrastiveBatch(torch.tensor(codes), torch.tensor(pos), tau,
                                   anchors=torch.tensor(anchors))
        mode, sim = ("paper-literal", cos_literal) if i % 4 == 3 else ("product", cos_product)
        ref = contrastive_bruteforce(codes, pos, tau, anchors, sim=sim)
        for fn in (L.attribute_contrastive_loss, L.content_contrastive_loss):
            got = fn(batch, mode, reduction="none").numpy()
            worst = max(worst, float(np.abs(got - ref).max()))
            worst = max(worst, abs(float(fn(batch, mode, reduction="sum")) - sum(ref)))
    # equal similarities over 7 candidates
    eq = L.ContrastiveBatch(torch.ones(8, 3, dtype=torch.float64),
                            torch.tensor(np.kron(np.eye(2), np.ones((4, 4))) > 0), 0.1)
    closed = max(abs(float(v) - math.log(7))
                 for fn in (L.attribute_contrastive_loss, L.content_contrastive_loss)
                 for v in fn(eq, reduction="none"))
    # one positive at +1, one negative at -1, tau 0.1
    two = L.ContrastiveBatch(torch.tensor([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64),
                             torch.tensor([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=torch.bool), 0.1,
                             anchors=torch.tensor([True, False, False]))
    closed = max(closed, *(abs(float(fn(two)) - math.log1p(math.exp(-20)))
                           for fn in (L.attribute_contrastive_loss, L.content_contrastive_loss)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and closed < 1e-9 and elapsed < 10
    report(1, ok, f"brute-force max err {worst:.2e} (<1e-6), closed-form err {closed:.2e} "
                  f"(<1e-9), {elapsed:.1f}s (<10s)")


# -- 2. gradients -----------------------------------------------------------

W8 = NetConfig(width=8, content_channels=8, attr_dim=4, K=3, num_classes=4, res_blocks=2)


def _grad_cases():
    g = torch.Generator().manual_seed(0)
    pos = torch.tensor(np.kron(np.eye(2), np.ones((3, 3))) > 0) & ~torch.eye(6, dtype=torch.bool)

    def contrastive(fn, mode):
        return lambda c: fn(L.ContrastiveBatch(c, pos, 0.1), mode)

    r = lambda *s: torch.randn(*s, generator=g)  # noqa: E731
    u = lambda *s: torch.rand(*s, generator=g) * 0.8 + 0.1  # noqa: E731
    losses = {
        "attribute_contrastive": (contrastive(L.attribute_contrastive_loss, "product"), [r(6, 4)]),
        "attribute_contrastive_literal": (contrastive(L.attribute_contrastive_loss, "paper-literal"), [r(6, 4)]),
        "content_contrastive": (contrastive(L.content_contrastive_loss, "product"), [r(6, 12)]),
        "cycle": (L.l1_cycle_loss, [r(2, 1, 4, 4) for _ in range(4)]),
        "self_recon": (L.l1_self_recon_loss, [r(2, 1, 4, 4) for _ in range(4)]),
        "latent": (L.latent_recon_loss, [r(2, 3, 2, 2), r(2, 3, 2, 2), r(2, 4), r(2, 4)]),
        "l2": (L.l2_latent_reg, [r(2, 3, 2, 2), r(2, 4)]),
        "adv_content": (lambda z: sum(L.adv_content_loss(z, torch.tensor([0, 2, 1]))), [r(3, 3)]),
        "adv_content_log": (L.content_adv_log_objective, [u(4), u(4)]),
        "adv_domain_lsgan": (lambda a, b: sum(L.adv_domain_loss(a, b)), [r(2, 1, 3, 3), r(2, 1, 3, 3)]),
        "adv_domain_log": (lambda a, b: sum(L.adv_domain_loss(a, b, mode="log")), [u(2, 4), u(2, 4)]),
        "domain_cls": (lambda z: L.domain_cls_loss(z, torch.tensor([1, 0])), [r(2, 3)]),
        "total": (lambda v: L.total_translation_loss(dict(zip(L.TERMS, v))).total, [r(len(L.TERMS))]),
        "segmentation": (lambda z: L.segmentation_loss(torch.softmax(z, 1), torch.tensor([[[0, 2], [1, 3]]])),
                         [r(1, 4, 2, 2)]),
    }
    return {k: (f, [t.double() for t in xs]) for k, (f, xs) in losses.items()}


def _net_cases():
    tr = build("translation", W8, seed=3).double().eval()
    seg = build("segmentation", W8, seed=3, fuse_inputs=3).double().eval()
    zd = torch.eye(3, dtype=torch.float64)[1:2]
    return {
        "content_encoder": lambda x: tr.content_encode(x).pow(2).mean(),
        "attribute_encoder": lambda x: tr.attribute_encode(x).sin().sum(),
        "generator": lambda x: tr.generate(tr.content_encode(x), tr.attribute_encode(x), zd).mean(),
        "domain_discriminator": lambda x: sum(t.pow(2).sum() for t in tr.discriminate_domain(x)),
        "content_discriminator": lambda x: tr.discriminate_content(tr.content_encode(x)).sum(),
        "segmentation": lambda x: seg(torch.cat([x, x.flip(-1), x * x], 1))[:, 1].mean(),
    }


def test_criterion_2_gradients(float64):
    t0 = time.perf_counter()
    errs = {}
    for name, (fn, inputs) in _grad_cases().items():
        errs[name] = fd_relative_error(fn, inputs)
    x = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    for name, fn in _net_cases().items():
        errs[name] = fd_relative_error(fn, [x], n_coords=6)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < REL_TOL and elapsed < 120
    report(2, ok, f"{len(errs)} cases, worst rel err {errs[worst]:.2e} ({worst}) (<1e-4), "
                  f"{elapsed:.1f}s (<120s)")


# -- 3. metric oracles ------------------------------------------------------


def _random_mask(rng, h, w):
    if rng.random() < 0.5:
        return rng.random((h, w)) < rng.uniform(0.05, 0.9)
    yy, xx = np.mgrid[:h, :w]
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry, rx = rng.uniform(1, h), rng.uniform(1, w)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1


def _ref_ms_ssim(x, y, data_range):
    mod = sys.modules["pytorch_msssim.ssim"]
    X, Y = torch.tensor(x)[None, None], torch.tensor(y)[None, None]
    win = mod._fspecial_gauss_1d(11, 1.5).repeat(1, 1, 1, 1).double()
    S = ms_ssim_scales(x.shape)
    w = MS_WEIGHTS[:S] / MS_WEIGHTS[:S].sum()
    val = 1.0
    for s in range(S):
        full, cs = mod._ssim(X, Y, data_range=data_range, win=win, size_average=False)
        val *= max(float(full) if s == S - 1 else float(cs), 0.0) ** w[s]
        X, Y = torch.nn.functional.avg_pool2d(X, 2), torch.nn.functional.avg_pool2d(Y, 2)
    return val


def test_criterion_3_metric_oracles():
    pytest.importorskip("pytorch_msssim")
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    dice_bad = 0
    asd_err = 0.0
    n_asd = 0
    for _ in range(500):
        h, w = rng.integers(2, 33, size=2)
        a, b = _random_mask(rng, h, w), _random_mask(rng, h, w)
        dice_bad += dice(a, b) != dice_bruteforce(a, b)
        if a.any() and b.any():
            asd_err = max(asd_err, abs(asd(a, b) - asd_allpairs(a, b)))
            n_asd += 1
    ssim_err = ms_err = 0.0
    for _ in range(50):
        base = rng.random((128, 128))
        x = np.clip(base + rng.normal(0, rng.uniform(0.02, 0.4), base.shape), 0, 1)
        y = np.clip(base + rng.normal(0, rng.uniform(0.02, 0.4), base.shape), 0, 1)
        ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        ssim_err = max(ssim_err, abs(ssim(x, y, 1.0) - ref))
        ms_err = max(ms_err, abs(ms_ssim(x, y, 1.0) - _ref_ms_ssim(x, y, 1.0)))
    elapsed = time.perf_counter() - t0
    ok = dice_bad == 0 and asd_err < 1e-9 and ssim_err < 1e-4 and ms_err < 1e-3 and elapsed < 60
    report(3, ok, f"dice mismatches {dice_bad}/500, asd err {asd_err:.1e} over {n_asd} pairs "
                  f"(<1e-9), ssim err {ssim_err:.1e} (<1e-4), ms-ssim err {ms_err:.1e} (<1e-3), "
                  f"{elapsed:.1f}s (<60s)")


# -- 4. freeze contract -----------------------------------------------------

DESK_NET = NetConfig(width=16, K=3)


def test_criterion_4_freeze_contract(tmp_path):
    t0 = time.perf_counter()
    man = generate_phantom(PhantomSpec(num_subjects=4, noise_sigma=0.02), 4, tmp_path / "ph")
    cfg = TrainConfig(max_steps=5, segmentation_epochs=2, finetune_epochs=1, steps_per_epoch=5)
    tr = train_translation(man, cfg, DESK_NET)
    before = state_hash(tr.translation.enc_c)
    train_segmentation(tr, man, cfg, out_dir=tmp_path / "seg")
    recs = [json.loads(l) for l in (tmp_path / "seg" / "train_log.jsonl").read_text().splitlines()]
    phase1 = [r["encoder_hash"] for r in recs if r.get("phase") == 1]
    phase2 = [r["encoder_hash"] for r in recs if r.get("phase") == 2]
    elapsed = time.perf_counter() - t0
    ok = (len(phase1) == 10 and set(phase1) == {before} and phase2[-1] != before
          and elapsed < 300)
    report(4, ok, f"{len(set(phase1))} distinct encoder hash over {len(phase1)} phase-1 steps "
                  f"(== reused encoder: {set(phase1) == {before}}), phase 2 moved: "
                  f"{phase2[-1] != before}, {elapsed:.0f}s (<300s)")


# -- 5-8. phantom experiments -----------------------------------------------

DESK_LR = 2e-4
SEG_LR = 1e-3
SEG_EPOCHS = 16


def translation_quality(ckpt, pool, lookup) -> tuple[float, float]:
    """Mean SSIM of every cross-modality translation against the analytic target,
    and the worst relative error of a per-structure mean intensity."""
    lookup = np.asarray(lookup, np.float32)
    scores, errs = [], []
    for s in sorted(set(pool.modality.tolist())):
        src = pool.subset(pool.modality == s)
        for t in range(ckpt.net_config.K):
            if t == s:
                continue
            out = translate_batch(ckpt, src.images, t)
            target = lookup[t][src.labels]
            scores += [ssim(o, g, 1.0) for o, g in zip(out, target)]
            errs += [abs(out[src.labels == k].mean() - lookup[t][k]) / lookup[t][k]
                     for k in range(1, lookup.shape[1]) if (src.labels == k).any()]
    return float(np.mean(scores)), float(np.max(errs))


@pytest.fixture(scope="module")
def clean_experiment(tmp_path_factory):
    """One translation run on the noiseless phantom, shared by criteria 5, 7 and 8."""
    spec = PhantomSpec(num_subjects=16, test_fraction=0.25)
    man = generate_phantom(spec, 5, tmp_path_factory.mktemp("clean"))
    cfg = TrainConfig(lr=DESK_LR, translation_epochs=30)
    t0 = time.perf_counter()
    ckpt = train_translation(man, cfg, DESK_NET)
    return spec, man, ckpt, time.perf_counter() - t0


def test_criterion_5_phantom_translation(clean_experiment):
    spec, man, ckpt, elapsed = clean_experiment
    test = build_pool(man, "test", num_classes=spec.num_classes)
    score, err = translation_quality(ckpt, test, spec.lookup)
    epochs = ckpt.step / math.ceil(len(build_pool(man, "train")) / ckpt.train_config.batch_size)
    ok = score >= 0.80 and err <= 0.15 and elapsed <= 1800 and epochs <= 30
    report(5, ok, f"held-out SSIM {score:.3f} (>=0.80), worst structure intensity error "
                  f"{err:.0%} (<=15%), {epochs:.0f} epochs, {elapsed / 60:.1f} min (<=30)")


ABLATIONS = {
    "full": {},
    "attr_only": {"cl_content": 0.0},
    "content_only": {"cl_attr": 0.0},
    "none": {"cl_attr": 0.0, "cl_content": 0.0},
}


def test_criterion_6_ablation_ordering(tmp_path):
    # 32x32 images and width-8 nets keep 20 runs inside the desk budget
    spec = PhantomSpec(num_subjects=8, image_size=(32, 32), test_fraction=0.25)
    man = generate_phantom(spec, 6, tmp_path / "ph")
    test = build_pool(man, "test", size=(32, 32), num_classes=spec.num_classes)
    net = NetConfig(width=8, K=3)
    t0 = time.perf_counter()
    table, ordered = [], 0
    for seed in range(5):
        row = {}
        for name, off in ABLATIONS.items():
            cfg = TrainConfig(lr=DESK_LR, batch_size=8, max_steps=300, seed=seed,
                              resize_size=32, crop_size=32, seg_size=(32, 32),
                              weights=L.LossWeights(**off))
            row[name] = translation_quality(train_translation(man, cfg, net), test, spec.lookup)[0]
        ordered += (row["full"] >= max(row["attr_only"], row["content_only"])
                    and min(row["attr_only"], row["content_only"]) >= row["none"])
        table.append(row)
    elapsed = time.perf_counter() - t0
    means = {k: np.mean([r[k] for r in table]) for k in ABLATIONS}
    report(6, ordered >= 4, f"ordering full >= single >= none in {ordered}/5 seeds (>=4); mean SSIM "
                            + ", ".join(f"{k} {v:.3f}" for k, v in means.items())
                            + f"; {elapsed / 60:.1f} min")


def test_criterion_7_embedding_separation(clean_experiment):
    spec, man, ckpt, _ = clean_experiment
    pool = build_pool(man, "test", num_classes=spec.num_classes)
    trained = analyze_embeddings(ckpt, pool)
    untrained = [analyze_embeddings(new_translation_checkpoint(DESK_NET, TrainConfig(seed=s)), pool).gap
                 for s in range(5)]
    ok = (trained.gap >= 0.2 and trained.silhouette >= 0.3
          and max(abs(g) for g in untrained) < 0.2)
    report(7, ok, f"trained content gap {trained.gap:.3f} (>=0.2), attribute silhouette "
                  f"{trained.silhouette:.3f} (>=0.3), untrained |gap| max "
                  f"{max(abs(g) for g in untrained):.3f} over 5 seeds (<0.2)")


def _mean_dice(ckpt, pool) -> float:
    return float(np.mean(list(evaluate_segmentation(ckpt, pool).values())))


def test_criterion_8_segmentation_transfer(tmp_path, clean_experiment):
    t0 = time.perf_counter()
    spec = PhantomSpec(num_subjects=8, noise_sigma=0.05, bias_amplitude=0.05)
    man = generate_phantom(spec, 8, tmp_path / "noisy")
    test = build_pool(man, "test", num_classes=spec.num_classes)
    tr = train_translation(man, TrainConfig(lr=DESK_LR, translation_epochs=30), DESK_NET)
    rows = []
    for seed in range(5):
        cfg = TrainConfig(lr=SEG_LR, finetune_lr=SEG_LR / 10, segmentation_epochs=SEG_EPOCHS,
                          finetune_epochs=6, seed=seed)
        rows.append((_mean_dice(train_segmentation(tr, man, cfg), test),
                     _mean_dice(train_segmentation(tr, man, cfg, baseline=True), test)))
    wins = sum(a >= b for a, b in rows)

    cspec, cman, cck, _ = clean_experiment
    cfg = TrainConfig(lr=SEG_LR, finetune_lr=SEG_LR / 10, segmentation_epochs=SEG_EPOCHS,
                      finetune_epochs=6)
    clean = _mean_dice(train_segmentation(cck, cman, cfg),
                       build_pool(cman, "test", num_classes=cspec.num_classes))
    elapsed = time.perf_counter() - t0
    ok = wins >= 4 and clean >= 0.90 and elapsed <= 1800
    report(8, ok, f"transfer >= baseline in {wins}/5 seeds (>=4), mean Dice transfer "
                  f"{np.mean([a for a, _ in rows]):.3f} vs baseline {np.mean([b for _, b in rows]):.3f}; "
                  f"noiseless Dice {clean:.3f} (>=0.90); {elapsed / 60:.1f} min (<=30)")


# -- 9. determinism and round trip ------------------------------------------


def _max_param_diff(a: torch.nn.Module, b: torch.nn.Module) -> float:
    return max(float((p - q).abs().max()) for p, q in zip(a.state_dict().values(),
                                                          b.state_dict().values()))


def test_criterion_9_determinism_and_roundtrip(tmp_path):
    man = generate_phantom(PhantomSpec(num_subjects=4, noise_sigma=0.02, num_slices=4), 9,
                           tmp_path / "ph")
    cfg = TrainConfig(max_steps=3, segmentation_epochs=1, finetune_epochs=1, steps_per_epoch=2)
    runs = []
    for name in ("a", "b"):
        tr = train_translation(man, cfg, DESK_NET, out_dir=tmp_path / name)
        seg = train_segmentation(tr, man, cfg, out_dir=tmp_path / name / "seg")
        runs.append((tr, seg, (tmp_path / name / "train_log.jsonl").read_bytes(),
                     (tmp_path / name / "seg" / "train_log.jsonl").read_bytes()))
    (tr_a, seg_a, log_a, slog_a), (tr_b, seg_b, log_b, slog_b) = runs
    bit_identical = (log_a == log_b and slog_a == slog_b
                     and state_hash(tr_a.translation) == state_hash(tr_b.translation)
                     and state_hash(seg_a.segmentation) == state_hash(seg_b.segmentation))

    save_checkpoint(seg_a, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck", expected=DESK_NET)
    x = torch.rand(3, 1, 64, 64, generator=torch.Generator().manual_seed(0))
    zd = torch.eye(3)[[0, 1, 2]]
    with torch.no_grad():
        a, b = seg_a.translation.eval(), back.translation.eval()
        outs = [(a.enc_c(x), b.enc_c(x)), (a.enc_a(x), b.enc_a(x)),
                (a.gen(a.enc_c(x), a.enc_a(x), zd), b.gen(b.enc_c(x), b.enc_a(x), zd)),
                (a.dis_content(a.enc_c(x)), b.dis_content(b.enc_c(x))),
                *zip(a.dis_domain(x), b.dis_domain(x))]
        xs = torch.rand(3, 3, 64, 64, generator=torch.Generator().manual_seed(1))
        outs.append((seg_a.segmentation.eval()(xs), back.segmentation.eval()(xs)))
    forward = max(float((u - v).abs().max()) for u, v in outs)

    straight = train_translation(man, cfg, DESK_NET, steps=2)
    first = train_translation(man, cfg, DESK_NET, steps=1)
    save_checkpoint(first, tmp_path / "one")
    resumed = train_translation(man, cfg, DESK_NET, resume=tmp_path / "one", steps=1)
    resume = max(_max_param_diff(straight.translation.components()[k], c)
                 for k, c in resumed.translation.components().items())
    ok = bit_identical and forward < 1e-6 and resume < 1e-6
    report(9, ok, f"seeded runs bit-identical: {bit_identical}, round-trip forward diff "
                  f"{forward:.1e} (<1e-6), one-step resume diff {resume:.1e} (<1e-6)")
