import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradutil import REL_TOL, fd_relative_error
from modality_forge import losses as L
from oracles import contrastive_bruteforce, cos_literal


def random_batch(rng, n, d, n_groups):
    codes = rng.normal(size=(n, d))
    groups = rng.integers(0, n_groups, size=n)
    # guarantee each anchor a positive and a negative
    groups[: n_groups * 2] = np.repeat(np.arange(n_groups), 2)
    pos = groups[:, None] == groups[None, :]
    return codes, pos


# -- similarity -------------------------------------------------------------


def test_cosine_conventions():
    assert L.cosine_sim([1, 0], [1, 0]) == 1.0
    assert L.cosine_sim([1, 0], [0, 1]) == 0.0
    assert L.cosine_sim([1, 0], [1, 0], mode="paper-literal") == 0.5


def test_cosine_zero_vector_warns():
    with pytest.warns(L.ZeroVectorWarning):
        assert L.cosine_sim([0, 0], [1, 2]) == 0.0


# -- contrastive ------------------------------------------------------------


def test_equal_similarity_gives_log_candidates():
    codes = torch.ones(8, 4, dtype=torch.float64)
    pos = torch.zeros(8, 8, dtype=torch.bool)
    pos[:4, :4] = pos[4:, 4:] = True
    b = L.ContrastiveBatch(codes, pos, 0.1)
    per = L.attribute_contrastive_loss(b, reduction="none")
    np.testing.assert_allclose(per.numpy(), math.log(7), atol=1e-9)
    assert abs(float(L.content_contrastive_loss(b, reduction="sum")) - 8 * math.log(7)) < 1e-9


def test_two_term_softmax_closed_form():
    codes = torch.tensor([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    pos = torch.tensor([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=torch.bool)
    b = L.ContrastiveBatch(codes, pos, 0.1, anchors=torch.tensor([True, False, False]))
    val = float(L.attribute_contrastive_loss(b))
    assert abs(val - math.log1p(math.exp(-20))) < 1e-9
    assert abs(val - 2.06e-9) < 0.01e-9


def test_content_copy_and_orthogonal_negatives():
    # anchor, exact copy, four mutually orthogonal negatives
    codes = torch.zeros(6, 6, dtype=torch.float64)
    codes[0, 0] = codes[1, 0] = 1.0
    for k in range(4):
        codes[2 + k, 1 + k] = 1.0
    pos = torch.zeros(6, 6, dtype=torch.bool)
    pos[0, 1] = pos[1, 0] = True
    b = L.ContrastiveBatch(codes, pos, 0.1, anchors=torch.tensor([True] + [False] * 5))
    val = float(L.content_contrastive_loss(b))
    assert abs(val - math.log1p(4 * math.exp(-10))) < 1e-9
    assert abs(val - 1.816e-4) < 0.001e-4


@pytest.mark.parametrize("seed", range(20))
def test_contrastive_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 17))
    codes, pos = random_batch(rng, n, int(rng.integers(2, 9)), 2)
    b = L.ContrastiveBatch(torch.tensor(codes), torch.tensor(pos), 0.1)
    got = L.contrastive_loss(b, reduction="none").numpy()
    want = contrastive_bruteforce(codes, pos, 0.1)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_paper_literal_matches_bruteforce():
    rng = np.random.default_rng(1)
    codes, pos = random_batch(rng, 10, 5, 2)
    b = L.ContrastiveBatch(torch.tensor(codes), torch.tensor(pos), 0.1)
    got = L.contrastive_loss(b, mode="paper-literal", reduction="none").numpy()
    np.testing.assert_allclose(got, contrastive_bruteforce(codes, pos, 0.1, sim=cos_literal),
                               atol=1e-6)


def test_missing_positive_or_negative_raises():
    codes = torch.randn(3, 4, dtype=torch.float64)
    with pytest.raises(ValueError, match="positive"):
        L.contrastive_loss(L.ContrastiveBatch(codes, torch.zeros(3, 3, dtype=torch.bool)))
    with pytest.raises(ValueError, match="negative"):
        L.contrastive_loss(L.ContrastiveBatch(codes, torch.ones(3, 3, dtype=torch.bool)))


def test_adversarial_weights_scale_their_terms():
    ones = dict.fromkeys(L.TERMS, 1.0)
    heavy = L.total_translation_loss(ones, L.LossWeights(adv_domain=3.0, adv_content=2.0))
    assert abs(heavy.total_value - (35.01 + 2.0 + 1.0)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_scale_invariance_product_convention(seed, scale):
    rng = np.random.default_rng(seed)
    codes, pos = random_batch(rng, 8, 4, 2)
    scaled = codes.copy()
    scaled[int(rng.integers(0, 8))] *= scale
    a = L.contrastive_loss(L.ContrastiveBatch(torch.tensor(codes), torch.tensor(pos)))
    b = L.contrastive_loss(L.ContrastiveBatch(torch.tensor(scaled), torch.tensor(pos)))
    assert abs(float(a) - float(b)) < 1e-6


def test_paper_literal_not_scale_invariant():
    rng = np.random.default_rng(0)
    codes, pos = random_batch(rng, 8, 4, 2)
    scaled = codes.copy()
    scaled[0] *= 3.0
    a = L.contrastive_loss(L.ContrastiveBatch(torch.tensor(codes), torch.tensor(pos)), "paper-literal")
    b = L.contrastive_loss(L.ContrastiveBatch(torch.tensor(scaled), torch.tensor(pos)), "paper-literal")
    assert abs(float(a) - float(b)) > 1e-3


def test_contrastive_nonnegative_when_positives_not_above_max():
    rng = np.random.default_rng(5)
    codes, pos = random_batch(rng, 12, 6, 3)
    per = L.contrastive_loss(L.ContrastiveBatch(torch.tensor(codes), torch.tensor(pos)),
                             reduction="none")
    assert (per >= 0).all()


# -- pair builder -----------------------------------------------------------


def test_pair_builder_figure_example():
    meta = [("A", 0, 0, "real"), ("A", 0, 1, "translated"), ("B", 1, 1, "real")]
    codes = torch.randn(3, 4)
    attr, cont = L.pair_builder(meta, codes, codes)
    # content anchor A-real: positive A-translated, negative B
    assert cont.positive[0].tolist() == [False, True, False]
    assert bool(cont.anchors[0])
    # attribute anchor A-real (modality 0) has no positive -> dropped
    assert not bool(attr.anchors[0])
    assert attr.dropped == 1
    assert attr.positive[1].tolist() == [False, False, True]


def test_pair_builder_two_modality_batch():
    meta = []
    for s, mod in (("a", 0), ("b", 0), ("c", 1), ("d", 1)):
        meta.append((s, mod, mod, "real"))
        meta.append((s, mod, 1 - mod, "translated"))
    codes = torch.randn(8, 4)
    attr, cont = L.pair_builder(meta, codes, codes)
    eye = torch.eye(8, dtype=torch.bool)
    for b in (attr, cont):
        assert b.dropped == 0 and b.anchors.all()
        assert (b.positive.sum(1) >= 1).all()
        assert ((~b.positive & ~eye).sum(1) >= 4).all()


# -- reconstruction / regularizers -----------------------------------------


def test_l1_terms():
    m = torch.randn(2, 1, 8, 8)
    assert float(L.l1_cycle_loss(m, m, m, m)) == 0.0
    assert abs(float(L.l1_cycle_loss(m + 0.5, m, m + 0.5, m)) - 1.0) < 1e-6
    assert float(L.l1_self_recon_loss(m, m, m, m)) == 0.0
    assert abs(float(L.l1_self_recon_loss(m + 0.5, m, m + 0.5, m)) - 1.0) < 1e-6
    a, b = torch.randn(3, 5), torch.randn(3, 5)
    brute = sum(abs(float(u) - float(v)) for u, v in zip(a.flatten(), b.flatten())) / a.numel()
    assert abs(float(L.l1_self_recon_loss(a, b, a, b)) - 2 * brute) < 1e-6
    with pytest.raises(ValueError):
        L.l1_cycle_loss(m, m[:1], m, m)


def test_latent_recon():
    zc, za = torch.randn(2, 4, 3, 3), torch.randn(2, 8)
    assert float(L.latent_recon_loss(zc, zc, za, za)) == 0.0
    assert abs(float(L.latent_recon_loss(zc + 1, zc, za, za)) - 0.5) < 1e-6
    z2, a2 = torch.randn_like(zc), torch.randn_like(za)
    assert float(L.latent_recon_loss(z2, zc, a2, za)) == float(L.latent_recon_loss(zc, z2, za, a2))


def test_l2_reg():
    assert float(L.l2_latent_reg(torch.zeros(1, 4, 2, 2), torch.zeros(1, 8))) == 0.0
    assert float(L.l2_latent_reg(torch.zeros(1, 4, 2, 2), torch.ones(1, 8))) == 0.5
    assert float(L.l2_latent_reg(torch.randn(2, 3, 2, 2), torch.randn(2, 8))) >= 0


# -- adversarial ------------------------------------------------------------


def test_content_log_objective_two_modalities():
    half = torch.full((4,), 0.5)
    assert abs(float(L.content_adv_log_objective(half, half)) + 2 * math.log(2)) < 1e-12
    # the uninformative output is the extremum: nearby outputs give a lower bracket
    for p in (0.3, 0.7):
        off = torch.full((4,), p)
        assert float(L.content_adv_log_objective(off, off)) < -2 * math.log(2)


def test_content_k2_encoder_loss_is_negated_objective():
    logits = torch.tensor([[0.3, -0.2], [1.0, 0.1]], dtype=torch.float64)
    _, enc = L.adv_content_loss(logits, torch.tensor([0, 1]))
    p = torch.softmax(logits, 1)[:, 0]
    want = -(0.5 * torch.log(p) + 0.5 * torch.log(1 - p)).mean()
    assert abs(float(enc) - float(want)) < 1e-12


def test_content_uniform_logits():
    K = 5
    logits = torch.zeros(3, K, dtype=torch.float64, requires_grad=True)
    _, enc = L.adv_content_loss(logits, torch.tensor([0, 1, 2]))
    assert abs(enc.item() - math.log(K)) < 1e-12
    (g,) = torch.autograd.grad(enc, logits)
    assert float(g.abs().max()) < 1e-12


def test_domain_log_objective():
    eps = 1e-9
    d, _ = L.adv_domain_loss(torch.full((4,), 1 - eps), torch.full((4,), eps), mode="log")
    assert abs(float(d)) < 1e-8
    d, _ = L.adv_domain_loss(torch.full((4,), 0.5), torch.full((4,), 0.5), mode="log")
    assert abs(float(d) + 2 * math.log(2)) < 1e-12


def test_domain_lsgan():
    d, g = L.adv_domain_loss(torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4))
    assert float(d) == 0.0 and float(g) == 1.0


def test_domain_cls():
    big = torch.tensor([[1e4, 0.0, 0.0]])
    assert float(L.domain_cls_loss(big, torch.tensor([[1.0, 0, 0]]))) == 0.0
    assert abs(float(L.domain_cls_loss(torch.zeros(2, 5), torch.tensor([0, 3]))) - math.log(5)) < 1e-6
    logits = torch.randn(4, 3, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 1])
    brute = np.mean([-math.log(math.exp(logits[i, y[i]]) / float(torch.exp(logits[i]).sum()))
                     for i in range(4)])
    assert abs(float(L.domain_cls_loss(logits, y)) - brute) < 1e-9
    with pytest.raises(ValueError):
        L.domain_cls_loss(logits, torch.eye(4)[:4])


# -- weighted total ---------------------------------------------------------


def test_total_weights():
    zeros = dict.fromkeys(L.TERMS, 0.0)
    assert L.total_translation_loss(zeros).total_value == 0.0
    ones = dict.fromkeys(L.TERMS, 1.0)
    assert abs(L.total_translation_loss(ones).total_value - 35.01) < 1e-9
    with pytest.raises(KeyError):
        L.total_translation_loss({"cycle": 1.0})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=9, max_size=9), st.sampled_from(L.TERMS),
       st.floats(-5, 5))
def test_total_bookkeeping_and_linearity(values, term, delta):
    terms = dict(zip(L.TERMS, values))
    rep = L.total_translation_loss(terms)
    recomputed = sum(rep.weights[k] * terms[k] for k in L.TERMS)
    assert abs(rep.total_value - recomputed) < 1e-6
    bumped = dict(terms, **{term: terms[term] + delta})
    diff = L.total_translation_loss(bumped).total_value - rep.total_value
    assert abs(diff - rep.weights[term] * delta) < 1e-6


# -- segmentation -----------------------------------------------------------


def test_segmentation_loss():
    labels = torch.randint(0, 4, (1, 6, 6))
    onehot = torch.nn.functional.one_hot(labels, 4).permute(0, 3, 1, 2).double()
    assert float(L.segmentation_loss(onehot, labels)) == 0.0
    uniform = torch.full((1, 50, 4, 4), 1 / 50, dtype=torch.float64)
    assert abs(float(L.segmentation_loss(uniform, torch.zeros(1, 4, 4))) - math.log(50)) < 1e-9
    probs = torch.softmax(torch.randn(2, 3, 5, 5, dtype=torch.float64), 1)
    lab = torch.randint(0, 3, (2, 5, 5))
    brute = np.mean([-math.log(float(probs[b, lab[b, i, j], i, j]))
                     for b in range(2) for i in range(5) for j in range(5)])
    assert abs(float(L.segmentation_loss(probs, lab)) - brute) < 1e-6
    with pytest.raises(ValueError):
        L.segmentation_loss(probs, lab + 3)


# -- gradients --------------------------------------------------------------


def _contrastive_fn(pos, mode):
    return lambda c: L.contrastive_loss(L.ContrastiveBatch(c, pos, 0.1), mode)


GRAD_CASES = {
    "attribute_contrastive": lambda g: (_contrastive_fn(torch.tensor(random_batch(np.random.default_rng(0), 8, 4, 2)[1]), "product"), [torch.randn(8, 4, generator=g)]),
    "content_contrastive_literal": lambda g: (_contrastive_fn(torch.tensor(random_batch(np.random.default_rng(1), 6, 12, 2)[1]), "paper-literal"), [torch.randn(6, 12, generator=g)]),
    "cycle": lambda g: (L.l1_cycle_loss, [torch.randn(2, 3, 3, generator=g) for _ in range(4)]),
    "self_recon": lambda g: (L.l1_self_recon_loss, [torch.randn(2, 3, 3, generator=g) for _ in range(4)]),
    "latent": lambda g: (L.latent_recon_loss, [torch.randn(2, 4, generator=g) for _ in range(4)]),
    "l2": lambda g: (L.l2_latent_reg, [torch.randn(2, 3, 2, 2, generator=g), torch.randn(2, 8, generator=g)]),
    "adv_content_disc": lambda g: (lambda z: L.adv_content_loss(z, torch.tensor([0, 2, 1]))[0], [torch.randn(3, 3, generator=g)]),
    "adv_content_enc": lambda g: (lambda z: L.adv_content_loss(z, torch.tensor([0, 2, 1]))[1], [torch.randn(3, 3, generator=g)]),
    "adv_domain_lsgan": lambda g: (lambda r, f: sum(L.adv_domain_loss(r, f)), [torch.randn(2, 1, 3, 3, generator=g) for _ in range(2)]),
    "adv_domain_log": lambda g: (lambda r, f: sum(L.adv_domain_loss(r, f, mode="log")), [torch.rand(2, 4, generator=g) * 0.8 + 0.1 for _ in range(2)]),
    "content_log_objective": lambda g: (L.content_adv_log_objective, [torch.rand(4, generator=g) * 0.8 + 0.1 for _ in range(2)]),
    "domain_cls": lambda g: (lambda z: L.domain_cls_loss(z, torch.tensor([1, 0])), [torch.randn(2, 3, generator=g)]),
    "segmentation": lambda g: (lambda z: L.segmentation_loss(torch.softmax(z, 1), torch.tensor([[[0, 2], [1, 1]]])), [torch.randn(1, 3, 2, 2, generator=g)]),
    "total": lambda g: (lambda v: L.total_translation_loss(dict(zip(L.TERMS, v))).total, [torch.randn(9, generator=g)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_loss_gradients_match_finite_differences(name, float64):
    g = torch.Generator().manual_seed(0)
    fn, inputs = GRAD_CASES[name](g)
    inputs = [t.double() for t in inputs]
    assert fd_relative_error(fn, inputs) < REL_TOL
