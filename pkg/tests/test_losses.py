import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inversion_audit.errors import ConfigError
from inversion_audit.generator import sample_conditioning
from inversion_audit.inversion import (
    TERMS,
    PerturbationSpec,
    ReconLossWeights,
    ce_loss,
    cosine_diversity_loss,
    kl_loss,
    orthogonality_loss,
    perturb,
    pixel_bound_loss,
    total_recon_loss,
    variational_loss,
)

from .conftest import double_classifier

D = torch.float64


def test_kl_identity_is_zero():
    u = torch.full((10,), 0.1, dtype=D)
    assert kl_loss(u, u).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_one_hot_vs_uniform_is_ln10():
    p = torch.zeros(10, dtype=D)
    p[3] = 1
    assert kl_loss(p, torch.full((10,), 0.1, dtype=D)).item() == pytest.approx(math.log(10), abs=1e-6)


def test_kl_hand_summation():
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    got = kl_loss(torch.tensor([0.5, 0.5], dtype=D), torch.tensor([0.9, 0.1], dtype=D)).item()
    assert got == pytest.approx(expected, abs=1e-6)
    assert got == pytest.approx(0.5108, abs=1e-4)


def test_kl_floors_zero_probabilities():
    p = torch.tensor([0.5, 0.5], dtype=D)
    q = torch.tensor([1.0, 0.0], dtype=D)
    assert kl_loss(p, q).item() == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / 1e-8), rel=1e-9)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_kl_nonnegative(a, b):
    n = min(len(a), len(b))
    p = torch.tensor(a[:n], dtype=D).softmax(0)
    q = torch.tensor(b[:n], dtype=D).softmax(0)
    assert kl_loss(p, q).item() >= -1e-12


def test_ce_uniform_logits_is_ln10():
    logits = torch.zeros(4, 10, dtype=D)
    assert ce_loss(torch.tensor([0, 3, 5, 9]), logits).item() == pytest.approx(math.log(10), abs=1e-6)


def test_ce_decreases_as_target_logit_grows():
    vals = []
    for z in [0.0, 1.0, 2.0, 5.0, 10.0, 20.0]:
        logits = torch.zeros(1, 10, dtype=D)
        logits[0, 2] = z
        vals.append(ce_loss(torch.tensor([2]), logits).item())
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-7


def test_ce_duplicated_rows():
    logits = torch.randn(1, 10, dtype=D)
    one = ce_loss(torch.tensor([4]), logits)
    many = ce_loss(torch.tensor([4, 4, 4]), logits.repeat(3, 1))
    assert many.item() == pytest.approx(one.item(), abs=1e-12)


def test_cosine_cases():
    v = torch.tensor([[1.0, 2.0, 3.0]], dtype=D)
    assert cosine_diversity_loss(v.repeat(5, 1)).item() == pytest.approx(1.0, abs=1e-6)
    assert cosine_diversity_loss(torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=D)).item() == pytest.approx(0.0, abs=1e-6)
    assert cosine_diversity_loss(torch.cat([v, -v])).item() == pytest.approx(-1.0, abs=1e-6)


def test_cosine_needs_two_vectors():
    with pytest.raises(ConfigError):
        cosine_diversity_loss(torch.ones(1, 3))


def test_cosine_zero_vector_is_finite():
    f = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=D)
    assert cosine_diversity_loss(f).item() == pytest.approx(0.0, abs=1e-6)


def test_cosine_matches_pairwise_loop():
    f = torch.randn(6, 5, dtype=D, generator=torch.Generator().manual_seed(0))
    pairs = [
        torch.dot(f[i], f[j]) / (f[i].norm() * f[j].norm()) for i in range(6) for j in range(6) if i != j
    ]
    assert cosine_diversity_loss(f).item() == pytest.approx(torch.stack(pairs).mean().item(), abs=1e-9)


def test_ortho_cases():
    assert orthogonality_loss(torch.eye(4, dtype=D) * 3).item() == pytest.approx(0.0, abs=1e-9)
    u = torch.tensor([[0.6, 0.8]], dtype=D)
    assert orthogonality_loss(u.repeat(2, 1)).item() == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("angle", [0.0, 0.3, 1.0, math.pi / 2, 2.5])
def test_ortho_closed_form_in_angle(angle):
    f = torch.tensor([[1.0, 0.0], [math.cos(angle), math.sin(angle)]], dtype=D) * 2.0
    c = math.cos(angle)
    assert orthogonality_loss(f).item() == pytest.approx(c * c / 2, abs=1e-6)


def test_var_cases():
    assert variational_loss(torch.full((2, 3, 5, 5), 0.7, dtype=D)).item() == 0.0
    img = torch.tensor([[[[0.0, 1.0], [0.0, 1.0]]]], dtype=D)
    assert variational_loss(img).item() == pytest.approx(2.0, abs=1e-6)


@given(st.floats(0.1, 10))
@settings(max_examples=20)
def test_var_quadratic_homogeneity(s):
    x = torch.rand(2, 1, 6, 6, dtype=D, generator=torch.Generator().manual_seed(1))
    assert variational_loss(s * x).item() == pytest.approx(s * s * variational_loss(x).item(), rel=1e-9)


def test_var_matches_loop():
    x = torch.rand(3, 2, 5, 4, dtype=D, generator=torch.Generator().manual_seed(2))
    total = 0.0
    for b in range(3):
        for c in range(2):
            for h in range(5):
                for w in range(4):
                    if h + 1 < 5:
                        total += (x[b, c, h + 1, w] - x[b, c, h, w]).item() ** 2
                    if w + 1 < 4:
                        total += (x[b, c, h, w + 1] - x[b, c, h, w]).item() ** 2
    assert variational_loss(x).item() == pytest.approx(total / 3, rel=1e-12)


def test_pix_cases():
    x = torch.full((1, 1, 4, 4), 0.5, dtype=D)
    assert pixel_bound_loss(x).item() == 0.0
    y = x.clone()
    y[0, 0, 1, 2] = 1.5
    assert pixel_bound_loss(y).item() == pytest.approx(0.5, abs=1e-6)
    z = x.clone()
    z[0, 0, 3, 3] = -0.2
    assert pixel_bound_loss(z).item() == pytest.approx(0.2, abs=1e-6)


def test_perturb_zero_is_identity():
    x = torch.rand(2, 1, 5, 5)
    assert torch.equal(perturb(x, PerturbationSpec("gaussian", 0.0), seed=3), x)


def test_perturb_gaussian_std():
    x = torch.zeros(1, 1, 100, 100, dtype=D)
    d = perturb(x, PerturbationSpec("gaussian", 0.05), seed=0) - x
    assert abs(d.std().item() - 0.05) <= 0.005


def test_perturb_uniform_bounds_and_determinism():
    x = torch.zeros(1, 1, 50, 50)
    spec = PerturbationSpec("uniform", 0.1)
    a, b = perturb(x, spec, seed=4), perturb(x, spec, seed=4)
    assert torch.equal(a, b)
    assert a.abs().max() <= 0.1
    assert not torch.equal(a, perturb(x, spec, seed=5))


def test_perturb_passes_gradient_through_identity():
    x = torch.rand(1, 1, 4, 4, dtype=D, requires_grad=True)
    perturb(x, PerturbationSpec(), seed=0).sum().backward()
    assert torch.equal(x.grad, torch.ones_like(x))


def test_weights_validation():
    with pytest.raises(ConfigError):
        ReconLossWeights(alpha=0, beta=0)
    with pytest.raises(ConfigError):
        ReconLossWeights(gamma=-1)
    with pytest.raises(ConfigError):
        PerturbationSpec("laplace", 0.1)


# --- composite -------------------------------------------------------------


def _setup(seed=0, arch="mlp", b=6):
    clf = double_classifier(arch)
    bundle = sample_conditioning(4, b, seed=seed)
    images = torch.rand(b, 1, 12, 12, dtype=D, generator=torch.Generator().manual_seed(seed)) * 1.4 - 0.2
    return clf, bundle, images


def test_only_alpha_gives_kl():
    clf, bundle, x = _setup()
    w = ReconLossWeights(alpha=1, alpha_pert=0, beta=0, beta_pert=0, gamma=0, delta=0, eta1=0, eta2=0, eta3=0)
    parts = total_recon_loss(clf, x, bundle, w)
    assert parts.total.item() == parts.kl.item()


def test_zero_sigma_perturbed_terms_equal_clean():
    clf, bundle, x = _setup()
    parts = total_recon_loss(clf, x, bundle, pert=PerturbationSpec("gaussian", 0.0))
    assert parts.kl_pert.item() == pytest.approx(parts.kl.item(), abs=1e-6)
    assert parts.ce_pert.item() == pytest.approx(parts.ce.item(), abs=1e-6)


def test_total_matches_independent_recomputation():
    clf, bundle, x = _setup(arch="cnn")
    w = ReconLossWeights(1, 1, 1, 1, 0.1, 0.1, 1e-4, 1, 1e-2)
    pert = PerturbationSpec("gaussian", 0.05)
    parts = total_recon_loss(clf, x, bundle, w, pert, seed=11)

    # recompute every term from scratch, without the composite path
    logits, feats = clf.model(x)
    noisy_logits, _ = clf.model(perturb(x, pert, seed=11))
    target = bundle.condition.to(D)

    def kl(q):
        return (target * (target.log() - q.clamp_min(1e-8).log())).sum(1).mean()

    def ce(lg):
        return -lg.log_softmax(1)[torch.arange(len(x)), bundle.class_index].mean()

    u = feats / feats.norm(dim=1, keepdim=True)
    g = u @ u.T
    n = len(x)
    clf.model.requires_grad_(True)
    grads = torch.autograd.grad(ce(clf.model(x)[0]), list(clf.model.parameters()))
    clf.model.requires_grad_(False)
    expected = {
        "kl": kl(logits.softmax(1)),
        "kl_pert": kl(noisy_logits.softmax(1)),
        "ce": ce(logits),
        "ce_pert": ce(noisy_logits),
        "cosine": (g.sum() - g.trace()) / (n * (n - 1)),
        "ortho": ((g - torch.eye(n, dtype=D)) ** 2).sum() / n**2,
        "var": ((x[:, :, 1:] - x[:, :, :-1]) ** 2).sum() / n + ((x[..., 1:] - x[..., :-1]) ** 2).sum() / n,
        "pix": (torch.relu(-x).sum() + torch.relu(x - 1).sum()) / n,
        "grad": torch.sqrt(sum((gr**2).sum() for gr in grads)),
    }
    weights = w.for_terms()
    for t in TERMS:
        assert getattr(parts, t).item() == pytest.approx(expected[t].item(), abs=1e-6, rel=1e-6), t
    total = sum(weights[t] * expected[t].item() for t in TERMS)
    assert parts.total.item() == pytest.approx(total, abs=1e-6)


def test_terms_respect_lower_bounds():
    for seed in range(5):
        clf, bundle, x = _setup(seed)
        parts = total_recon_loss(clf, x, bundle)
        for t in ("kl", "kl_pert", "ce", "ce_pert", "ortho", "var", "pix", "grad"):
            assert getattr(parts, t).item() >= 0, t
        assert -1 - 1e-9 <= parts.cosine.item() <= 1 + 1e-9


@pytest.mark.parametrize("arch", ["mlp", "cnn", "vit"])
def test_batch_permutation_invariance(arch):
    clf, bundle, x = _setup(arch=arch)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    a = total_recon_loss(clf, x, bundle, pert=PerturbationSpec(magnitude=0.0))
    b = total_recon_loss(clf, x[perm], bundle[perm], pert=PerturbationSpec(magnitude=0.0))
    for t in TERMS + ("total",):
        assert getattr(a, t).item() == pytest.approx(getattr(b, t).item(), rel=1e-9, abs=1e-12), t


def test_non_finite_term_names_itself():
    from inversion_audit.errors import NumericalError

    clf, bundle, x = _setup()
    x = x.clone()
    x[0, 0, 0, 0] = float("inf")
    with pytest.raises(NumericalError):
        total_recon_loss(clf, x, bundle)
