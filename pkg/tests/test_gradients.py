"""Autodiff vs central finite differences, in float64, for every loss term."""

import pytest
import torch

from inversion_audit.classifiers import classification_loss_grad_norm, input_sensitivity
from inversion_audit.generator import GeneratorSpec, build_generator, generate_train, sample_conditioning
from inversion_audit.inversion import TERMS, PerturbationSpec, total_recon_loss

from .conftest import double_classifier

D = torch.float64
H = 1e-6


def directional_check(f, x, probes=5, seed=0):
    """Compare <grad f(x), d> with a central difference for random unit directions d."""
    g = torch.Generator().manual_seed(seed)
    x = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(x), x)
    for _ in range(probes):
        d = torch.randn(x.shape, generator=g, dtype=D)
        d /= d.norm()
        with torch.no_grad():
            fd = (f(x + H * d) - f(x - H * d)) / (2 * H)
        ad = (grad * d).sum()
        assert ad.item() == pytest.approx(fd.item(), rel=1e-3, abs=1e-7)


def _images(b=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 1, 12, 12, generator=g, dtype=D) * 1.3 - 0.15


@pytest.mark.parametrize("arch", ["mlp", "cnn", "vit"])
@pytest.mark.parametrize("term", TERMS)
def test_term_gradient_wrt_pixels(term, arch):
    clf = double_classifier(arch)
    bundle = sample_conditioning(4, 4, seed=1)
    pert = PerturbationSpec("gaussian", 0.05)
    directional_check(lambda x: getattr(total_recon_loss(clf, x, bundle, pert=pert, seed=9), term), _images())


def test_total_gradient_wrt_generator_parameters():
    clf = double_classifier("cnn")
    gen = build_generator(GeneratorSpec(4, (1, 12, 12), latent_dim=8, base_channels=8), seed=0).double().eval()
    bundle = sample_conditioning(4, 4, seed=2, latent_dim=8)
    params = dict(gen.named_parameters())
    name = "grow.0.weight"
    base = params[name].detach().clone()

    def f(p):
        with torch.no_grad():
            params[name].copy_(p)
        return total_recon_loss(clf, generate_train(gen, bundle), bundle, seed=3).total

    gen.zero_grad()
    total_recon_loss(clf, generate_train(gen, bundle), bundle, seed=3).total.backward()
    grad = params[name].grad.clone()
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        d = torch.randn(base.shape, generator=g, dtype=D)
        d /= d.norm()
        fd = (f(base + H * d) - f(base - H * d)).item() / (2 * H)
        assert (grad * d).sum().item() == pytest.approx(fd, rel=1e-3, abs=1e-7)
    f(base)


def test_classification_grad_norm_matches_finite_differences():
    clf = double_classifier("mlp")
    labels = torch.tensor([0, 1, 2, 3])
    directional_check(lambda x: classification_loss_grad_norm(clf, x, labels), _images())


def test_input_sensitivity_matches_jacobian():
    clf = double_classifier("cnn")
    x = _images(2)
    got = input_sensitivity(clf, x)
    for i in range(2):
        jac = torch.autograd.functional.jacobian(lambda z: clf.model(z[None])[0].softmax(1)[0], x[i])
        assert got[i].item() == pytest.approx(jac.norm().item(), rel=1e-9)


def test_grad_term_leaves_classifier_weights_untouched():
    clf = double_classifier("vit")
    x = _images().requires_grad_(True)
    parts = total_recon_loss(clf, x, sample_conditioning(4, 4, seed=0))
    parts.total.backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()
    assert all(p.grad is None and not p.requires_grad for p in clf.model.parameters())
