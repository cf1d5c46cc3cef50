"""Loss terms of the reconstruction objective.

Every term is a scalar tensor, symmetric in batch order, and differentiable
with respect to the images it is computed from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from ..classifiers import FeatureBundle, TrainedClassifier, forward_features, leaf_forward, param_grad_norm
from ..errors import ConfigError, NumericalError
from ..generator import ConditioningBundle

LOG_FLOOR = 1e-8
NORM_EPS = 1e-12

TERMS = ("kl", "kl_pert", "ce", "ce_pert", "cosine", "ortho", "var", "pix", "grad")


@dataclass(frozen=True)
class ReconLossWeights:
    alpha: float = 1.0  # kl
    alpha_pert: float = 1.0  # kl_pert
    beta: float = 1.0  # ce
    beta_pert: float = 1.0  # ce_pert
    gamma: float = 0.1  # cosine
    delta: float = 0.1  # ortho
    eta1: float = 1e-4  # var
    eta2: float = 1.0  # pix
    eta3: float = 1e-2  # grad

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ConfigError(f"weights.{f.name} must be >= 0, got {v}")
        if self.alpha == 0 and self.beta == 0:
            raise ConfigError("at least one of weights.alpha, weights.beta must be > 0")

    def for_terms(self) -> dict:
        return dict(zip(TERMS, (getattr(self, f.name) for f in fields(self))))

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "gaussian"
    magnitude: float = 0.05

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ConfigError(f"pert.kind must be 'gaussian' or 'uniform', got {self.kind!r}")
        if not self.magnitude >= 0:
            raise ConfigError("pert.magnitude must be >= 0")


@dataclass
class LossBreakdown:
    kl: torch.Tensor
    kl_pert: torch.Tensor
    ce: torch.Tensor
    ce_pert: torch.Tensor
    cosine: torch.Tensor
    ortho: torch.Tensor
    var: torch.Tensor
    pix: torch.Tensor
    grad: torch.Tensor
    total: torch.Tensor

    def terms(self) -> dict:
        return {t: getattr(self, t) for t in TERMS}

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in {**self.terms(), "total": self.total}.items()}


def compose(terms: dict, weights: ReconLossWeights):
    w = weights.for_terms()
    total = 0.0
    for t in TERMS:
        total = total + w[t] * terms[t]
    return total


def kl_loss(target: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Batch-mean KL(target || probs); 1-D inputs are treated as a batch of one."""
    if target.dim() == 1:
        target, probs = target[None], probs[None]
    q = probs.clamp_min(LOG_FLOOR)
    return (torch.xlogy(target, target) - target * q.log()).sum(1).mean()


def ce_loss(labels: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def _unit_rows(features):
    return features / torch.sqrt((features * features).sum(1, keepdim=True) + NORM_EPS)


def cosine_diversity_loss(features: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity over ordered pairs i != j."""
    b = features.shape[0]
    if b < 2:
        raise ConfigError("cosine diversity needs at least 2 feature vectors")
    u = _unit_rows(features.flatten(1))
    sim = u @ u.T
    return (sim.sum() - sim.diagonal().sum()) / (b * (b - 1))


def orthogonality_loss(features: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the row-normalized Gram matrix from the identity."""
    u = _unit_rows(features.flatten(1))
    gram = u @ u.T
    eye = torch.eye(gram.shape[0], dtype=gram.dtype, device=gram.device)
    return ((gram - eye) ** 2).mean()


def variational_loss(images: torch.Tensor) -> torch.Tensor:
    dh = images[:, :, 1:, :] - images[:, :, :-1, :]
    dw = images[:, :, :, 1:] - images[:, :, :, :-1]
    return (dh.pow(2).flatten(1).sum(1) + dw.pow(2).flatten(1).sum(1)).mean()


def pixel_bound_loss(images: torch.Tensor) -> torch.Tensor:
    return (F.relu(-images) + F.relu(images - 1)).flatten(1).sum(1).mean()


def perturb(images: torch.Tensor, spec: PerturbationSpec, seed=0) -> torch.Tensor:
    """Additive noise; ``seed`` is an int or a torch.Generator. Noise is a constant to autograd."""
    if spec.magnitude == 0:
        return images
    g = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    if spec.kind == "gaussian":
        noise = torch.randn(images.shape, generator=g, dtype=images.dtype) * spec.magnitude
    else:
        noise = (torch.rand(images.shape, generator=g, dtype=images.dtype) * 2 - 1) * spec.magnitude
    return images + noise.to(images.device)


def total_recon_loss(
    classifier: TrainedClassifier,
    images: torch.Tensor,
    bundle: ConditioningBundle,
    weights: ReconLossWeights = ReconLossWeights(),
    pert: PerturbationSpec = PerturbationSpec(),
    seed=0,
) -> LossBreakdown:
    if images.shape[0] != len(bundle):
        raise ConfigError(f"{images.shape[0]} images but {len(bundle)} conditioning rows")
    target = bundle.condition.to(images.dtype)
    labels = bundle.class_index

    tracking = torch.is_grad_enabled()
    # the gradient-norm term needs a graph on theta even when the caller disabled autograd
    with torch.enable_grad():
        clean, params = leaf_forward(classifier, images)
        ce = ce_loss(labels, clean.logits)
        # a zero weight skips the second-order graph
        grad_norm = param_grad_norm(ce, params, create_graph=tracking and weights.eta3 > 0)
    if not tracking:
        clean = FeatureBundle(clean.logits.detach(), clean.features.detach())
        ce, grad_norm = ce.detach(), grad_norm.detach()
    noisy = forward_features(classifier, perturb(images, pert, seed)).logits
    terms = {
        "kl": kl_loss(target, clean.logits.softmax(1)),
        "kl_pert": kl_loss(target, noisy.softmax(1)),
        "ce": ce,
        "ce_pert": ce_loss(labels, noisy),
        "cosine": cosine_diversity_loss(clean.features),
        "ortho": orthogonality_loss(clean.features),
        "var": variational_loss(images),
        "pix": pixel_bound_loss(images),
        "grad": grad_norm,  # inner loss is the clean CE term
    }
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericalError(name, f"loss term is {value.item()}")
    return LossBreakdown(**terms, total=compose(terms, weights))
