"""MLP / CNN / ViT classifiers that expose logits plus an architecture-specific feature vector."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .data import ImageBatch, ImageCollection, batch_iterator
from .errors import ConfigError, NumericalError, TrainingError

log = logging.getLogger(__name__)

ARCHS = ("MLP", "CNN", "ViT")


def canonical_arch(arch: str) -> str:
    for a in ARCHS:
        if a.lower() == str(arch).lower():
            return a
    raise ConfigError(f"unknown arch {arch!r}; expected one of {[a.lower() for a in ARCHS]}")


@dataclass(frozen=True)
class ClassifierSpec:
    arch: str
    input_shape: tuple
    num_classes: int
    mlp_hidden: tuple = (512, 256, 128, 64)
    cnn_channels: tuple = (32, 64, 128)
    cnn_features: str = "flatten"  # or "fc": extra hidden FC layer whose activations are the features
    cnn_fc_width: int = 128
    vit_embed_dim: int = 128
    vit_heads: int = 4
    vit_depth: int = 3
    vit_patch: int = 4
    vit_mlp_ratio: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "arch", canonical_arch(self.arch))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        for name in ("mlp_hidden", "cnn_channels"):
            object.__setattr__(self, name, tuple(int(s) for s in getattr(self, name)))
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (c, h, w), got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.arch == "MLP" and len(self.mlp_hidden) != 4:
            raise ConfigError("MLP has exactly 5 weight layers (4 hidden widths)")
        if self.arch == "CNN":
            if len(self.cnn_channels) != 3:
                raise ConfigError("CNN has exactly 3 convolutional layers")
            if self.cnn_features not in ("flatten", "fc"):
                raise ConfigError(f"cnn_features must be 'flatten' or 'fc', got {self.cnn_features!r}")
        if self.arch == "ViT":
            _, h, w = self.input_shape
            if h % self.vit_patch or w % self.vit_patch:
                raise ConfigError(f"ViT patch {self.vit_patch} does not divide image {h}x{w}")
            if self.vit_embed_dim % self.vit_heads:
                raise ConfigError("vit_embed_dim must be divisible by vit_heads")

    def as_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _block(n_in, n_out, p):
    return nn.Sequential(nn.Linear(n_in, n_out), nn.BatchNorm1d(n_out), nn.LeakyReLU(0.2), nn.Dropout(p))


class MLP(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        c, h, w = spec.input_shape
        widths = (c * h * w,) + spec.mlp_hidden
        self.hidden = nn.Sequential(*[_block(a, b, spec.dropout) for a, b in zip(widths, widths[1:])])
        self.head = nn.Linear(widths[-1], spec.num_classes)
        self.feature_dim = widths[-1]

    def forward(self, x):
        feats = self.hidden(x.flatten(1))
        return self.head(feats), feats


class CNN(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        c, h, w = spec.input_shape
        layers = []
        for ch in spec.cnn_channels:
            layers += [
                nn.Conv2d(c, ch, 3, stride=2, padding=1),
                nn.BatchNorm2d(ch),
                nn.LeakyReLU(0.2),
                nn.Dropout(spec.dropout),
            ]
            c = ch
            h, w = (h + 1) // 2, (w + 1) // 2
        self.conv = nn.Sequential(*layers)
        flat = c * h * w
        self.fc = None
        if spec.cnn_features == "fc":
            self.fc = nn.Sequential(nn.Linear(flat, spec.cnn_fc_width), nn.LeakyReLU(0.2), nn.Dropout(spec.dropout))
            flat = spec.cnn_fc_width
        self.head = nn.Linear(flat, spec.num_classes)
        self.feature_dim = flat

    def forward(self, x):
        feats = self.conv(x).flatten(1)
        if self.fc is not None:
            feats = self.fc(feats)
        return self.head(feats), feats


class Attention(nn.Module):
    # written out explicitly so double backward never hits a fused kernel
    def __init__(self, dim, heads, p):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(p)

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        att = self.drop(att.softmax(dim=-1))
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, p):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, p)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Dropout(p), nn.Linear(dim * mlp_ratio, dim)
        )
        self.drop = nn.Dropout(p)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.mlp(self.norm2(x)))


class ViT(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        c, h, w = spec.input_shape
        d = spec.vit_embed_dim
        self.num_patches = (h // spec.vit_patch) * (w // spec.vit_patch)
        self.patch = nn.Conv2d(c, d, spec.vit_patch, stride=spec.vit_patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.zeros(1, self.num_patches + 1, d))
        nn.init.trunc_normal_(self.pos, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.drop = nn.Dropout(spec.dropout)
        self.blocks = nn.Sequential(
            *[TransformerBlock(d, spec.vit_heads, spec.vit_mlp_ratio, spec.dropout) for _ in range(spec.vit_depth)]
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, spec.num_classes)
        self.feature_dim = d

    def tokens(self, x):
        t = self.patch(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1)
        return self.drop(t + self.pos)

    def forward(self, x):
        feats = self.norm(self.blocks(self.tokens(x)))[:, 0]
        return self.head(feats), feats


_MODELS = {"MLP": MLP, "CNN": CNN, "ViT": ViT}


@dataclass
class FeatureBundle:
    logits: torch.Tensor
    features: torch.Tensor


@dataclass
class TrainedClassifier:
    spec: ClassifierSpec
    model: nn.Module
    manifest: dict = field(default_factory=dict)
    frozen: bool = False

    @property
    def feature_dim(self) -> int:
        return self.model.feature_dim

    def freeze(self):
        self.model.eval()
        self.model.requires_grad_(False)
        self.frozen = True
        return self

    def to(self, dtype=None, device=None):
        self.model.to(device=device, dtype=dtype)
        return self


def build_classifier(spec: ClassifierSpec, seed: int) -> TrainedClassifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _MODELS[spec.arch](spec)
    return TrainedClassifier(spec, model, manifest={"init_seed": seed})


def _check_shape(classifier: TrainedClassifier, pixels: torch.Tensor):
    if pixels.dim() != 4 or tuple(pixels.shape[1:]) != classifier.spec.input_shape:
        raise ConfigError(f"batch shape {tuple(pixels.shape)} does not match {classifier.spec.input_shape}")


@torch.no_grad()
def accuracy(classifier: TrainedClassifier, collection: ImageCollection, batch_size=256) -> float:
    was_training = classifier.model.training
    classifier.model.eval()
    correct = 0
    for start in range(0, len(collection), batch_size):
        b = collection[slice(start, start + batch_size)]
        logits, _ = classifier.model(b.pixels.to(next(classifier.model.parameters()).dtype))
        correct += (logits.argmax(1) == b.labels).sum().item()
    classifier.model.train(was_training)
    return correct / max(len(collection), 1)


def train_classifier(
    classifier: TrainedClassifier,
    dataset: ImageCollection,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
    test_set: Optional[ImageCollection] = None,
) -> TrainedClassifier:
    """Adam + cross-entropy; returns the same classifier, frozen, with accuracies in its manifest."""
    spec = classifier.spec
    if tuple(dataset.spec.image_shape) != spec.input_shape or dataset.spec.num_classes != spec.num_classes:
        raise ConfigError(
            f"dataset {dataset.spec.name} {dataset.spec.image_shape}/{dataset.spec.num_classes} classes "
            f"does not match classifier {spec.input_shape}/{spec.num_classes}"
        )
    model = classifier.model
    model.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    step = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)  # dropout masks
        for epoch in range(epochs):
            model.train()
            for batch in batch_iterator(dataset, batch_size, seed=seed * 100003 + epoch):
                if len(batch) < 2:
                    continue  # BatchNorm needs >1 sample
                logits, _ = model(batch.pixels)
                loss = F.cross_entropy(logits, batch.labels)
                if not torch.isfinite(loss):
                    raise TrainingError(step, f"loss became {loss.item()}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
    classifier.freeze()
    classifier.manifest.update(
        dataset=dataset.spec.as_dict(),
        epochs=epochs,
        lr=lr,
        seed=seed,
        batch_size=batch_size,
        steps=step,
        train_accuracy=accuracy(classifier, dataset),
        test_accuracy=accuracy(classifier, test_set) if test_set is not None else None,
    )
    return classifier


def forward_features(classifier: TrainedClassifier, batch) -> FeatureBundle:
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    _check_shape(classifier, pixels)
    if not classifier.frozen:
        raise ConfigError("classifier must be frozen before inversion-time forward passes")
    logits, feats = classifier.model(pixels)
    return FeatureBundle(logits, feats)


def leaf_forward(classifier: TrainedClassifier, pixels: torch.Tensor):
    """Frozen forward pass with the weights swapped for detached leaf copies.

    Returns the FeatureBundle and the leaf parameters, so a loss built on the
    logits can be differentiated w.r.t. theta without the frozen weights ever
    accumulating ``.grad``.
    """
    _check_shape(classifier, pixels)
    if not classifier.frozen:
        raise ConfigError("classifier must be frozen before inversion-time forward passes")
    model = classifier.model
    params = {k: v.detach().requires_grad_(True) for k, v in model.named_parameters()}
    logits, feats = functional_call(model, {**params, **dict(model.named_buffers())}, (pixels,))
    return FeatureBundle(logits, feats), params


def param_grad_norm(loss: torch.Tensor, params: dict, create_graph=True) -> torch.Tensor:
    # retain_graph: the forward that produced ``loss`` is usually shared with other terms
    grads = torch.autograd.grad(loss, list(params.values()), create_graph=create_graph, retain_graph=True)
    norm = torch.sqrt(sum((g * g).sum() for g in grads) + 1e-12)
    if not torch.isfinite(norm):
        bad = [k for k, g in zip(params, grads) if not torch.isfinite(g).all()]
        raise NumericalError("grad", f"non-finite parameter gradients in {bad}")
    return norm


def classification_loss_grad_norm(classifier: TrainedClassifier, batch, labels, create_graph=True) -> torch.Tensor:
    """Global L2 norm of d(mean CE)/d(theta), itself differentiable w.r.t. the input pixels."""
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    tracking = torch.is_grad_enabled()
    with torch.enable_grad():
        out, params = leaf_forward(classifier, pixels)
        norm = param_grad_norm(F.cross_entropy(out.logits, labels), params, create_graph and tracking)
    return norm if tracking else norm.detach()


def input_sensitivity(classifier: TrainedClassifier, pixels: torch.Tensor) -> torch.Tensor:
    """Per-sample Frobenius norm of d softmax / d input (diagnostic only, never a loss)."""
    x = pixels.detach().clone().requires_grad_(True)
    probs = forward_features(classifier, x).logits.softmax(1)
    total = torch.zeros(x.shape[0], dtype=x.dtype)
    for k in range(probs.shape[1]):
        (g,) = torch.autograd.grad(probs[:, k].sum(), x, retain_graph=True)
        total += g.flatten(1).pow(2).sum(1)
    return total.sqrt()
