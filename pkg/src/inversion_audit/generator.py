"""Vector-matrix conditioned generator.

Latent ``z`` and a softmaxed condition vector are concatenated, projected and
upsampled to an ``N x N`` map (``N`` = class count); the hot conditioning
matrix is appended there as one extra channel before upsampling to the
classifier's input size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch
from .errors import ConfigError

MODES = ("diverse", "one_hot_target")
OUTPUT_WEIGHT_SCALE = 0.1
OUTPUT_BIAS = -0.2


@dataclass(frozen=True)
class ConditioningBundle:
    """A batch of conditioning draws, one row per sample.

    orientation[i] is 0 for row, 1 for column.
    """

    latent: torch.Tensor  # (B, L)
    condition: torch.Tensor  # (B, N)
    class_index: torch.Tensor  # (B,)
    hot_matrix: torch.Tensor  # (B, N, N)
    orientation: torch.Tensor  # (B,)

    def __len__(self):
        return self.latent.shape[0]

    @property
    def num_classes(self):
        return self.condition.shape[1]

    def __getitem__(self, idx):
        return ConditioningBundle(
            self.latent[idx], self.condition[idx], self.class_index[idx], self.hot_matrix[idx], self.orientation[idx]
        )

    def to(self, dtype):
        return ConditioningBundle(
            self.latent.to(dtype), self.condition.to(dtype), self.class_index, self.hot_matrix.to(dtype), self.orientation
        )

    def validate(self):
        n = self.num_classes
        if self.hot_matrix.shape[1:] != (n, n):
            raise ConfigError(f"hot matrix must be {n}x{n}, got {tuple(self.hot_matrix.shape[1:])}")
        if not torch.allclose(self.condition.sum(1), torch.ones(len(self), dtype=self.condition.dtype), atol=1e-6):
            raise ConfigError("condition vectors must sum to 1")
        if (self.condition < 0).any():
            raise ConfigError("condition vectors must be nonnegative")
        expected = hot_matrix(self.class_index, n, self.orientation, dtype=self.hot_matrix.dtype)
        if not torch.equal(self.hot_matrix, expected):
            raise ConfigError("hot matrix must have exactly N ones, all in row/column class_index")
        return self


def hot_matrix(class_index: torch.Tensor, n: int, orientation: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    onehot = F.one_hot(class_index, n).to(dtype)  # (B, N)
    rows = onehot[:, :, None].expand(-1, n, n)  # row k all ones
    cols = onehot[:, None, :].expand(-1, n, n)  # column k all ones
    return torch.where(orientation.bool()[:, None, None], cols, rows).contiguous()


def smoothed_one_hot(class_index: torch.Tensor, n: int, eps: float, dtype=torch.float32) -> torch.Tensor:
    return (1 - eps) * F.one_hot(class_index, n).to(dtype) + eps / n


def sample_conditioning(
    num_classes: int,
    batch: int,
    mode: str = "one_hot_target",
    seed=0,
    latent_dim: int = 64,
    eps: float = 0.01,
    class_index=None,
) -> ConditioningBundle:
    """Draw a conditioning batch.

    ``seed`` may be an int or a ``torch.Generator`` (advanced in place).
    ``class_index`` pins the classes (one_hot_target mode only).
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    g = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    latent = torch.randn(batch, latent_dim, generator=g)
    if mode == "diverse":
        if class_index is not None:
            raise ConfigError("class_index can only be pinned in one_hot_target mode")
        condition = torch.randn(batch, num_classes, generator=g).softmax(1)
        k = condition.argmax(1)
    else:
        if class_index is None:
            k = torch.randint(num_classes, (batch,), generator=g)
        else:
            k = torch.as_tensor(class_index, dtype=torch.long).expand(batch).clone()
        condition = smoothed_one_hot(k, num_classes, eps)
    orientation = torch.arange(batch) % 2
    return ConditioningBundle(latent, condition, k, hot_matrix(k, num_classes, orientation), orientation)


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int
    output_shape: tuple
    latent_dim: int = 64
    base_channels: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "output_shape", tuple(int(s) for s in self.output_shape))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.output_shape) != 3:
            raise ConfigError("output_shape must be (c, h, w)")

    def as_dict(self):
        d = asdict(self)
        d["output_shape"] = list(self.output_shape)
        return d


def inject_hot_matrix(feature_map: torch.Tensor, matrix: torch.Tensor) -> torch.Tensor:
    """Append the (B, N, N) hot matrix as one extra channel of a (B, C, N, N) map."""
    if feature_map.shape[-2:] != matrix.shape[-2:] or feature_map.shape[0] != matrix.shape[0]:
        raise RuntimeError(
            f"hot matrix {tuple(matrix.shape)} does not fit feature map {tuple(feature_map.shape)}"
        )
    return torch.cat([feature_map, matrix[:, None].to(feature_map.dtype)], dim=1)


def _up(c_in, c_out, p, **conv):
    return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, **conv), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.2), nn.Dropout(p))


class ConditionedGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        n = spec.num_classes
        c_out, h, w = spec.output_shape
        ch = spec.base_channels
        self.seed_size = (n + 1) // 2
        self.project = nn.Sequential(
            nn.Linear(spec.latent_dim + n, ch * self.seed_size**2),
            nn.BatchNorm1d(ch * self.seed_size**2),
            nn.LeakyReLU(0.2),
        )
        self.to_class_grid = _up(ch, ch // 2, spec.dropout, kernel_size=4, stride=2, padding=1)

        # N -> ~(h/2, w/2) with a stride-1 transposed conv, then x2
        half = (h // 2, w // 2)
        self.exact = h % 2 == 0 and w % 2 == 0 and min(half) >= n
        k = (half[0] - n + 1, half[1] - n + 1) if self.exact else (3, 3)
        self.grow = _up(ch // 2 + 1, ch // 2, spec.dropout, kernel_size=k, stride=1, padding=0 if self.exact else 1)
        self.upsample2 = _up(ch // 2, ch // 4, 0.0, kernel_size=4, stride=2, padding=1)
        self.out = nn.Conv2d(ch // 4, c_out, 3, padding=1)  # linear output, no squashing
        # start just below the valid range: the pixel hinge then settles untouched regions at 0
        with torch.no_grad():
            self.out.weight.mul_(OUTPUT_WEIGHT_SCALE)
            self.out.bias.fill_(OUTPUT_BIAS)

    def forward(self, latent, condition, matrix):
        n = self.spec.num_classes
        _, h, w = self.spec.output_shape
        x = self.project(torch.cat([latent, condition], dim=1))
        x = x.view(-1, self.spec.base_channels, self.seed_size, self.seed_size)
        x = self.to_class_grid(x)
        if x.shape[-1] != n:
            x = F.interpolate(x, size=(n, n), mode="bilinear", align_corners=False)
        x = inject_hot_matrix(x, matrix)
        x = self.grow(x)
        if not self.exact:
            x = F.interpolate(x, size=(h // 2 + h % 2, w // 2 + w % 2), mode="bilinear", align_corners=False)
        x = self.upsample2(x)
        if x.shape[-2:] != (h, w):
            x = x[..., :h, :w]
        return self.out(x)


def build_generator(spec: GeneratorSpec, seed: int) -> ConditionedGenerator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConditionedGenerator(spec)


def _forward(generator: ConditionedGenerator, bundle: ConditioningBundle):
    if bundle.num_classes != generator.spec.num_classes:
        raise ConfigError(f"bundle has {bundle.num_classes} classes, generator expects {generator.spec.num_classes}")
    if bundle.latent.shape[1] != generator.spec.latent_dim:
        raise ConfigError(f"latent dim {bundle.latent.shape[1]} != {generator.spec.latent_dim}")
    dtype = next(generator.parameters()).dtype
    b = bundle.to(dtype)
    return generator(b.latent, b.condition, b.hot_matrix)


def generate(generator: ConditionedGenerator, bundle: ConditioningBundle) -> ImageBatch:
    """Deterministic (eval-mode) generation. Output is NOT clamped."""
    was_training = generator.training
    generator.eval()
    try:
        with torch.no_grad():
            pixels = _forward(generator, bundle)
    finally:
        generator.train(was_training)
    return ImageBatch(pixels, bundle.class_index)


def generate_train(generator: ConditionedGenerator, bundle: ConditioningBundle) -> torch.Tensor:
    """Differentiable forward in the current module mode (train mode during inversion)."""
    return _forward(generator, bundle)
