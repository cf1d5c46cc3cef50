"""Optimization loop that trains the generator against a frozen classifier."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch

from ..classifiers import TrainedClassifier
from ..errors import ConfigError, NumericalError
from ..generator import MODES, ConditionedGenerator, generate_train, sample_conditioning
from .losses import TERMS, PerturbationSpec, ReconLossWeights, compose, total_recon_loss

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step",) + TERMS + ("total",)


@dataclass(frozen=True)
class ReconConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    weights: ReconLossWeights = field(default_factory=ReconLossWeights)
    pert: PerturbationSpec = field(default_factory=PerturbationSpec)
    seed: int = 0
    mode: str = "one_hot_target"
    smoothing: float = 0.01
    clip_norm: float = 5.0
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (pairwise feature losses)")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0 <= self.smoothing < 1:
            raise ConfigError("smoothing must be in [0, 1)")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")

    def as_dict(self):
        return asdict(self)


@dataclass
class ReconResult:
    generator: ConditionedGenerator
    history: list
    state: dict


def initial_state(generator: ConditionedGenerator, config: ReconConfig) -> dict:
    opt = torch.optim.Adam(generator.parameters(), lr=config.lr)
    return {
        "step": 0,
        "optimizer": opt.state_dict(),
        "rng": torch.Generator().manual_seed(config.seed).get_state(),
        "torch_rng": _seeded_global_state(config.seed + 1),
    }


def _seeded_global_state(seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return torch.get_rng_state()


def run_reconstruction(
    classifier: TrainedClassifier,
    generator: ConditionedGenerator,
    config: ReconConfig,
    state: Optional[dict] = None,
    on_log: Optional[Callable[[dict], None]] = None,
    on_checkpoint: Optional[Callable[[ConditionedGenerator, dict], None]] = None,
) -> ReconResult:
    """Train ``generator`` in place for ``config.steps`` total updates.

    ``state`` (from a previous checkpoint) resumes a run; the loop then
    continues from ``state["step"]``. Logged rows are dicts keyed by
    ``HISTORY_COLUMNS``. On a non-finite loss the generator is rolled back to
    the last checkpointed weights and ``NumericalError`` is raised.
    """
    if not classifier.frozen:
        raise ConfigError("classifier must be frozen")
    n = generator.spec.num_classes
    if classifier.spec.num_classes != n or classifier.spec.input_shape != generator.spec.output_shape:
        raise ConfigError("generator and classifier disagree on classes or image shape")

    state = state or initial_state(generator, config)
    opt = torch.optim.Adam(generator.parameters(), lr=config.lr)
    opt.load_state_dict(state["optimizer"])
    rng = torch.Generator()
    rng.set_state(state["rng"])
    start = state["step"]

    history = []
    last_good = {"model": copy.deepcopy(generator.state_dict()), "state": state}
    generator.train()
    with torch.random.fork_rng(devices=[]):
        torch.set_rng_state(state["torch_rng"])  # dropout masks
        for step in range(start, config.steps):
            bundle = sample_conditioning(
                n, config.batch_size, config.mode, rng, generator.spec.latent_dim, config.smoothing
            )
            images = generate_train(generator, bundle)
            try:
                parts = total_recon_loss(classifier, images, bundle, config.weights, config.pert, rng)
                if not torch.isfinite(parts.total):
                    raise NumericalError("total", f"loss is {parts.total.item()}")
            except NumericalError as exc:
                generator.load_state_dict(last_good["model"])
                exc.history = history
                exc.last_good_step = last_good["state"]["step"]
                log.error("aborting at step %d: %s", step, exc)
                raise

            if step % config.log_every == 0 or step == config.steps - 1:
                row = {"step": step, **parts.as_floats()}
                history.append(row)
                if on_log:
                    on_log(row)

            opt.zero_grad()
            parts.total.backward()
            torch.nn.utils.clip_grad_norm_(generator.parameters(), config.clip_norm)
            opt.step()

            done = step + 1
            if done % config.checkpoint_every == 0 or done == config.steps:
                state = {
                    "step": done,
                    "optimizer": copy.deepcopy(opt.state_dict()),
                    "rng": rng.get_state(),
                    "torch_rng": torch.get_rng_state(),
                }
                last_good = {"model": copy.deepcopy(generator.state_dict()), "state": state}
                if on_checkpoint:
                    on_checkpoint(generator, state)

    generator.eval()
    return ReconResult(generator, history, last_good["state"] if config.steps > start else state)


def recompose(row: dict, weights: ReconLossWeights) -> float:
    """Independent recomputation of a logged row's total from its terms."""
    return float(compose({t: row[t] for t in TERMS}, weights))
