from .losses import (
    TERMS,
    LossBreakdown,
    PerturbationSpec,
    ReconLossWeights,
    ce_loss,
    compose,
    cosine_diversity_loss,
    kl_loss,
    orthogonality_loss,
    perturb,
    pixel_bound_loss,
    total_recon_loss,
    variational_loss,
)
from .reconstruct import HISTORY_COLUMNS, ReconConfig, ReconResult, initial_state, recompose, run_reconstruction
