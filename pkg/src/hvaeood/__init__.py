"""Budget-constrained latent allocation for hierarchical VAEs, with
likelihood-ratio OOD scoring, mutual-information estimation and the
associated metric suite."""

from .alloc import (
    AllocationPlan,
    ControlPlan,
    EfficacyFunction,
    allocate,
    control_plans,
    find_control,
    grid_argmax_r,
    objective_value,
    quantize_dims,
    real_layer_dims,
)
from .datasets import Dataset, load_idx, preprocess, subsample, synth, synth_pair, write_idx
from .hvae import (
    ElboTerms,
    HvaeConfig,
    HvaeParams,
    TrainHyper,
    build,
    elbo,
    elbo_gt_k,
    infer,
    iwae_bound,
    iwae_bound_gt_k,
    reconstruct_gt_k,
    train,
)
from .likelihoods import (
    DecoderKind,
    bernoulli_logp,
    gaussian_logp,
    logistic_logp,
    mixture_logistic_logp,
    std_normal_logp,
)
from .metrics import MetricReport, auprc, auroc, fpr_at_tpr, summary
from .rng import SeededRng, gauss_sample
from .scoring import MiEstimate, ScoreSeries, llr_score, mi_estimate, score_batch
from .tensor import Tensor, Trace, backward, grad_check, tracing

__version__ = "0.1.0"
