"""Per-input OOD scores and the latent mutual-information estimator.

The likelihood-ratio score compares the full importance-weighted bound with
one where latents above level k come from the prior; both sides share the
posterior noise (common random numbers), so the score is exactly zero at
k == depth and low-variance elsewhere.

Batch scoring derives one rng per (run seed, input index) and loops inputs,
so a series is reproducible bit for bit and order-independent, and equals
elementwise single-input calls by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .hvae import (
    HvaeParams,
    _as_batch,
    _check_k,
    _infer_chain,
    _mixed_parts,
    _observation,
    _obs_logp,
    _prior_params,
    iwae_bound,
    iwae_bound_gt_k,
)
from .likelihoods import gaussian_logp
from .rng import SeededRng, gauss_sample
from .tensor import Tensor


@dataclass(frozen=True)
class ScoreSeries:
    """Scores for one dataset under one (k, K) setting, with provenance."""

    label: str  # "id" | "ood"
    dataset: str
    k: int
    k_importance: int
    values: np.ndarray
    seed: int

    def __post_init__(self):
        if self.label not in ("id", "ood"):
            raise ValueError(f"label must be 'id' or 'ood', got {self.label!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("score series contains non-finite values")


@dataclass(frozen=True)
class MiEstimate:
    """Monte Carlo mutual-information estimate for one latent level."""

    layer: int
    mean: float
    std_error: float
    samples_per_input: int
    inputs_used: int


def llr_score(params: HvaeParams, x, k: int, K: int, rng: SeededRng) -> float:
    """Likelihood-ratio score L(x) - L^{>k}(x) for a single input.

    Both bounds use K importance samples and shared posterior draws.
    """
    _check_k(params.config, k)
    xt = _as_batch(params.config, x)
    if xt.shape[0] != 1:
        raise ValueError(f"llr_score takes a single input, got batch of {xt.shape[0]}")
    full = iwae_bound(params, xt, K, rng)
    partial = iwae_bound_gt_k(params, xt, k, K, rng)
    return float(full[0] - partial[0])


def score_batch(params: HvaeParams, dataset: Dataset, k: int, K: int, seed: int,
                label: str = "id", eval_samples: int = 10000) -> ScoreSeries:
    """One llr_score per input, capped at ``eval_samples`` by seeded subsample."""
    from .datasets import subsample

    if dataset.n < 1:
        raise ValueError("cannot score an empty dataset")
    ds = dataset if dataset.n <= eval_samples else subsample(dataset, eval_samples, seed)
    flat = ds.images.reshape(ds.n, -1)
    root = SeededRng(seed).stream("score")
    values = np.empty(ds.n)
    for i in range(ds.n):
        values[i] = llr_score(params, flat[i:i + 1], k, K, root.child(i))
    return ScoreSeries(label=label, dataset=ds.name, k=k, k_importance=K,
                       values=values, seed=seed)


def per_input_rng(seed: int, index: int) -> SeededRng:
    """The rng score_batch uses for one input; exposed so callers can verify."""
    return SeededRng(seed).stream("score").child(index)


def _mi_values(params: HvaeParams, x_row: np.ndarray, layer: int, S: int,
               rng: SeededRng) -> np.ndarray:
    """S Monte Carlo values of [term1 - term2 - term3] for one input.

    term1: log p(x | path) + log p(z_layer | path) with z_layer from the
    posterior chain and every other latent from its top-down prior.
    term2: ELBO estimate of log p(x).  term3: prior log-density of the drawn
    z_layer (the same conditional prior used in term1, so the two prior
    terms cancel exactly).
    """
    config = params.config
    depth = config.depth
    tiled = Tensor(np.tile(x_row, (S, 1)))

    joint = rng.stream("joint")
    rq = joint.stream("posterior")
    rp = joint.stream("prior")
    qs = _infer_chain(params, tiled, rq, layer)
    z_target = qs[layer - 1].z
    zs: dict[int, Tensor] = {}
    log_prior_target = None
    for i in range(depth, 0, -1):
        mu_p, ls_p = _prior_params(params, i, zs, S)
        if i == layer:
            zs[i] = z_target
            log_prior_target = gaussian_logp(z_target, mu_p, ls_p).data
        else:
            zs[i] = gauss_sample(mu_p, ls_p, rp)
    loglik = _obs_logp(_observation(params, zs), tiled).data
    term1 = loglik + log_prior_target

    recon, kls = _mixed_parts(params, tiled, rng.stream("marginal"), depth)
    term2 = recon.data - sum(k.data for k in kls)

    term3 = log_prior_target
    return term1 - term2 - term3


def mi_estimate(params: HvaeParams, dataset: Dataset, layer: int, S: int,
                rng: SeededRng) -> MiEstimate:
    """Monte Carlo estimate of the mutual information between input and z_layer."""
    depth = params.config.depth
    if not (1 <= layer <= depth):
        raise ValueError(f"layer must lie in [1, {depth}], got {layer}")
    if S < 1:
        raise ValueError(f"samples per input must be >= 1, got {S}")
    flat = dataset.images.reshape(dataset.n, -1)
    values = np.empty((dataset.n, S))
    for i in range(dataset.n):
        values[i] = _mi_values(params, flat[i:i + 1], layer, S, rng.child(i))
    count = values.size
    std_error = float(values.std(ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    return MiEstimate(layer=layer, mean=float(values.mean()), std_error=std_error,
                      samples_per_input=S, inputs_used=dataset.n)
