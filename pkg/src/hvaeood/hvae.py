"""Ladder hierarchical VAE over flattened inputs.

Inference runs bottom-up with skip connections from two levels below
(x feeds z_2's block, z_1 feeds z_3's, ...); generation runs top-down with a
standard-normal prior on the top latent and learned Gaussian conditionals
below, mirrored skips included.  All deterministic blocks are one-hidden-layer
MLPs; the observation model is one of the kernels in :mod:`likelihoods`.

Evaluation bounds support a mixed sampling path where only some latents come
from the posterior: ``elbo_gt_k`` keeps the bottom k (prior above, its KL
terms vanish), ``reconstruct_gt_k`` keeps the top k.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import likelihoods as lk
from .likelihoods import DecoderKind
from .rng import SeededRng, gauss_sample
from .tensor import (
    ShapeError,
    Tensor,
    Trace,
    _sigmoid_array,
    add,
    backward,
    concat,
    exp,
    matmul,
    maximum,
    mul,
    reshape,
    slice_along,
    sub,
    tanh,
    tmean,
    tracing,
    tsum,
)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class HvaeConfig:
    """Structural and training-relevant model configuration.

    ``layer_dims[0]`` is z_1, the bottom (largest) latent.
    """

    layer_dims: tuple[int, ...]
    input_shape: tuple[int, int, int]
    hidden_width: int = 128
    decoder: DecoderKind = field(default_factory=lambda: DecoderKind("bernoulli"))
    free_bits: float = 2.0
    seed: int = 0
    activation: str = "tanh"  # tanh | identity
    global_sigma: bool = False  # gaussian decoder: log_sigma as a free parameter

    def __post_init__(self):
        if len(self.layer_dims) < 1 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"layer_dims must be positive, got {self.layer_dims}")
        if self.hidden_width < 1:
            raise ValueError(f"hidden_width must be positive, got {self.hidden_width}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.free_bits < 0:
            raise ValueError("free_bits must be non-negative")
        if self.global_sigma and self.decoder.tag != "gaussian":
            raise ValueError("global_sigma only applies to the gaussian decoder")

    @property
    def depth(self) -> int:
        return len(self.layer_dims)

    @property
    def input_dim(self) -> int:
        h, w, c = self.input_shape
        return h * w * c

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "input_shape": list(self.input_shape),
            "hidden_width": self.hidden_width,
            "decoder": {"kind": self.decoder.tag, "k": self.decoder.k},
            "free_bits": self.free_bits,
            "seed": self.seed,
            "activation": self.activation,
            "global_sigma": self.global_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HvaeConfig":
        return cls(
            layer_dims=tuple(d["layer_dims"]),
            input_shape=tuple(d["input_shape"]),
            hidden_width=d["hidden_width"],
            decoder=DecoderKind(d["decoder"]["kind"], d["decoder"].get("k", 1)),
            free_bits=d["free_bits"],
            seed=d["seed"],
            activation=d["activation"],
            global_sigma=d["global_sigma"],
        )


class HvaeParams:
    """Named parameter tensors plus the config that shapes them."""

    def __init__(self, config: HvaeConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self.tensors.items()]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name not in self.tensors:
            raise KeyError(f"unknown parameter {name!r}")
        if self.tensors[name].shape != value.shape:
            raise ShapeError(f"parameter {name!r} has shape {self.tensors[name].shape}, "
                             f"got {value.shape}")
        self.tensors[name] = value


@dataclass(frozen=True)
class ElboTerms:
    """Batch-mean bound decomposition plus per-example values.

    ``elbo == recon - sum(kl_per_layer)``; ``objective`` applies the free-bits
    floor per layer and equals ``elbo`` when the floor is zero or unused.
    """

    recon: float
    kl_per_layer: tuple[float, ...]
    elbo: float
    objective: float
    recon_per_example: np.ndarray
    kl_per_example: np.ndarray  # (L, n)

    @property
    def elbo_per_example(self) -> np.ndarray:
        return self.recon_per_example - self.kl_per_example.sum(axis=0)


@dataclass(frozen=True)
class LatentPosterior:
    mu: Tensor
    log_sigma: Tensor
    z: Tensor


@dataclass
class TrainHyper:
    """Adam + objective settings (defaults follow the standard recipe)."""

    lr: float = 3e-4
    batch: int = 128
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    free_bits: float | None = None  # None: use the model config's value


# ---------------------------------------------------------------------------
# construction


def _encoder_in_dim(config: HvaeConfig, i: int) -> int:
    dims = config.layer_dims
    if i == 1:
        return config.input_dim
    if i == 2:
        return dims[0] + config.input_dim
    return dims[i - 2] + config.input_dim + dims[i - 3]


def _prior_in_dim(config: HvaeConfig, i: int) -> int:
    dims = config.layer_dims
    width = dims[i]  # z_{i+1}
    if i + 1 < config.depth:
        width += dims[i + 1]  # skip from z_{i+2}
    return width


def _obs_in_dim(config: HvaeConfig) -> int:
    dims = config.layer_dims
    return dims[0] + (dims[1] if config.depth >= 2 else 0)


def _obs_out_dim(config: HvaeConfig) -> int:
    per_pixel = config.decoder.params_per_pixel
    if config.decoder.tag == "gaussian" and config.global_sigma:
        per_pixel = 1
    return config.input_dim * per_pixel


def _block_specs(config: HvaeConfig) -> list[tuple[str, int, int]]:
    """(prefix, in_dim, out_dim) for every MLP block, in parameter order."""
    specs = [(f"enc{i}", _encoder_in_dim(config, i), 2 * config.layer_dims[i - 1])
             for i in range(1, config.depth + 1)]
    specs += [(f"prior{i}", _prior_in_dim(config, i), 2 * config.layer_dims[i - 1])
              for i in range(1, config.depth)]
    specs.append(("obs", _obs_in_dim(config), _obs_out_dim(config)))
    return specs


def manifest_for(config: HvaeConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name/shape pairs of every parameter, without initializing any."""
    out: list[tuple[str, tuple[int, ...]]] = []
    hid = config.hidden_width
    for prefix, in_dim, out_dim in _block_specs(config):
        out += [(f"{prefix}.w0", (in_dim, hid)), (f"{prefix}.b0", (hid,)),
                (f"{prefix}.w1", (hid, out_dim)), (f"{prefix}.b1", (out_dim,))]
    if config.decoder.tag == "gaussian" and config.global_sigma:
        out.append(("obs.log_sigma", (config.input_dim,)))
    return out


def build(config: HvaeConfig, rng: SeededRng | None = None) -> HvaeParams:
    """Initialize all weights (fan-in scaled uniform, zero biases)."""
    if rng is None:
        rng = SeededRng(config.seed).stream("init")
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in manifest_for(config):
        if name.split(".")[1].startswith("w"):
            lim = math.sqrt(6.0 / sum(shape))
            tensors[name] = Tensor(rng.uniform(-lim, lim, shape))
        else:
            tensors[name] = Tensor(np.zeros(shape))
    return HvaeParams(config, tensors)


# ---------------------------------------------------------------------------
# forward passes


def _as_batch(config: HvaeConfig, x) -> Tensor:
    if isinstance(x, Tensor):
        data = x.data
    else:
        data = np.asarray(x, dtype=np.float64)
    if data.ndim == 4:
        data = data.reshape(data.shape[0], -1)
    if data.ndim != 2 or data.shape[1] != config.input_dim:
        raise ShapeError(f"input shape {data.shape} does not match "
                         f"(n, {config.input_dim}) for input_shape {config.input_shape}")
    return x if isinstance(x, Tensor) and x.data is data else Tensor(data)


def _block(params: HvaeParams, prefix: str, inputs: Sequence[Tensor]) -> Tensor:
    x = inputs[0] if len(inputs) == 1 else concat(list(inputs), axis=1)
    h = add(matmul(x, params[f"{prefix}.w0"]), params[f"{prefix}.b0"])
    if params.config.activation == "tanh":
        h = tanh(h)
    return add(matmul(h, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])


def _split_heads(out: Tensor, width: int) -> tuple[Tensor, Tensor]:
    return slice_along(out, 1, 0, width), slice_along(out, 1, width, 2 * width)


def _infer_chain(params: HvaeParams, x: Tensor, rng: SeededRng,
                 up_to: int) -> list[LatentPosterior]:
    """Bottom-up posterior chain q(z_1|x), q(z_2|z_1,x), q(z_i|z_{i-1},x,z_{i-2}).

    Every block above the first sees the input features directly; the skip
    term carries the latent from two levels below.
    """
    config = params.config
    out: list[LatentPosterior] = []
    for i in range(1, up_to + 1):
        if i == 1:
            inputs = [x]
        elif i == 2:
            inputs = [out[0].z, x]
        else:
            inputs = [out[i - 2].z, x, out[i - 3].z]
        mu, ls = _split_heads(_block(params, f"enc{i}", inputs), config.layer_dims[i - 1])
        z = gauss_sample(mu, ls, rng)
        out.append(LatentPosterior(mu, ls, z))
    return out


def infer(params: HvaeParams, x, rng: SeededRng) -> list[LatentPosterior]:
    """Per-layer posterior parameters and reparameterized samples."""
    xt = _as_batch(params.config, x)
    return _infer_chain(params, xt, rng.stream("posterior"), params.config.depth)


def _prior_params(params: HvaeParams, i: int, zs: dict[int, Tensor],
                  batch: int) -> tuple[Tensor, Tensor]:
    """Top-down prior for layer i given already-decided upper latents."""
    config = params.config
    width = config.layer_dims[i - 1]
    if i == config.depth:
        zero = Tensor(np.zeros((batch, width)))
        return zero, zero
    inputs = [zs[i + 1]]
    if i + 2 <= config.depth:
        inputs.append(zs[i + 2])
    return _split_heads(_block(params, f"prior{i}", inputs), width)


def _observation(params: HvaeParams, zs: dict[int, Tensor]) -> dict:
    """Decoder parameter tensors from the bottom latents (z_1 plus z_2 skip)."""
    config = params.config
    inputs = [zs[1]]
    if config.depth >= 2:
        inputs.append(zs[2])
    out = _block(params, "obs", inputs)
    d = config.input_dim
    kind = config.decoder.tag
    if kind == "bernoulli":
        return {"kind": kind, "logits": out}
    if kind == "gaussian":
        if config.global_sigma:
            batch = out.shape[0]
            ls = add(reshape(params["obs.log_sigma"], (1, d)), Tensor(np.zeros((batch, d))))
            return {"kind": kind, "mu": out, "log_sigma": ls}
        mu, ls = _split_heads(out, d)
        return {"kind": kind, "mu": mu, "log_sigma": ls}
    if kind == "logistic":
        mu, ls = _split_heads(out, d)
        return {"kind": kind, "mu": mu, "log_s": ls}
    k = config.decoder.k
    grid = reshape(out, (out.shape[0], d, 3 * k))
    return {
        "kind": kind,
        "mix_logits": slice_along(grid, 2, 0, k),
        "mus": slice_along(grid, 2, k, 2 * k),
        "log_ss": slice_along(grid, 2, 2 * k, 3 * k),
    }


def _obs_logp(obs: dict, x: Tensor) -> Tensor:
    kind = obs["kind"]
    if kind == "bernoulli":
        return lk.bernoulli_logp(x, obs["logits"])
    if kind == "gaussian":
        return lk.gaussian_logp(x, obs["mu"], obs["log_sigma"])
    if kind == "logistic":
        return lk.logistic_logp(x, obs["mu"], obs["log_s"])
    return lk.mixture_logistic_logp(x, obs["mix_logits"], obs["mus"], obs["log_ss"])


def decoder_mean(obs: dict) -> np.ndarray:
    kind = obs["kind"]
    if kind == "bernoulli":
        return _sigmoid_array(obs["logits"].data)
    if kind in ("gaussian", "logistic"):
        return obs["mu"].data
    logits = obs["mix_logits"].data
    pis = np.exp(logits - logits.max(axis=2, keepdims=True))
    pis /= pis.sum(axis=2, keepdims=True)
    return (pis * obs["mus"].data).sum(axis=2)


def _gauss_kl(mu_q: Tensor, ls_q: Tensor, mu_p: Tensor, ls_p: Tensor) -> Tensor:
    """Analytic per-example KL between diagonal Gaussians; always >= 0."""
    dl = sub(ls_q, ls_p)
    var_ratio = exp(mul(Tensor(2.0), dl))
    t = mul(sub(mu_q, mu_p), exp(-ls_p))
    per_dim = sub(mul(Tensor(0.5), add(var_ratio, mul(t, t))),
                  add(dl, Tensor(0.5)))
    return tsum(per_dim, axis=1)


def _mixed_parts(params: HvaeParams, x: Tensor, rng: SeededRng,
                 keep_below: int) -> tuple[Tensor, list[Tensor]]:
    """Per-example recon and per-layer analytic KLs with a mixed sampling path.

    Layers 1..keep_below take posterior samples; layers above come from the
    top-down prior, contributing zero KL.  The posterior noise stream is
    consumed identically for any keep_below, so keep_below == depth
    reproduces the plain bound bit for bit under a shared rng.
    """
    config = params.config
    depth = config.depth
    rq = rng.stream("posterior")
    rp = rng.stream("prior")
    qs = _infer_chain(params, x, rq, keep_below)

    zs: dict[int, Tensor] = {}
    kls: list[Tensor] = [None] * depth  # type: ignore[list-item]
    batch = x.shape[0]
    zero_kl = Tensor(np.zeros(batch))
    for i in range(depth, 0, -1):
        mu_p, ls_p = _prior_params(params, i, zs, batch)
        if i <= keep_below:
            q = qs[i - 1]
            zs[i] = q.z
            kls[i - 1] = _gauss_kl(q.mu, q.log_sigma, mu_p, ls_p)
        else:
            zs[i] = gauss_sample(mu_p, ls_p, rp)
            kls[i - 1] = zero_kl
    recon = _obs_logp(_observation(params, zs), x)
    return recon, kls


def _terms_from_parts(recon: Tensor, kls: list[Tensor], free_bits: float,
                      use_free_bits: bool) -> ElboTerms:
    recon_pe = recon.data.copy()
    kl_pe = np.stack([k.data for k in kls], axis=0)
    recon_mean = float(recon_pe.mean())
    kl_means = tuple(float(k.mean()) for k in kl_pe)
    elbo_val = recon_mean - sum(kl_means)
    if use_free_bits:
        objective = recon_mean - sum(max(k, free_bits) for k in kl_means)
    else:
        objective = elbo_val
    return ElboTerms(recon=recon_mean, kl_per_layer=kl_means, elbo=elbo_val,
                     objective=objective, recon_per_example=recon_pe,
                     kl_per_example=kl_pe)


def elbo(params: HvaeParams, x, rng: SeededRng, use_free_bits: bool = False) -> ElboTerms:
    """Single-sample ELBO with analytic per-layer KLs."""
    xt = _as_batch(params.config, x)
    recon, kls = _mixed_parts(params, xt, rng, params.config.depth)
    return _terms_from_parts(recon, kls, params.config.free_bits, use_free_bits)


def elbo_gt_k(params: HvaeParams, x, k: int, rng: SeededRng) -> ElboTerms:
    """Bound with only the bottom k latents from the posterior.

    Layers above k are sampled from the top-down prior and contribute zero
    KL; k == depth reproduces :func:`elbo` exactly under shared draws.
    """
    _check_k(params.config, k)
    xt = _as_batch(params.config, x)
    recon, kls = _mixed_parts(params, xt, rng, k)
    return _terms_from_parts(recon, kls, params.config.free_bits, False)


def _check_k(config: HvaeConfig, k: int) -> None:
    if not (0 <= k <= config.depth):
        raise ValueError(f"k must lie in [0, {config.depth}], got {k}")


def _iwae_weights(params: HvaeParams, x: Tensor, K: int, rng: SeededRng,
                  keep_below: int) -> np.ndarray:
    """(K, n) importance log-weights for the mixed bound.

    Weight = log p(x|z) + sum_{i<=keep_below} [log p(z_i|pa) - log q(z_i|.)];
    prior-sampled layers cancel out of the weight exactly.
    """
    config = params.config
    depth = config.depth
    n = x.shape[0]
    tiled = Tensor(np.tile(x.data, (K, 1)))
    rq = rng.stream("posterior")
    rp = rng.stream("prior")
    qs = _infer_chain(params, tiled, rq, keep_below)

    zs: dict[int, Tensor] = {}
    ratio = Tensor(np.zeros(K * n))
    for i in range(depth, 0, -1):
        mu_p, ls_p = _prior_params(params, i, zs, K * n)
        if i <= keep_below:
            q = qs[i - 1]
            zs[i] = q.z
            log_p = lk.gaussian_logp(q.z, mu_p, ls_p)
            log_q = lk.gaussian_logp(q.z, q.mu, q.log_sigma)
            ratio = add(ratio, sub(log_p, log_q))
        else:
            zs[i] = gauss_sample(mu_p, ls_p, rp)
    recon = _obs_logp(_observation(params, zs), tiled)
    return add(recon, ratio).data.reshape(K, n)


def _log_mean_exp(w: np.ndarray, axis: int = 0) -> np.ndarray:
    m = w.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (np.log(np.exp(w - m).mean(axis=axis)) + m.squeeze(axis)).astype(np.float64)


def iwae_bound(params: HvaeParams, x, K: int, rng: SeededRng) -> np.ndarray:
    """Per-example K-sample importance-weighted bound on log p(x)."""
    if K < 1:
        raise ValueError(f"importance sample count must be >= 1, got {K}")
    xt = _as_batch(params.config, x)
    w = _iwae_weights(params, xt, K, rng, params.config.depth)
    return _log_mean_exp(w, axis=0)


def iwae_bound_gt_k(params: HvaeParams, x, k: int, K: int, rng: SeededRng) -> np.ndarray:
    """Importance-weighted version of the bottom-k mixed bound."""
    if K < 1:
        raise ValueError(f"importance sample count must be >= 1, got {K}")
    _check_k(params.config, k)
    xt = _as_batch(params.config, x)
    w = _iwae_weights(params, xt, K, rng, k)
    return _log_mean_exp(w, axis=0)


def reconstruct_gt_k(params: HvaeParams, x, k: int, rng: SeededRng) -> np.ndarray:
    """Decoder mean with only the top k latents inferred from the posterior.

    The bottom-up chain always runs fully (upper posteriors condition on the
    lower ones); latents outside the kept top block are then resampled from
    the top-down prior.  k == depth is ordinary reconstruction.
    """
    _check_k(params.config, k)
    config = params.config
    depth = config.depth
    xt = _as_batch(config, x)
    rq = rng.stream("posterior")
    rp = rng.stream("prior")
    qs = _infer_chain(params, xt, rq, depth)

    keep_from = depth - k + 1  # layers >= keep_from stay posterior
    zs: dict[int, Tensor] = {}
    batch = xt.shape[0]
    for i in range(depth, 0, -1):
        if i >= keep_from:
            zs[i] = qs[i - 1].z
        else:
            mu_p, ls_p = _prior_params(params, i, zs, batch)
            zs[i] = gauss_sample(mu_p, ls_p, rp)
    mean = decoder_mean(_observation(params, zs))
    n = mean.shape[0]
    return mean.reshape((n,) + tuple(config.input_shape))


# ---------------------------------------------------------------------------
# training


class _Adam:
    def __init__(self, names, shapes, hyper: TrainHyper):
        self.hyper = hyper
        self.t = 0
        self.m = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s) for n, s in zip(names, shapes)}

    def step(self, params: HvaeParams, grads: dict[str, np.ndarray]) -> None:
        h = self.hyper
        self.t += 1
        bc1 = 1.0 - h.beta1 ** self.t
        bc2 = 1.0 - h.beta2 ** self.t
        for name, g in grads.items():
            self.m[name] = h.beta1 * self.m[name] + (1.0 - h.beta1) * g
            self.v[name] = h.beta2 * self.v[name] + (1.0 - h.beta2) * g * g
            update = h.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + h.eps)
            params.tensors[name] = Tensor(params.tensors[name].data - update)


def _loss_terms(params: HvaeParams, x: Tensor, rng: SeededRng, free_bits: float):
    """Traced negative free-bits ELBO over a batch, plus reporting floats."""
    recon, kls = _mixed_parts(params, x, rng, params.config.depth)
    recon_mean = tmean(recon)
    kl_means = [tmean(k) for k in kls]
    floored = [maximum(k, free_bits) for k in kl_means] if free_bits > 0 else kl_means
    total_kl = floored[0]
    for k in floored[1:]:
        total_kl = add(total_kl, k)
    loss = sub(total_kl, recon_mean)
    return loss, float(recon_mean.data), [float(k.data) for k in kl_means]


def train(params: HvaeParams, dataset, hyper: TrainHyper,
          rng: SeededRng) -> tuple[HvaeParams, list[dict]]:
    """Adam on the negative free-bits ELBO; deterministic given the rng address.

    ``dataset`` is a :class:`hvaeood.datasets.Dataset` of raw [0,1] images;
    preprocessing for the configured decoder is re-seeded every epoch.
    History records the per-epoch mean raw ELBO and per-layer KLs.
    """
    from .datasets import preprocess

    config = params.config
    n = dataset.images.shape[0]
    if n < 1:
        raise ValueError("training dataset is empty")
    free_bits = config.free_bits if hyper.free_bits is None else hyper.free_bits
    opt = _Adam([name for name, _ in params.manifest()],
                [shape for _, shape in params.manifest()], hyper)
    noise = rng.stream("noise")
    history: list[dict] = []
    step = 0
    for epoch in range(hyper.epochs):
        prepped = preprocess(dataset, config.decoder, rng.stream("preprocess").child(epoch))
        flat = prepped.images.reshape(n, -1)
        order = rng.stream("shuffle").child(epoch).permutation(n)
        epoch_recon, epoch_kls, batches = 0.0, np.zeros(config.depth), 0
        for start in range(0, n, hyper.batch):
            xb = Tensor(flat[order[start:start + hyper.batch]])
            trace = Trace()
            with tracing(trace):
                trace.watch(*params.tensors.values())
                loss, recon_f, kl_f = _loss_terms(params, xb, noise.child(step), free_bits)
            if not np.isfinite(loss.data):
                bad = "recon" if not np.isfinite(recon_f) else \
                    f"kl[{int(np.argmin(np.isfinite(kl_f)))}]"
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: offending term {bad}")
            grads = backward(trace, loss)
            named = {name: grads[t] for name, t in params.tensors.items()}
            opt.step(params, named)
            epoch_recon += recon_f
            epoch_kls += np.asarray(kl_f)
            batches += 1
            step += 1
        mean_kls = (epoch_kls / batches).tolist()
        history.append({
            "epoch": epoch,
            "elbo": epoch_recon / batches - sum(mean_kls),
            "recon": epoch_recon / batches,
            "kl": mean_kls,
        })
    return params, history
