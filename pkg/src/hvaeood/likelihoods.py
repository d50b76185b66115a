"""Log-density kernels for the decoder families and the unit-Gaussian prior.

Every kernel takes per-pixel parameter tensors of shape (batch, D) (or
(batch, D, K) for mixtures), sums over pixels and returns a per-example
tensor of shape (batch,).  All kernels are differentiable through their
parameters and numerically stable for logits up to +-500.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DomainError,
    ShapeError,
    Tensor,
    add,
    exp,
    logsumexp,
    mul,
    softplus,
    sub,
    tsum,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DecoderKind:
    """Which observation model the decoder parameterizes."""

    tag: str  # bernoulli | gaussian | logistic | mixture_logistic
    k: int = 1  # mixture components; 1 for non-mixtures

    VALID = ("bernoulli", "gaussian", "logistic", "mixture_logistic")

    def __post_init__(self):
        if self.tag not in self.VALID:
            raise ValueError(f"unknown decoder kind {self.tag!r}; expected one of {self.VALID}")
        if self.k < 1:
            raise ValueError(f"mixture needs at least 1 component, got {self.k}")

    @property
    def params_per_pixel(self) -> int:
        if self.tag == "bernoulli":
            return 1
        if self.tag in ("gaussian", "logistic"):
            return 2
        return 3 * self.k  # mixture: weight logit, mu, log_s per component


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _sum_non_batch(t: Tensor) -> Tensor:
    out = t
    for _ in range(t.ndim - 1):
        out = tsum(out, axis=out.ndim - 1)
    return out


def bernoulli_logp(x: Tensor, logits: Tensor) -> Tensor:
    """Per-example log-mass of binary x under independent Bernoulli pixels.

    Uses the stable logit form sum(x * f - softplus(f)).
    """
    _require_same_shape("bernoulli_logp", x, logits)
    vals = x.data
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise DomainError("bernoulli_logp: x has entries outside {0, 1}")
    per_pixel = sub(mul(x, logits), softplus(logits))
    return _sum_non_batch(per_pixel)


def gaussian_logp(x: Tensor, mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Per-example diagonal-Gaussian log-density."""
    _require_same_shape("gaussian_logp", x, mu)
    _require_same_shape("gaussian_logp", mu, log_sigma)
    z = mul(sub(x, mu), exp(-log_sigma))
    per_pixel = sub(Tensor(-0.5 * LOG_2PI) - log_sigma, mul(Tensor(0.5), mul(z, z)))
    return _sum_non_batch(per_pixel)


def _logistic_per_pixel(x: Tensor, mu: Tensor, log_s: Tensor) -> Tensor:
    # log[ e^u / (s (1 + e^u)^2) ] = u - log s - 2 softplus(u), u = (x - mu)/s
    u = mul(sub(x, mu), exp(-log_s))
    return sub(sub(u, log_s), mul(Tensor(2.0), softplus(u)))


def logistic_logp(x: Tensor, mu: Tensor, log_s: Tensor) -> Tensor:
    """Per-example logistic log-density (mode value 1/(4s))."""
    _require_same_shape("logistic_logp", x, mu)
    _require_same_shape("logistic_logp", mu, log_s)
    return _sum_non_batch(_logistic_per_pixel(x, mu, log_s))


def mixture_logistic_logp(x: Tensor, mix_logits: Tensor, mus: Tensor, log_ss: Tensor) -> Tensor:
    """Per-example log-density of a per-pixel mixture of K logistics.

    Component parameters have shape (batch, D, K); mixture weights come from
    normalizing mix_logits over the component axis.
    """
    if mus.shape != log_ss.shape or mus.shape != mix_logits.shape:
        raise ShapeError(
            f"mixture_logistic_logp: component shapes {mix_logits.shape}, {mus.shape}, "
            f"{log_ss.shape} differ")
    if mus.ndim != x.ndim + 1 or mus.shape[:-1] != x.shape:
        raise ShapeError(
            f"mixture_logistic_logp: components {mus.shape} do not extend x {x.shape} by K")
    k_axis = mus.ndim - 1
    xk = Tensor(np.expand_dims(x.data, axis=k_axis))
    comp = _logistic_per_pixel(xk, mus, log_ss)
    log_pi = sub(mix_logits, logsumexp_keep(mix_logits, axis=k_axis))
    per_pixel = logsumexp(add(log_pi, comp), axis=k_axis)
    return _sum_non_batch(per_pixel)


def logsumexp_keep(t: Tensor, axis: int) -> Tensor:
    """logsumexp along an axis, keeping the axis as size 1 for broadcasting."""
    from .tensor import reshape

    reduced = logsumexp(t, axis=axis)
    shape = list(reduced.shape)
    shape.insert(axis, 1)
    return reshape(reduced, tuple(shape))


def std_normal_logp(z: Tensor) -> Tensor:
    """Per-example log-density under the standard normal prior."""
    per_dim = sub(Tensor(-0.5 * LOG_2PI), mul(Tensor(0.5), mul(z, z)))
    return _sum_non_batch(per_dim)
