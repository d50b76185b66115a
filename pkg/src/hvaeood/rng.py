"""Deterministic random number generation with named, independent streams.

Built on numpy's PCG64, whose output for a given seed sequence is stable
across platforms and numpy versions.  Streams are derived from a root seed
plus a key path, so changing how many draws one consumer makes never
perturbs another consumer's sequence.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import ShapeError, Tensor, add, exp, mul

ALGORITHM = "pcg64"

_STREAM_TAG = 1
_CHILD_TAG = 2


def _name_words(name: str) -> tuple[int, int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return (int.from_bytes(digest[:4], "big"), int.from_bytes(digest[4:8], "big"))


class SeededRng:
    """A PCG64 generator addressed by (seed, key path).

    Identical seed and call sequence give identical outputs.  Derived
    generators (:meth:`stream`, :meth:`child`) are statistically independent
    and reconstructible from the same address.
    """

    algorithm = ALGORITHM

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=self.key))
        )

    def stream(self, name: str) -> "SeededRng":
        """Independent generator for a named consumer (e.g. "init", "noise")."""
        w1, w2 = _name_words(name)
        return SeededRng(self.seed, self.key + (_STREAM_TAG, w1, w2))

    def child(self, index: int) -> "SeededRng":
        """Independent generator for one item of an indexed collection."""
        if index < 0:
            raise ValueError("child index must be non-negative")
        return SeededRng(self.seed, self.key + (_CHILD_TAG, index))

    def state(self) -> dict:
        return {"algorithm": self.algorithm, "seed": self.seed, "key": list(self.key)}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        if state.get("algorithm") != ALGORITHM:
            raise ValueError(f"unknown rng algorithm: {state.get('algorithm')!r}")
        return cls(state["seed"], tuple(state["key"]))

    # draw methods ---------------------------------------------------------

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)


def gauss_sample(mu: Tensor, log_sigma: Tensor, rng: SeededRng) -> Tensor:
    """Reparameterized draw mu + exp(log_sigma) * eps, eps ~ N(0, I).

    Differentiable through mu and log_sigma; the noise is a constant of the
    surrounding trace.
    """
    if mu.shape != log_sigma.shape:
        raise ShapeError(f"gauss_sample: mu shape {mu.shape} != log_sigma shape {log_sigma.shape}")
    eps = rng.standard_normal(mu.shape)
    return add(mu, mul(exp(log_sigma), Tensor(eps)))
