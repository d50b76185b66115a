"""Geometric latent-dimension allocation under a fixed budget.

Given a total latent budget ``b``, a hierarchy depth ``N`` and a compression
ratio ``r``, layer i receives ``b * (1 - r) * r**(i-1) / (1 - r**N)``
dimensions (equal split ``b / N`` in the r -> 1 limit).  Real-valued layer
sizes are quantized to positive integers that sum to the budget exactly,
and a grid search over ratios picks the one maximizing a user-supplied
per-layer utility function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence


@dataclass(frozen=True)
class AllocationPlan:
    """Integer per-layer dimensionalities for one (budget, depth, ratio)."""

    budget: int
    depth: int
    ratio: float
    dims: tuple[int, ...]

    def __post_init__(self):
        if sum(self.dims) != self.budget:
            raise ValueError(f"dims {self.dims} sum to {sum(self.dims)}, not budget {self.budget}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims {self.dims} contain a layer below 1")
        if len(self.dims) != self.depth:
            raise ValueError(f"expected {self.depth} layers, got {len(self.dims)}")

    @property
    def label(self) -> str:
        return "-".join(str(d) for d in self.dims)


@dataclass(frozen=True)
class ControlPlan:
    """A fixed, named layer layout used as a non-geometric baseline."""

    name: str
    dims: tuple[int, ...]

    @property
    def budget(self) -> int:
        return sum(self.dims)

    @property
    def depth(self) -> int:
        return len(self.dims)

    @property
    def label(self) -> str:
        return "-".join(str(d) for d in self.dims)


@dataclass
class EfficacyFunction:
    """Per-layer utility f(l) with its assumed bound and small-l floor.

    ``upper_bound`` and ``floor`` are carried as metadata for validation;
    they never alter ``eval``.
    """

    eval: Callable[[float], float]
    upper_bound: float = math.inf
    floor: float = 0.0


def _validate(b: int, n: int, r: float) -> None:
    if n < 1:
        raise ValueError(f"depth must be positive, got {n}")
    if b < n:
        raise ValueError(f"budget {b} cannot give each of {n} layers at least 1 dimension")
    if not (0.0 < r <= 1.0):
        raise ValueError(f"ratio must lie in (0, 1], got {r}")


def real_layer_dims(b: int, n: int, r: float) -> list[float]:
    """Real-valued geometric layer sizes; index 0 is the bottom (largest) layer.

    The values sum to ``b`` algebraically (finite geometric series identity).
    """
    _validate(b, n, r)
    if r == 1.0:
        return [b / n] * n
    scale = b * (1.0 - r) / (1.0 - r ** n)
    return [scale * r ** i for i in range(n)]


def quantize_dims(reals: Sequence[float], b: int) -> list[int]:
    """Round real layer sizes to positive integers summing exactly to ``b``.

    Largest-remainder apportionment: floor every value, clamp each layer to a
    minimum of 1, then hand out the remaining units one at a time in
    descending fractional-remainder order, breaking exact remainder ties in
    favor of the deeper layer.  If clamping overshot the budget, units are
    taken back from layers above 1 in ascending fractional-remainder order.
    """
    n = len(reals)
    if b < n:
        raise ValueError(f"budget {b} cannot give each of {n} layers at least 1 dimension")
    total = sum(reals)
    if abs(total - b) > 1e-9 * max(b, 1):
        raise ValueError(f"real dims sum to {total}, expected budget {b}")

    dims = [max(1, math.floor(x)) for x in reals]
    fracs = [x - math.floor(x) for x in reals]
    remaining = b - sum(dims)

    if remaining > 0:
        # ties go to the higher index, so sort by (-frac, -index)
        order = sorted(range(n), key=lambda i: (-fracs[i], -i))
        pos = 0
        while remaining > 0:
            dims[order[pos % n]] += 1
            remaining -= 1
            pos += 1
    elif remaining < 0:
        order = sorted(range(n), key=lambda i: (fracs[i], -i))
        pos = 0
        while remaining < 0:
            i = order[pos % n]
            pos += 1
            if dims[i] > 1:
                dims[i] -= 1
                remaining += 1
    return dims


def allocate(b: int, n: int, r: float) -> AllocationPlan:
    """Integer allocation plan for (budget, depth, ratio)."""
    dims = quantize_dims(real_layer_dims(b, n, r), b)
    return AllocationPlan(budget=b, depth=n, ratio=r, dims=tuple(dims))


def objective_value(b: int, n: int, r: float, f: EfficacyFunction) -> float:
    """Total utility sum_i f(l_i) over the real-valued layer sizes."""
    return sum(f.eval(l) for l in real_layer_dims(b, n, r))


def argmax_smallest(values: Mapping[float, float]) -> float:
    """Key with the maximal value; exact ties resolve to the smallest key."""
    if not values:
        raise ValueError("argmax over an empty map")
    return min(values, key=lambda r: (-values[r], r))


def grid_argmax_r(b: int, n: int, grid: Sequence[float],
                  f: EfficacyFunction) -> tuple[float, dict[float, float]]:
    """Grid point maximizing total utility, plus all evaluated values.

    Ties break toward the smaller ratio (more compression).
    """
    if not grid:
        raise ValueError("ratio grid must be non-empty")
    values = {float(r): objective_value(b, n, r, f) for r in grid}
    return argmax_smallest(values), values


_CONTROLS = {
    "grayscale": (
        ("Expand-then-Retain", (6, 13, 13)),
        ("Progressive Expansion", (8, 10, 14)),
        ("Expand-then-Compress", (8, 16, 8)),
        ("Stable Allocation", (10, 11, 11)),
        ("Compress-then-Expand", (13, 6, 13)),
    ),
    "natural": (
        ("Expand-then-Retain", (42, 91, 91)),
        ("Progressive Expansion", (56, 80, 98)),
        ("Expand-then-Compress", (56, 112, 56)),
        ("Stable Allocation", (70, 77, 77)),
        ("Compress-then-Expand", (91, 42, 91)),
    ),
}


def control_plans(scale: str) -> list[ControlPlan]:
    """The five named baseline layouts for a data scale ("grayscale" | "natural")."""
    if scale not in _CONTROLS:
        raise ValueError(f"unknown scale {scale!r}; expected one of {sorted(_CONTROLS)}")
    return [ControlPlan(name, dims) for name, dims in _CONTROLS[scale]]


def find_control(scale: str, name: str) -> ControlPlan:
    """Look up a control plan by exact or unique case-insensitive prefix match."""
    plans = control_plans(scale)
    for p in plans:
        if p.name == name:
            return p
    lowered = name.lower()
    matches = [p for p in plans if p.name.lower().startswith(lowered)]
    if len(matches) == 1:
        return matches[0]
    options = ", ".join(p.name for p in plans)
    raise ValueError(f"control name {name!r} is not a unique match among: {options}")
