"""JSON run and sweep configurations with a strict, published schema.

Unknown keys anywhere in a config are hard errors, so hyperparameter typos
fail loudly instead of silently using defaults.  Dataset references resolve
IDX paths against the ``HVAEOOD_DATA_ROOT`` environment variable (or the
config file's directory when unset).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .alloc import AllocationPlan, ControlPlan, allocate, find_control
from .datasets import Dataset, load_idx, synth
from .hvae import HvaeConfig, TrainHyper
from .likelihoods import DecoderKind

DATA_ROOT_ENV = "HVAEOOD_DATA_ROOT"


class ConfigError(ValueError):
    """Raised for malformed configuration files."""


def _require_keys(section: dict, known: set[str], required: set[str], where: str) -> None:
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)} (known: {sorted(known)})")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"{where}: missing required keys {sorted(missing)}")


@dataclass(frozen=True)
class EvalSettings:
    k_llr: int
    k_importance: int = 1000
    eval_samples: int = 10000
    levels: tuple[float, float] = (0.80, 0.95)


@dataclass(frozen=True)
class RunConfig:
    name: str
    plan: AllocationPlan | ControlPlan
    model: HvaeConfig
    hyper: TrainHyper
    seed: int
    eval: EvalSettings
    id_ref: dict
    ood_refs: tuple[dict, ...]
    base_dir: Path = field(default_factory=Path)


def _parse_allocation(section: dict) -> AllocationPlan | ControlPlan:
    keys = set(section)
    if keys == {"budget", "depth", "ratio"}:
        return allocate(int(section["budget"]), int(section["depth"]), float(section["ratio"]))
    if keys == {"dims"}:
        dims = tuple(int(d) for d in section["dims"])
        return ControlPlan(name="explicit", dims=dims)
    if keys == {"control"}:
        ref = section["control"]
        if ":" not in ref:
            raise ConfigError(f"allocation.control must be 'scale:name', got {ref!r}")
        scale, name = ref.split(":", 1)
        return find_control(scale, name)
    raise ConfigError(
        "allocation must be exactly one of {budget,depth,ratio} | {dims} | {control}, "
        f"got keys {sorted(keys)}")


def _parse_decoder(section: dict, where: str) -> tuple[DecoderKind, bool]:
    _require_keys(section, {"kind", "k", "global_sigma"}, {"kind"}, where)
    kind = DecoderKind(section["kind"], int(section.get("k", 1)))
    return kind, bool(section.get("global_sigma", False))


def _parse_dataset_ref(ref: dict, where: str) -> dict:
    _require_keys(ref, {"synthetic", "idx"}, set(), where)
    if len(ref) != 1:
        raise ConfigError(f"{where}: dataset ref needs exactly one of 'synthetic' | 'idx'")
    if "synthetic" in ref:
        _require_keys(ref["synthetic"], {"generator", "n", "shape", "seed", "name"},
                      {"generator", "n", "shape", "seed"}, f"{where}.synthetic")
    else:
        _require_keys(ref["idx"], {"images", "labels", "name"}, {"images"}, f"{where}.idx")
    return ref


def parse_run_config(doc: dict, base_dir: Path) -> RunConfig:
    _require_keys(doc, {"name", "allocation", "model", "train", "eval", "data"},
                  {"allocation", "model", "train", "data"}, "config")
    plan = _parse_allocation(doc["allocation"])

    model = doc["model"]
    _require_keys(model, {"input_shape", "hidden_width", "decoder", "activation"},
                  {"input_shape", "decoder"}, "model")
    decoder, global_sigma = _parse_decoder(model["decoder"], "model.decoder")

    tr = doc["train"]
    _require_keys(tr, {"lr", "batch", "epochs", "free_bits", "seed",
                       "beta1", "beta2", "eps"}, {"epochs", "seed"}, "train")
    free_bits = float(tr.get("free_bits", 2.0))
    hyper = TrainHyper(
        lr=float(tr.get("lr", 3e-4)),
        batch=int(tr.get("batch", 128)),
        epochs=int(tr["epochs"]),
        beta1=float(tr.get("beta1", 0.9)),
        beta2=float(tr.get("beta2", 0.999)),
        eps=float(tr.get("eps", 1e-8)),
        free_bits=free_bits,
    )
    seed = int(tr["seed"])

    hvae_config = HvaeConfig(
        layer_dims=tuple(plan.dims),
        input_shape=tuple(int(d) for d in model["input_shape"]),
        hidden_width=int(model.get("hidden_width", 128)),
        decoder=decoder,
        free_bits=free_bits,
        seed=seed,
        activation=model.get("activation", "tanh"),
        global_sigma=global_sigma,
    )

    ev = doc.get("eval", {})
    _require_keys(ev, {"k_llr", "k_importance", "eval_samples", "levels"}, set(), "eval")
    levels = tuple(float(v) for v in ev.get("levels", (0.80, 0.95)))
    if levels != (0.80, 0.95):
        raise ConfigError(f"eval.levels is fixed at [0.8, 0.95] in this report schema, got {levels}")
    eval_settings = EvalSettings(
        k_llr=int(ev.get("k_llr", hvae_config.depth - 1)),
        k_importance=int(ev.get("k_importance", 1000)),
        eval_samples=int(ev.get("eval_samples", 10000)),
        levels=levels,
    )
    if not (0 <= eval_settings.k_llr <= hvae_config.depth):
        raise ConfigError(f"eval.k_llr {eval_settings.k_llr} out of range "
                          f"[0, {hvae_config.depth}]")
    if eval_settings.eval_samples < 1:
        raise ConfigError("eval.eval_samples must be >= 1")

    data = doc["data"]
    _require_keys(data, {"id", "ood"}, {"id", "ood"}, "data")
    id_ref = _parse_dataset_ref(data["id"], "data.id")
    ood_list = data["ood"] if isinstance(data["ood"], list) else [data["ood"]]
    if not ood_list:
        raise ConfigError("data.ood must name at least one dataset")
    ood_refs = tuple(_parse_dataset_ref(r, f"data.ood[{i}]") for i, r in enumerate(ood_list))

    name = doc.get("name") or plan.label
    return RunConfig(name=name, plan=plan, model=hvae_config, hyper=hyper, seed=seed,
                     eval=eval_settings, id_ref=id_ref, ood_refs=ood_refs, base_dir=base_dir)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return parse_run_config(doc, path.parent)


def data_root(base_dir: Path) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else base_dir


def resolve_dataset(ref: dict, base_dir: Path) -> Dataset:
    if "synthetic" in ref:
        s = ref["synthetic"]
        return synth(s["generator"], tuple(s["shape"]), int(s["n"]), int(s["seed"]),
                     name=s.get("name"))
    s = ref["idx"]
    root = data_root(base_dir)
    images = Path(s["images"])
    if not images.is_absolute():
        images = root / images
    labels = s.get("labels")
    if labels is not None and not Path(labels).is_absolute():
        labels = root / labels
    return load_idx(images, labels, name=s.get("name"))


@dataclass(frozen=True)
class SweepConfig:
    budget: int
    depth: int
    grid: tuple[float, ...]
    controls: str | None
    seeds: int
    base: dict  # model/train/eval/data sections shared by every cell
    base_dir: Path


def load_sweep_config(path) -> SweepConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    _require_keys(doc, {"budget", "depth", "grid", "controls", "seeds",
                        "model", "train", "eval", "data"},
                  {"budget", "depth", "grid", "model", "train", "data"}, "sweep")
    grid = tuple(float(r) for r in doc["grid"])
    if not grid:
        raise ConfigError("sweep.grid must be non-empty")
    controls = doc.get("controls")
    if controls is not None and controls not in ("grayscale", "natural"):
        raise ConfigError(f"sweep.controls must be 'grayscale' | 'natural' | null, got {controls!r}")
    seeds = int(doc.get("seeds", 3))
    if seeds < 1:
        raise ConfigError("sweep.seeds must be >= 1")
    base = {k: doc[k] for k in ("model", "train", "eval", "data") if k in doc}
    return SweepConfig(budget=int(doc["budget"]), depth=int(doc["depth"]), grid=grid,
                       controls=controls, seeds=seeds, base=base, base_dir=path.parent)


def cell_run_config(sweep: SweepConfig, plan: AllocationPlan | ControlPlan,
                    seed: int) -> RunConfig:
    """Run config for one sweep cell (one plan, one seed replicate)."""
    doc = {
        "allocation": {"dims": list(plan.dims)},
        "model": dict(sweep.base["model"]),
        "train": dict(sweep.base["train"]),
        "eval": dict(sweep.base.get("eval", {})),
        "data": sweep.base["data"],
        "name": plan.label,
    }
    doc["train"]["seed"] = seed
    run = parse_run_config(doc, sweep.base_dir)
    return run
