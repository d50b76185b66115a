"""Command-line interface: allocate | train | eval | sweep | mi | recon.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Reports are
emitted as both CSV and JSON with identical fields; float formatting uses
shortest round-trip repr so reruns reproduce files byte for byte.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

import numpy as np

from .alloc import allocate, argmax_smallest, control_plans, find_control
from .checkpoint import CheckpointError, file_sha256, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    SweepConfig,
    cell_run_config,
    load_run_config,
    load_sweep_config,
    resolve_dataset,
)
from .datasets import IdxFormatError, preprocess, subsample
from .hvae import TrainingDiverged, build, reconstruct_gt_k, train
from .metrics import summary
from .rng import SeededRng
from .scoring import mi_estimate, score_batch

EVAL_FIELDS = ("config", "ood", "auroc", "auprc", "fpr80", "fpr95",
               "mean", "n_id", "n_ood", "seed")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_lines(fields, rows) -> list[str]:
    lines = [",".join(fields)]
    lines += [",".join(_fmt(row[f]) for f in fields) for row in rows]
    return lines


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# core flows shared by subcommands and the sweep


def train_run(run: RunConfig):
    """Build and train one model per its run config; deterministic in the seed."""
    root = SeededRng(run.seed)
    params = build(run.model, root.stream("init"))
    dataset = resolve_dataset(run.id_ref, run.base_dir)
    params, history = train(params, dataset, run.hyper, root.stream("train"))
    return params, history, root.state()


def evaluate_run(params, run: RunConfig) -> list[dict]:
    """Score the ID set against every OOD set; one report row per pairing."""
    root = SeededRng(run.seed)
    ev = run.eval
    id_ds = resolve_dataset(run.id_ref, run.base_dir)
    id_prep = preprocess(id_ds, params.config.decoder, root.stream("eval-preprocess").child(0))
    id_series = score_batch(params, id_prep, ev.k_llr, ev.k_importance, seed=run.seed,
                            label="id", eval_samples=ev.eval_samples)
    rows = []
    for j, ref in enumerate(run.ood_refs):
        ood_ds = resolve_dataset(ref, run.base_dir)
        ood_prep = preprocess(ood_ds, params.config.decoder,
                              root.stream("eval-preprocess").child(j + 1))
        ood_series = score_batch(params, ood_prep, ev.k_llr, ev.k_importance, seed=run.seed,
                                 label="ood", eval_samples=ev.eval_samples)
        rep = summary(id_series.values, ood_series.values)
        rows.append({
            "config": run.name, "ood": ood_prep.name,
            "auroc": rep.auroc, "auprc": rep.auprc,
            "fpr80": rep.fpr80, "fpr95": rep.fpr95,
            "mean": rep.normalized_mean,
            "n_id": rep.n_id, "n_ood": rep.n_ood, "seed": run.seed,
        })
    return rows


def _check_checkpoint_matches(params, run: RunConfig) -> None:
    if tuple(params.config.layer_dims) != tuple(run.plan.dims):
        raise CheckpointError(
            f"checkpoint layers {params.config.layer_dims} do not match "
            f"config allocation {tuple(run.plan.dims)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_allocate(args) -> int:
    if args.control:
        if ":" not in args.control:
            raise ConfigError("--control must be 'scale:name', e.g. grayscale:Stable")
        scale, name = args.control.split(":", 1)
        plan = find_control(scale, name)
        record = {"control": plan.name, "scale": scale, "dims": list(plan.dims),
                  "budget": plan.budget, "depth": plan.depth}
    else:
        if args.budget is None or args.depth is None or args.ratio is None:
            raise ConfigError("allocate needs --budget, --depth and --ratio (or --control)")
        plan = allocate(args.budget, args.depth, args.ratio)
        record = {"budget": plan.budget, "depth": plan.depth, "ratio": plan.ratio,
                  "dims": list(plan.dims)}
    print(" ".join(str(d) for d in plan.dims))
    line = json.dumps(record, sort_keys=True)
    print(line)
    if args.out:
        _write_text(args.out, line + "\n")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    params, history, rng_state = train_run(run)
    log_lines = [json.dumps({"epoch": h["epoch"], "elbo": h["elbo"], "kl": h["kl"]})
                 for h in history]
    for line in log_lines:
        print(line)
    if args.log:
        _write_text(args.log, "\n".join(log_lines) + ("\n" if log_lines else ""))
    save_checkpoint(args.out, params, rng_state=rng_state, epoch=run.hyper.epochs,
                    extra={"run_name": run.name, "seed": run.seed})
    print(f"checkpoint written: {args.out}")
    return 0


def cmd_eval(args) -> int:
    run = load_run_config(args.config)
    if args.k is not None or args.importance is not None:
        from dataclasses import replace

        ev = run.eval
        ev = replace(ev, k_llr=args.k if args.k is not None else ev.k_llr,
                     k_importance=args.importance if args.importance is not None
                     else ev.k_importance)
        run = replace(run, eval=ev)
    params, _ = load_checkpoint(args.checkpoint)
    _check_checkpoint_matches(params, run)
    rows = evaluate_run(params, run)
    lines = _csv_lines(EVAL_FIELDS, rows)
    for line in lines:
        print(line)
    _write_text(str(args.out_prefix) + ".csv", "\n".join(lines) + "\n")
    _write_text(str(args.out_prefix) + ".json", json.dumps(rows, indent=2) + "\n")
    return 0


def _sweep_plans(sweep: SweepConfig):
    plans = []
    for r in sweep.grid:
        plan = allocate(sweep.budget, sweep.depth, r)
        plans.append((plan.label, plan.dims, r))
    if sweep.controls:
        for c in control_plans(sweep.controls):
            plans.append((c.label, c.dims, None))
    return plans


def _sweep_cell(sweep: SweepConfig, label: str, dims: tuple[int, ...],
                seed: int, out_dir: str) -> list[dict]:
    from .alloc import ControlPlan

    run = cell_run_config(sweep, ControlPlan(label, tuple(dims)), seed)
    ckpt = Path(out_dir) / "checkpoints" / f"{label}-seed{seed}.ckpt"
    if not ckpt.exists():
        params, _, rng_state = train_run(run)
        save_checkpoint(ckpt, params, rng_state=rng_state, epoch=run.hyper.epochs,
                        extra={"run_name": run.name, "seed": seed})
    params, _ = load_checkpoint(ckpt)
    return evaluate_run(params, run)


def cmd_sweep(args) -> int:
    sweep = load_sweep_config(args.config)
    out_dir = Path(args.out_dir)
    plans = _sweep_plans(sweep)
    base_seed = int(sweep.base["train"]["seed"])
    cells = [(label, dims, ratio, base_seed + rep)
             for (label, dims, ratio) in plans for rep in range(sweep.seeds)]

    results: dict[tuple[str, int], list[dict]] = {}
    failures: list[str] = []
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futs = {pool.submit(_sweep_cell, sweep, label, dims, seed, str(out_dir)):
                    (label, seed) for (label, dims, ratio, seed) in cells}
            for fut, key in futs.items():
                try:
                    results[key] = fut.result()
                except Exception as e:  # cell isolation: record and continue
                    failures.append(f"{key[0]} seed {key[1]}: {e}")
    else:
        for label, dims, ratio, seed in cells:
            try:
                results[(label, seed)] = _sweep_cell(sweep, label, dims, seed, str(out_dir))
            except Exception as e:
                failures.append(f"{label} seed {seed}: {e}")

    ood_names: list[str] = []
    for rows in results.values():
        for row in rows:
            if row["ood"] not in ood_names:
                ood_names.append(row["ood"])

    metric_keys = ("auroc", "auprc", "fpr80", "fpr95", "mean")
    heat_rows = []
    ratio_means: dict[float, float] = {}
    detail = []
    for label, dims, ratio, _ in [c for i, c in enumerate(cells) if i % sweep.seeds == 0]:
        seed_rows = [results[(label, s)] for s in range(base_seed, base_seed + sweep.seeds)
                     if (label, s) in results]
        if not seed_rows:
            continue
        row: dict = {"config": label}
        per_ood = {}
        for ood in ood_names:
            cells_for = [r for rows in seed_rows for r in rows if r["ood"] == ood]
            if not cells_for:
                continue
            agg = {m: float(np.mean([r[m] for r in cells_for])) for m in metric_keys}
            std = {m: float(np.std([r[m] for r in cells_for])) for m in metric_keys}
            per_ood[ood] = {"mean": agg, "std": std, "seeds": len(cells_for)}
            for m in metric_keys:
                row[f"{ood}:{m}"] = agg[m]
        present = [per_ood[o]["mean"]["mean"] for o in ood_names if o in per_ood]
        row["mean"] = float(np.mean(present))
        heat_rows.append(row)
        detail.append({"config": label, "ratio": ratio, "per_ood": per_ood,
                       "mean": row["mean"]})
        if ratio is not None:
            ratio_means[ratio] = row["mean"]

    fields = ["config"] + [f"{o}:{m}" for o in ood_names for m in metric_keys] + ["mean"]
    complete = [r for r in heat_rows if all(f in r for f in fields)]
    lines = _csv_lines(fields, complete)
    for line in lines:
        print(line)
    _write_text(out_dir / "heatmap.csv", "\n".join(lines) + "\n")
    _write_text(out_dir / "heatmap.json", json.dumps(detail, indent=2) + "\n")

    if ratio_means:
        r_star = argmax_smallest(ratio_means)
        record = {"r_star": r_star,
                  "values": {repr(r): v for r, v in sorted(ratio_means.items())}}
        _write_text(out_dir / "rstar.json", json.dumps(record, indent=2) + "\n")
        print(f"r_star {r_star!r}")

    if failures:
        for f in failures:
            print(f"sweep cell failed: {f}", file=sys.stderr)
        return 1
    return 0


def cmd_mi(args) -> int:
    run = load_run_config(args.config)
    params, _ = load_checkpoint(args.checkpoint)
    _check_checkpoint_matches(params, run)
    if not (1 <= args.layer <= params.config.depth):
        print(f"error: --layer must lie in [1, {params.config.depth}], got {args.layer}",
              file=sys.stderr)
        return 2
    root = SeededRng(run.seed)
    ds = resolve_dataset(run.id_ref, run.base_dir)
    if ds.n > args.inputs:
        ds = subsample(ds, args.inputs, seed=run.seed)
    prep = preprocess(ds, params.config.decoder, root.stream("mi-preprocess"))
    est = mi_estimate(params, prep, args.layer, args.samples, root.stream("mi"))
    record = {
        "layer": est.layer, "mean": est.mean, "std_error": est.std_error,
        "samples_per_input": est.samples_per_input, "inputs_used": est.inputs_used,
        "seed": run.seed, "checkpoint_sha256": file_sha256(args.checkpoint),
    }
    line = json.dumps(record, sort_keys=True)
    print(line)
    if args.out:
        _write_text(args.out, line + "\n")
    return 0


def cmd_recon(args) -> int:
    run = load_run_config(args.config)
    params, _ = load_checkpoint(args.checkpoint)
    _check_checkpoint_matches(params, run)
    if not (0 <= args.k <= params.config.depth):
        print(f"error: --k must lie in [0, {params.config.depth}], got {args.k}",
              file=sys.stderr)
        return 2
    root = SeededRng(run.seed)
    ds = resolve_dataset(run.id_ref, run.base_dir)
    if ds.n > args.n:
        ds = subsample(ds, args.n, seed=run.seed)
    prep = preprocess(ds, params.config.decoder, root.stream("recon-preprocess"))
    recon = reconstruct_gt_k(params, prep.images, args.k, root.stream("recon"))
    mse = float(np.mean((recon - prep.images) ** 2))
    np.savez(args.out, originals=prep.images, reconstructions=recon, k=args.k)
    print(f"k={args.k} n={prep.n} mse={mse!r} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvaeood",
                                     description="Latent allocation, HVAE training and "
                                                 "likelihood-ratio OOD evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("allocate", help="compute an allocation plan")
    p.add_argument("--budget", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--control", type=str, help="named control plan, scale:name")
    p.add_argument("--out", type=str, help="write the JSON plan record here")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", type=str, help="write JSONL training log here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score ID vs OOD sets and emit metric reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--k", type=int, help="override eval.k_llr")
    p.add_argument("--importance", type=int, help="override eval.k_importance")
    p.add_argument("--out-prefix", default="eval", help="basename for .csv/.json reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate a ratio grid plus controls")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mi", help="estimate latent mutual information")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--samples", type=int, default=8, help="draws per input")
    p.add_argument("--inputs", type=int, default=512, help="max inputs used")
    p.add_argument("--out", type=str)
    p.set_defaults(func=cmd_mi)

    p = sub.add_parser("recon", help="reconstructions keeping only the top k latents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=int, default=16, help="number of inputs")
    p.add_argument("--out", default="recon.npz")
    p.set_defaults(func=cmd_recon)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, IdxFormatError, TrainingDiverged,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
