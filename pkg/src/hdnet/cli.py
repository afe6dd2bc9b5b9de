"""``hdnet`` command line: gen-data, train, eval, grad-check, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (non-finite loss or failed gradient check), 5 refused to overwrite.
Set HDNET_WORKERS to fan data generation and ablation runs out over processes.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .metrics import (RootPrediction, evaluate, read_predictions, select_columns, write_metrics_csv,
                      write_predictions)
from .skeleton import Skeleton

log = logging.getLogger("hdnet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_REFUSED = 5

SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    """Missing, malformed or incompatible dataset / checkpoint."""


class RefusedError(RuntimeError):
    """Output exists and --force was not given."""


# ----------------------------------------------------------------------------
# helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None and args.command != "gen-data":
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig, default_sub: str = "") -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(cfg.out_dir) / default_sub if default_sub else Path(cfg.out_dir)


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise RefusedError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _load_split(split_dir: Path, cfg: ExperimentConfig):
    from .synth import load_split, read_manifest

    try:
        manifest = read_manifest(split_dir)
        scenes = load_split(split_dir)
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise DataError(f"cannot load dataset split {split_dir}: {e}") from None
    skel = Skeleton.from_dict(manifest["gen_config"]["skeleton"])
    if skel != cfg.gen.skeleton:
        raise DataError(f"{split_dir}: dataset skeleton differs from the configured skeleton")
    return scenes


def _check_skeleton(model_skel: Skeleton, split_dir: Path) -> None:
    from .synth import read_manifest

    try:
        manifest = read_manifest(split_dir)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from None
    data_skel = Skeleton.from_dict(manifest["gen_config"]["skeleton"])
    if data_skel != model_skel:
        raise DataError(f"skeleton mismatch: checkpoint has {model_skel.joint_names}, "
                        f"dataset {split_dir} has {data_skel.joint_names}")


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# ----------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    from .synth import export_split

    cfg = _config(args)
    out = _out_dir(args, cfg, "data")
    splits = SPLITS if args.split == "all" else (args.split,)
    d = cfg.data
    for split in splits:
        count = args.count if args.count is not None else getattr(d, f"{split}_count")
        seed = args.seed if args.seed is not None else getattr(d, f"{split}_seed")
        target = out / split
        _prepare_dir(target, args.force)
        export_split(target, cfg.gen, count, seed, cfg.model.bin_config, split,
                     {"experiment_config_hash": cfg.hash(), "code_version": __version__, "split_seed": seed})
        log.info("wrote %d scenes to %s (seed %d)", count, target, seed)
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def _person_sets(cfg: ExperimentConfig, data_dir: Path, need_val: bool = True):
    from .training import build_person_set

    train_scenes = _load_split(data_dir / "train", cfg)
    train_set = build_person_set(train_scenes, cfg.model, cfg.data.sigma)
    val_set = None
    if need_val and (data_dir / "val").exists():
        val_set = build_person_set(_load_split(data_dir / "val", cfg), cfg.model, cfg.data.sigma)
        if len(val_set) > cfg.data.val_max_persons:
            val_set = val_set.subset(np.arange(cfg.data.val_max_persons))
    return train_set, val_set


def cmd_train(args) -> int:
    from .plots import training_curves
    from .training import train

    cfg = _config(args)
    out = _out_dir(args, cfg, "train")
    data_dir = Path(args.data) if args.data else Path(cfg.out_dir) / "data"
    if args.resume is None:
        _prepare_dir(out, args.force)
    train_set, val_set = _person_sets(cfg, data_dir)
    (out / "config.json").write_text(cfg.dumps())
    log.info("training %s on %d persons (config %s)", cfg.model.variant, len(train_set), cfg.hash())
    result = train(cfg, train_set, val_set, out, resume=args.resume, steps=args.steps,
                   stop_at=args.stop_at, log_fn=log.info)
    training_curves(out / "train_log.csv", out / "training_curves.svg")
    log.info("done in %.1fs; best validation median relative error %.4f at step %d",
             result.seconds, result.state.best["val_median_rel"], result.state.best["step"])
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval


def _oracle_predictions(scenes, root_index: int) -> dict[int, list[RootPrediction]]:
    return {i: [RootPrediction(p.pose3d[root_index], 1.0, p.pose3d) for p in sc.persons]
            for i, sc in enumerate(scenes)}


def model_predictions(model, scenes, sigma: float, root_index: int) -> dict[int, list[RootPrediction]]:
    from .training import build_person_set, infer, predictions_from_outputs

    data = build_person_set(scenes, model.cfg, sigma)
    return predictions_from_outputs(infer(model, data), data, root_index, model.cfg.heatmap_stride)


def evaluate_scenes(preds, scenes, root_index: int, match: str = "greedy"):
    from .training import ground_truth

    gts, poses, seqs = ground_truth(scenes, root_index)
    return evaluate(preds, gts, poses, seqs, mode=match, root_index=root_index)


def cmd_eval(args) -> int:
    from .training import load_checkpoint

    cfg = _config(args)
    split_dir = Path(args.data) if args.data else Path(cfg.out_dir) / "data" / "test"
    root = cfg.gen.skeleton.root_index
    if args.checkpoint:
        try:
            ck = load_checkpoint(args.checkpoint)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot load checkpoint {args.checkpoint}: {e}") from None
        _check_skeleton(ck.skeleton, split_dir)
        cfg = replace(cfg, gen=replace(cfg.gen, skeleton=ck.skeleton))
        scenes = _load_split(split_dir, cfg)
        preds = model_predictions(ck.model, scenes, cfg.data.sigma, ck.skeleton.root_index)
        root = ck.skeleton.root_index
        variant, source = ck.model.cfg.variant, str(args.checkpoint)
    else:
        scenes = _load_split(split_dir, cfg)
        if args.predictions:
            try:
                preds = read_predictions(args.predictions)
            except (OSError, ValueError) as e:
                raise DataError(str(e)) from None
            variant, source = "predictions", str(args.predictions)
        else:
            preds = _oracle_predictions(scenes, root)
            variant, source = "oracle", "ground-truth"
    if args.write_predictions:
        write_predictions(args.write_predictions, preds)
    results = evaluate_scenes(preds, scenes, root, args.match)
    groups = [g for g in args.metrics.split(",") if g] if args.metrics else None
    try:
        rows = [{"variant": variant, "sequence": seq, **select_columns(r, groups)} for seq, r in results.items()]
    except ValueError as e:
        raise ConfigError(f"--metrics: {e}") from None
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, rows)
    for r in rows:
        log.info("  ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
    log.info("source %s; metrics written to %s", source, out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# grad-check


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    base = args.seed if args.seed is not None else 0
    results = run_suite(seeds=range(base, base + args.num_seeds), tolerance=args.tolerance)
    width = max(len(r.name) for r in results)
    for r in results:
        log.info(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  coords={r.coords:5d}  "
                 f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({
            "tolerance": args.tolerance, "seeds": list(range(base, base + args.num_seeds)),
            "checks": [vars(r) for r in results], "failed": failed}, indent=2))
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return EXIT_NUMERIC
    log.info("all %d checks passed", len(results))
    return EXIT_OK


# ----------------------------------------------------------------------------
# ablate


SUMMARY_METRICS = ("depth_mean_rel", "depth_median_rel", "mrpe", "mrpe_z", "ap_250", "ap_150", "pck_abs")


def _ablate_run(job):
    """Train and evaluate one (variant, seed); never raises for divergence."""
    from .training import NumericalError, train

    cfg, train_set, val_set, test_scenes, run_dir = job
    row = {"variant": cfg.model.variant, "seed": cfg.seed, "config_hash": cfg.hash(),
           "steps": cfg.optim.steps, "diverged": False}
    try:
        res = train(cfg, train_set, val_set, run_dir, log_fn=None)
    except NumericalError as e:
        row["diverged"] = True
        row["error"] = str(e)
        return row
    preds = model_predictions(res.model, test_scenes, cfg.data.sigma, cfg.gen.skeleton.root_index)
    metrics = evaluate_scenes(preds, test_scenes, cfg.gen.skeleton.root_index)["all"]
    if not all(math.isfinite(metrics[k]) for k in ("depth_mean_rel", "mrpe")):
        row["diverged"] = True
    row["seconds"] = round(res.seconds, 1)
    row.update(metrics)
    return row


def summarize(rows: list[dict], variants) -> list[dict]:
    out = []
    for v in variants:
        runs = [r for r in rows if r["variant"] == v]
        ok = [r for r in runs if not r["diverged"]]
        s = {"variant": v, "runs": len(runs), "diverged": len(runs) - len(ok)}
        for m in SUMMARY_METRICS:
            vals = np.array([r[m] for r in ok if m in r], dtype=np.float64)
            s[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
            s[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0 if vals.size else float("nan")
        out.append(s)
    return out


def run_ablation(cfg: ExperimentConfig, train_set, val_set, test_scenes, out: Path,
                 variants=None, seeds=None, steps=None) -> tuple[list[dict], list[dict]]:
    from .synth import worker_count

    variants = tuple(variants or cfg.ablate.variants)
    seeds = tuple(seeds if seeds is not None else cfg.ablate.seeds)
    n_steps = steps or cfg.ablate.steps or cfg.optim.steps
    jobs = []
    for v in variants:
        for s in seeds:
            run_cfg = replace(cfg, seed=s, model=cfg.model.with_variant(v), optim=replace(cfg.optim, steps=n_steps))
            jobs.append((run_cfg, train_set, val_set, test_scenes, out / "runs" / f"{v}-seed{s}"))
    rows: list[dict] = []
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        from multiprocessing import Pool
        with Pool(min(workers, len(jobs))) as pool:
            rows = pool.map(_ablate_run, jobs, chunksize=1)
    else:
        for job in jobs:
            row = _ablate_run(job)
            rows.append(row)
            log.info("%s seed %d: %s", row["variant"], row["seed"],
                     "DIVERGED" if row["diverged"] else
                     f"depth_mean_rel={row['depth_mean_rel']:.4f} mrpe_z={row['mrpe_z']:.1f}")
            write_metrics_csv(out / "ablation_runs.csv", rows)
    write_metrics_csv(out / "ablation_runs.csv", rows)
    summary = summarize(rows, variants)
    write_metrics_csv(out / "ablation_summary.csv", summary)
    return rows, summary


def cmd_ablate(args) -> int:
    from .plots import ablation_bars
    from .training import build_person_set

    cfg = _config(args)
    out = _out_dir(args, cfg, "ablate")
    _prepare_dir(out, args.force)
    data_dir = Path(args.data) if args.data else Path(cfg.out_dir) / "data"
    train_set, val_set = _person_sets(cfg, data_dir)
    test_scenes = _load_split(data_dir / "test", cfg)
    build_person_set(test_scenes[:1], cfg.model)  # fail early on an unusable test split
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    variants = args.variants.split(",") if args.variants else None
    try:
        cfg = replace(cfg, ablate=replace(cfg.ablate, variants=tuple(variants or cfg.ablate.variants)))
    except ValueError as e:
        raise ConfigError(f"--variants: {e}") from None
    (out / "config.json").write_text(cfg.dumps())
    _, summary = run_ablation(cfg, train_set, val_set, test_scenes, out, variants, seeds, args.steps)
    ablation_bars(out / "ablation_summary.csv", out / "ablation.svg")
    for s in summary:
        log.info("%-18s depth_mean_rel %.4f +- %.4f  mrpe_z %.1f  ap_250 %.3f  diverged %d",
                 s["variant"], s["depth_mean_rel_mean"], s["depth_mean_rel_std"], s["mrpe_z_mean"],
                 s["ap_250_mean"], s["diverged"])
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_help="experiment seed override"):
        sp.add_argument("--config", help="experiment TOML (default: packaged desk config)")
        sp.add_argument("--seed", type=int, help=seed_help)
        sp.add_argument("--out", help="output path")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("-q", "--quiet", action="store_true")

    g = sub.add_parser("gen-data", help="render synthetic dataset splits")
    common(g, "split seed override")
    g.add_argument("--split", choices=SPLITS + ("all",), default="all")
    g.add_argument("--count", type=int, help="scene count override")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", help="dataset root holding train/ and val/")
    t.add_argument("--steps", type=int, help="schedule length override")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-at", type=int, help="halt after this step without changing the schedule")

    e = sub.add_parser("eval", help="compute MRPE / AP / AR / 3DPCK on a split")
    common(e)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="prediction JSON lines")
    src.add_argument("--oracle", action="store_true", help="use ground truth as predictions")
    e.add_argument("--data", help="split directory (default: <out_dir>/data/test)")
    e.add_argument("--metrics", help="comma-separated subset of depth,mrpe,ap,ar,pck")
    e.add_argument("--match", choices=("greedy", "optimal"), default="greedy")
    e.add_argument("--write-predictions", help="also dump predictions as JSON lines")

    c = sub.add_parser("grad-check", help="finite-difference check of every primitive and the objective")
    common(c, "first seed")
    c.add_argument("--num-seeds", type=int, default=1)
    c.add_argument("--tolerance", type=float, default=1e-4)

    a = sub.add_parser("ablate", help="train and compare the five variants over several seeds")
    common(a)
    a.add_argument("--data", help="dataset root holding train/, val/ and test/")
    a.add_argument("--steps", type=int)
    a.add_argument("--seeds", help="comma-separated seeds")
    a.add_argument("--variants", help="comma-separated variants")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "grad-check": cmd_grad_check, "ablate": cmd_ablate}


def main(argv=None) -> int:
    from .training import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except RefusedError as e:
        log.error("refused: %s", e)
        return EXIT_REFUSED


if __name__ == "__main__":
    sys.exit(main())
