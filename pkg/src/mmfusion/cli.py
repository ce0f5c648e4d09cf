"""Command-line entry point: ``mmfusion <verb> --config c.json --out DIR``.

Verbs run as a pipeline over one output directory::

    generate  synthetic config -> manifest.csv + volumes/
    split     -> splits.json
    train     -> checkpoints/<job>.ckpt + <job>_history.csv
    evaluate  -> results/fold_results.csv
    attribute -> attribution/attribution.csv + *_axial.pgm
    report    -> report.md + report.csv

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Timestamps only ever go to ``<verb>.log``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .backbone import ConfigError
from .checkpoint import checkpoint_bytes, load_checkpoint
from .config import ExperimentConfig
from .data import generate_synthetic, load_dataset, load_splits, save_splits, stratified_split, write_dataset
from .data.synthetic import SyntheticConfig
from .evaluation import ExperimentReport, Job, evaluate_job, plan_jobs, train_job
from .report import fold_results_csv, read_fold_results, render_markdown, render_tables_csv

log = logging.getLogger("mmfusion")


class UsageError(Exception):
    pass


def _setup_log(out: Path, verb: str) -> None:
    handler = logging.FileHandler(out / f"{verb}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    for h in list(root.handlers):
        if isinstance(h, logging.FileHandler):
            root.removeHandler(h)
            h.close()
    root.addHandler(handler)
    root.setLevel(logging.INFO)


def _experiment(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required")
    return ExperimentConfig.from_json(args.config).with_seed(args.seed)


def _load_data(cfg: ExperimentConfig):
    if cfg["data"]["manifest"] is not None:
        return load_dataset(cfg.manifest_path)
    return generate_synthetic(cfg.synthetic_config())


def _splits(cfg: ExperimentConfig, out: Path):
    path = out / "splits.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run 'split' first")
    return {p.fold: p for p in load_splits(path)}


def _jobs(cfg: ExperimentConfig, plans) -> list[Job]:
    return plan_jobs(cfg.spec(), sorted(plans))


# --------------------------------------------------------------------------- verbs


def cmd_generate(args, out: Path) -> None:
    if not args.config:
        raise UsageError("--config is required")
    import json

    try:
        doc = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("synthetic config must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SyntheticConfig.from_dict(doc)
    records, volumes = generate_synthetic(cfg)
    with tempfile.TemporaryDirectory(dir=out, prefix=".generate-") as tmp:
        write_dataset(records, volumes, tmp)
        (Path(tmp) / "synthetic_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
        dest_vol = out / "volumes"
        dest_vol.mkdir(exist_ok=True)
        for f in sorted((Path(tmp) / "volumes").iterdir()):
            f.replace(dest_vol / f.name)
        for name in ("manifest.csv", "synthetic_config.json"):
            (Path(tmp) / name).replace(out / name)
    log.info("generated %d subjects with seed %d", len(records), cfg.seed)


def cmd_split(args, out: Path) -> None:
    cfg = _experiment(args)
    records, _ = _load_data(cfg)
    plans = stratified_split(records, cfg.seed, cfg.hp["folds"])
    save_splits(plans, out / "splits.json")
    log.info("wrote %d split plans (seed %d)", len(plans), cfg.seed)


def _train_one(payload):
    spec, job, records, volumes, plan = payload
    t0 = time.perf_counter()
    res = train_job(spec, job, records, volumes, plan)
    extra = {"job": job.name, "best_epoch": res.best_epoch, "epochs_run": res.epochs_run}
    return job, checkpoint_bytes(res.model, extra), res.history, time.perf_counter() - t0


def _write_history(history: list, path: Path) -> None:
    keys = sorted({k for row in history for k in row}, key=lambda k: (k != "epoch", k))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "") for k in keys])


def cmd_train(args, out: Path) -> None:
    cfg = _experiment(args)
    (out / "effective_config.json").write_text(cfg.dumps())
    records, volumes = _load_data(cfg)
    plans = _splits(cfg, out)
    spec = cfg.spec()
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    payloads = [(spec, job, records, volumes, plans[job.fold]) for job in _jobs(cfg, plans)]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.jobs) as pool:
            done = list(pool.map(_train_one, payloads))
    else:
        done = [_train_one(p) for p in payloads]
    for job, blob, history, seconds in done:
        (ckpt_dir / f"{job.name}.ckpt").write_bytes(blob)
        _write_history(history, ckpt_dir / f"{job.name}_history.csv")
        log.info("trained %s in %.1fs", job.name, seconds)


def cmd_evaluate(args, out: Path) -> None:
    cfg = _experiment(args)
    records, volumes = _load_data(cfg)
    plans = _splits(cfg, out)
    spec = cfg.spec()
    results = []
    for job in _jobs(cfg, plans):
        path = out / "checkpoints" / f"{job.name}.ckpt"
        if not path.is_file():
            raise FileNotFoundError(f"missing checkpoint {path}; run 'train' first")
        model, extra = load_checkpoint(path)
        folds = evaluate_job(spec, job, model, records, volumes, plans[job.fold],
                             extra.get("epochs_run", 0), extra.get("best_epoch", 0))
        for f in folds:
            log.info("%s %s bacc=%.4f (%.2fs)", job.name, f.test_scheme, f.bacc, f.wall_time)
        results.extend(folds)
    (out / "results").mkdir(exist_ok=True)
    (out / "results" / "fold_results.csv").write_text(fold_results_csv(results))


def cmd_attribute(args, out: Path) -> None:
    from .attribution import attribute_subjects, correct_in_class, export_axial_slice, mean_abs_map, \
        write_attribution_csv
    from .data.records import records_for_task

    cfg = _experiment(args)
    a = cfg["attribution"]
    records, volumes = _load_data(cfg)
    plans = _splits(cfg, out)
    job = Job(a["task"], a["strategy"], a["train_scheme"], a["fold"])
    path = out / "checkpoints" / f"{job.name}.ckpt"
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint {path}; run 'train' first")
    model, _ = load_checkpoint(path)
    test_ids = set(plans[job.fold].test)
    subjects = [r for r in records_for_task(records, job.task) if r.subject_id in test_ids]
    results = attribute_subjects(model, subjects, volumes, job.task, a["steps"], cfg.attribution_dtype)
    dest = out / "attribution"
    dest.mkdir(exist_ok=True)
    write_attribution_csv(results, dest / "attribution.csv")
    for r in results:
        hi = max(np.abs(r.pet).max(), np.abs(r.mri).max())
        for m, arr in r.maps().items():
            export_axial_slice(np.abs(arr), dest / f"{r.subject_id}_{m}_axial.pgm", vmin=0.0, vmax=hi)
    signal = a["signal_class"] if a["signal_class"] is not None else job.task - 1
    try:
        means = mean_abs_map(results, correct_in_class(signal))
    except ValueError as exc:
        log.warning("no mean map: %s", exc)
        return
    hi = max(v.max() for v in means.values())
    for m, arr in means.items():
        export_axial_slice(arr, dest / f"mean_{m}_axial.pgm", vmin=0.0, vmax=hi)


def cmd_report(args, out: Path) -> None:
    path = out / "results" / "fold_results.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run 'evaluate' first")
    report = ExperimentReport(read_fold_results(path.read_text()))
    (out / "report.md").write_text(render_markdown(report))
    (out / "report.csv").write_text(render_tables_csv(report))


COMMANDS = {
    "generate": cmd_generate,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attribute": cmd_attribute,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"mmfusion: error: usage: {message}\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmfusion", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config (synthetic config for 'generate')")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel training jobs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    if not out.is_dir():
        sys.stderr.write(f"mmfusion {args.verb}: error: usage: output directory {out} does not exist\n")
        return 2
    _setup_log(out, args.verb)
    try:
        COMMANDS[args.verb](args, out)
    except (ConfigError, UsageError) as exc:
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"mmfusion {args.verb}: error: config: {msg}\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("failed")
        msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        sys.stderr.write(f"mmfusion {args.verb}: error: runtime: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
