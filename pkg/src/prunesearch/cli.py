"""Experiment CLI: pretrain-teacher, search, derive, transfer, eval, report.

Every run directory is self-describing: it gets the fully-resolved config,
per-phase checkpoints (which embed the config), result JSONs and the search
metrics CSV. A lock file serializes writers per directory.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ExperimentConfig,
    OUTPUT_ROOT_ENV,
    build_supernet_spec,
    config_hash,
    echo_config,
    load_config,
    resolve_output_dir,
    to_dict,
    _fill,
    validate,
)
from .cost import LayerCostTable, f_cost, max_arch
from .data import Dataset, load_cifar10, make_synthetic
from .distill import FitRun, KDSpec, evaluate_accuracy, build_student
from .distributions import DerivedArch
from .search import DivergenceError, SearchRun, METRICS_FIELDS, split_dataset
from .supernet import ConvNet, SuperNetSpec, derived_spec

LOCK_NAME = ".lock"


class CliError(RuntimeError):
    pass


class RunLock:
    """Exclusive per-directory lock file; refuses concurrent writers."""

    def __init__(self, directory: str):
        self.path = os.path.join(directory, LOCK_NAME)

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"run directory is locked by another process: {self.path}")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        if os.path.exists(self.path):
            os.remove(self.path)
        return False


def _dataset_geometry(cfg: ExperimentConfig) -> tuple[int, int, int]:
    """(channels, image size, classes) without touching the data files."""
    if cfg.dataset.kind == "synthetic":
        return cfg.dataset.channels, cfg.dataset.image_size, cfg.dataset.classes
    return 3, 32, 10


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        train_seed = int(np.random.SeedSequence([cfg.seed, 3]).generate_state(1)[0])
        test_seed = int(np.random.SeedSequence([cfg.seed, 4]).generate_state(1)[0])
        train = make_synthetic(ds.classes, ds.samples, ds.image_size, seed=train_seed,
                               channels=ds.channels, noise=ds.noise)
        test = make_synthetic(ds.classes, ds.test_samples, ds.image_size, seed=test_seed,
                              channels=ds.channels, noise=ds.noise)
        return train, test
    data_seed = int(np.random.SeedSequence([cfg.seed, 3]).generate_state(1)[0])
    return load_cifar10(ds.dir, ds.subset_size or None, data_seed,
                        ds.test_subset_size or None)


def _supernet_spec(cfg: ExperimentConfig) -> SuperNetSpec:
    channels, size, classes = _dataset_geometry(cfg)
    return build_supernet_spec(cfg, channels, size, classes)


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _fill(ExperimentConfig, raw, "")
    validate(cfg)
    return cfg


def _base_meta(cfg: ExperimentConfig, phase: str) -> dict:
    return {"phase": phase, "config": to_dict(cfg), "config_hash": config_hash(cfg),
            "seed": cfg.seed}


def _require_hash(meta: dict, cfg: ExperimentConfig, what: str) -> None:
    if meta.get("config_hash") != config_hash(cfg):
        raise CliError(
            f"{what} was produced under a different config "
            f"(hash {meta.get('config_hash')} != {config_hash(cfg)})")


def _load_net_from_checkpoint(meta: dict, arrays: dict) -> ConvNet:
    cfg = config_from_dict(meta["config"])
    spec = _supernet_spec(cfg)
    if meta["phase"] == "student":
        arch = DerivedArch(widths=meta["arch"]["widths"], depths=meta["arch"]["depths"])
        spec = derived_spec(spec, arch)
    net = ConvNet(spec, np.random.default_rng(0))
    for name, tensor in net.named_parameters().items():
        tensor.data = arrays[name].copy()
    net.load_buffers({k: arrays[k] for k in net.named_buffers()})
    return net


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


# -- subcommands --------------------------------------------------------------


def cmd_pretrain_teacher(cfg: ExperimentConfig, resume: bool) -> int:
    out = resolve_output_dir(cfg)
    with RunLock(out):
        echo_config(cfg, out)
        spec = _supernet_spec(cfg)
        train_ds, test_ds = load_datasets(cfg)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        net = ConvNet(spec, rng)
        run = FitRun(net, train_ds, cfg.train, rng)
        ckpt_path = os.path.join(out, "teacher.ckpt")
        if resume:
            meta, arrays = load_checkpoint(ckpt_path)
            _require_hash(meta, cfg, "teacher checkpoint")
            run.restore(meta["run"], arrays)

        def save(r: FitRun) -> None:
            run_meta, arrays = r.state()
            meta = _base_meta(cfg, "teacher")
            meta["run"] = run_meta
            save_checkpoint(ckpt_path, meta, arrays)

        run.run(on_epoch=save)
        accuracy = evaluate_accuracy(net, test_ds, cfg.train.batch_size)
        table = LayerCostTable(spec)
        flops = f_cost(max_arch(spec), table)
        run_meta, arrays = run.state()
        meta = _base_meta(cfg, "teacher")
        meta["run"] = run_meta
        meta["accuracy"] = accuracy
        save_checkpoint(ckpt_path, meta, arrays)
        _write_json(os.path.join(out, "teacher.result.json"),
                    {"accuracy": accuracy, "flops": flops, "epochs": run.epoch,
                     "seed": cfg.seed})
        print(f"teacher: accuracy={accuracy:.4f} flops={flops:.0f} -> {ckpt_path}")
    return 0


def _write_metrics_csv(path: str, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in metrics:
            writer.writerow(row)


def cmd_search(cfg: ExperimentConfig, teacher_path: str | None, resume: bool) -> int:
    out = resolve_output_dir(cfg)
    with RunLock(out):
        echo_config(cfg, out)
        spec = _supernet_spec(cfg)
        train_ds, _ = load_datasets(cfg)
        split_seed = int(np.random.SeedSequence([cfg.seed, 5]).generate_state(1)[0])
        d_train, d_val = split_dataset(train_ds, cfg.search.val_fraction, split_seed)

        init_arrays = None
        if teacher_path:
            tmeta, tarrays = load_checkpoint(teacher_path)
            _require_hash(tmeta, cfg, "teacher checkpoint")
            if tmeta["phase"] != "teacher":
                raise CliError(f"--teacher expects a teacher checkpoint, got {tmeta['phase']}")
            init_arrays = tarrays

        run = SearchRun(cfg, spec, d_train, d_val, seed=cfg.seed, init_arrays=init_arrays)
        ckpt_path = os.path.join(out, "search.ckpt")
        csv_path = os.path.join(out, "search.metrics.csv")
        if resume:
            meta, arrays = load_checkpoint(ckpt_path)
            _require_hash(meta, cfg, "search checkpoint")
            run.restore(meta["run"], arrays)

        def save(r: SearchRun) -> None:
            run_meta, arrays = r.state()
            meta = _base_meta(cfg, "search")
            meta["run"] = run_meta
            save_checkpoint(ckpt_path, meta, arrays)
            _write_metrics_csv(csv_path, r.metrics)

        result = run.run(on_epoch=save)
        ratio = result.arch.flops / result.max_flops
        record = {
            "widths": result.arch.widths,
            "depths": result.arch.depths,
            "flops": result.arch.flops,
            "max_flops": result.max_flops,
            "flops_ratio": ratio,
            "pruning_ratio": 1.0 - ratio,
            "seed": cfg.seed,
        }
        _write_json(os.path.join(out, "derived.json"), record)
        _write_json(os.path.join(out, "search.result.json"), record)
        print(f"search: widths={result.arch.widths} depths={result.arch.depths} "
              f"flops={result.arch.flops:.0f} ({100 * ratio:.1f}% of max)")
    return 0


def _arch_from_search_checkpoint(meta: dict, arrays: dict) -> tuple[DerivedArch, float, float]:
    from .distributions import derive
    from .supernet import build_arch_params

    cfg = config_from_dict(meta["config"])
    spec = _supernet_spec(cfg)
    arch_params = build_arch_params(spec,
                                    search_width=cfg.search.axes in ("width", "both"),
                                    search_depth=cfg.search.axes in ("depth", "both"))
    for name, tensor in arch_params.named_parameters().items():
        tensor.data = arrays[name].copy()
    table = LayerCostTable(spec)
    arch = derive(arch_params)
    arch.flops = f_cost(arch, table)
    return arch, arch.flops, f_cost(max_arch(spec), table)


def cmd_derive(search_ckpt: str, out_path: str | None) -> int:
    meta, arrays = load_checkpoint(search_ckpt)
    if meta["phase"] != "search":
        raise CliError(f"derive expects a search checkpoint, got {meta['phase']}")
    arch, flops, fmax = _arch_from_search_checkpoint(meta, arrays)
    ratio = flops / fmax
    print(f"widths: {arch.widths}")
    print(f"depths: {arch.depths}")
    print(f"flops: {flops:.0f} of {fmax:.0f} ({100 * ratio:.1f}%, pruning {100 * (1 - ratio):.1f}%)")
    if out_path:
        _write_json(out_path, {"widths": arch.widths, "depths": arch.depths,
                               "flops": flops, "max_flops": fmax,
                               "flops_ratio": ratio, "pruning_ratio": 1.0 - ratio})
    return 0


def cmd_transfer(cfg: ExperimentConfig, arch_path: str, teacher_path: str,
                 mode: str, resume: bool) -> int:
    out = resolve_output_dir(cfg)
    with RunLock(out):
        echo_config(cfg, out)
        arch_record = _read_json(arch_path)
        arch = DerivedArch(widths=list(arch_record["widths"]),
                           depths=list(arch_record["depths"]))
        tmeta, tarrays = load_checkpoint(teacher_path)
        _require_hash(tmeta, cfg, "teacher checkpoint")
        if tmeta["phase"] != "teacher":
            raise CliError(f"--teacher expects a teacher checkpoint, got {tmeta['phase']}")
        teacher = _load_net_from_checkpoint(tmeta, tarrays)

        train_ds, test_ds = load_datasets(cfg)
        kd_spec = KDSpec(temperature=cfg.kd.temperature, mix=cfg.kd.mix, mode=mode)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        student = build_student(teacher, arch, mode, rng)
        if mode == "kd":
            run = FitRun(student, train_ds, cfg.train, rng, teacher=teacher, kd_spec=kd_spec)
        else:
            run = FitRun(student, train_ds, cfg.train, rng)

        tag = f"student-{mode}-seed{cfg.seed}"
        ckpt_path = os.path.join(out, f"{tag}.ckpt")
        if resume:
            meta, arrays = load_checkpoint(ckpt_path)
            _require_hash(meta, cfg, "student checkpoint")
            run.restore(meta["run"], arrays)

        def save(r: FitRun) -> None:
            run_meta, arrays = r.state()
            meta = _base_meta(cfg, "student")
            meta["run"] = run_meta
            meta["arch"] = {"widths": arch.widths, "depths": arch.depths}
            meta["mode"] = mode
            save_checkpoint(ckpt_path, meta, arrays)

        run.run(on_epoch=save)
        accuracy = evaluate_accuracy(student, test_ds, cfg.train.batch_size)
        supernet_spec = _supernet_spec(cfg)
        table = LayerCostTable(supernet_spec)
        flops = f_cost(arch, table)
        fmax = f_cost(max_arch(supernet_spec), table)
        run_meta, arrays = run.state()
        meta = _base_meta(cfg, "student")
        meta["run"] = run_meta
        meta["arch"] = {"widths": arch.widths, "depths": arch.depths}
        meta["mode"] = mode
        meta["accuracy"] = accuracy
        save_checkpoint(ckpt_path, meta, arrays)
        _write_json(os.path.join(out, f"{tag}.result.json"),
                    {"mode": mode, "seed": cfg.seed, "accuracy": accuracy,
                     "flops": flops, "flops_ratio": flops / fmax,
                     "pruning_ratio": 1.0 - flops / fmax})
        print(f"student[{mode}]: accuracy={accuracy:.4f} flops={flops:.0f} "
              f"({100 * flops / fmax:.1f}% of teacher)")
    return 0


def cmd_eval(ckpt_path: str) -> int:
    meta, arrays = load_checkpoint(ckpt_path)
    if meta["phase"] not in ("teacher", "student"):
        raise CliError(f"eval expects a teacher or student checkpoint, got {meta['phase']}")
    cfg = config_from_dict(meta["config"])
    net = _load_net_from_checkpoint(meta, arrays)
    _, test_ds = load_datasets(cfg)
    accuracy = evaluate_accuracy(net, test_ds, cfg.train.batch_size)
    supernet_spec = _supernet_spec(cfg)
    table = LayerCostTable(supernet_spec)
    if meta["phase"] == "student":
        arch = DerivedArch(widths=meta["arch"]["widths"], depths=meta["arch"]["depths"])
    else:
        arch = max_arch(supernet_spec)
    flops = f_cost(arch, table)
    print(f"{meta['phase']}: accuracy={accuracy:.4f} flops={flops:.0f}")
    return 0


def cmd_report(run_dir: str) -> int:
    csv_path = os.path.join(run_dir, "search.metrics.csv")
    report_path = os.path.join(run_dir, "report.csv")
    summary_path = os.path.join(run_dir, "report-summary.csv")
    if not os.path.isdir(run_dir):
        raise CliError(f"run directory not found: {run_dir}")

    rows = []
    if os.path.exists(csv_path):
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        with open(report_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
            writer.writeheader()
            writer.writerows(rows)

    summary = []
    teacher_result = os.path.join(run_dir, "teacher.result.json")
    if os.path.exists(teacher_result):
        rec = _read_json(teacher_result)
        summary.append({"artifact": "teacher", "mode": "", "seed": rec.get("seed", ""),
                        "accuracy": rec["accuracy"], "flops": rec["flops"],
                        "flops_ratio": 1.0, "pruning_ratio": 0.0})
    search_result = os.path.join(run_dir, "search.result.json")
    if os.path.exists(search_result):
        rec = _read_json(search_result)
        summary.append({"artifact": "derived-arch", "mode": "", "seed": rec.get("seed", ""),
                        "accuracy": "", "flops": rec["flops"],
                        "flops_ratio": rec["flops_ratio"],
                        "pruning_ratio": rec["pruning_ratio"]})
    for path in sorted(glob.glob(os.path.join(run_dir, "student-*.result.json"))):
        rec = _read_json(path)
        summary.append({"artifact": os.path.basename(path).replace(".result.json", ""),
                        "mode": rec["mode"], "seed": rec["seed"],
                        "accuracy": rec["accuracy"], "flops": rec["flops"],
                        "flops_ratio": rec["flops_ratio"],
                        "pruning_ratio": rec["pruning_ratio"]})
    fields = ["artifact", "mode", "seed", "accuracy", "flops", "flops_ratio", "pruning_ratio"]
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(summary)

    print(f"report: {len(rows)} epoch rows -> {report_path}")
    for item in summary:
        acc = f"{item['accuracy']:.4f}" if isinstance(item["accuracy"], float) else "-"
        print(f"  {item['artifact']:<24} acc={acc} flops={item['flops']:.0f} "
              f"pruning={100 * float(item['pruning_ratio']):.1f}%")
    return 0


# -- entry point ---------------------------------------------------------------


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the experiment JSON config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunesearch",
        description="Differentiable width/depth pruning search with knowledge transfer. "
                    f"Set {OUTPUT_ROOT_ENV} to relocate relative output directories.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-teacher", help="train the unpruned full-size network")
    _add_config_arg(p)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("search", help="search widths and depths")
    _add_config_arg(p)
    p.add_argument("--teacher", default=None, help="teacher checkpoint to initialize from")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("derive", help="print the argmax architecture of a search checkpoint")
    p.add_argument("--search-ckpt", required=True)
    p.add_argument("--out", default=None, help="also write the architecture JSON here")

    p = sub.add_parser("transfer", help="train a derived student network")
    _add_config_arg(p)
    p.add_argument("--arch", required=True, help="derived architecture JSON")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--mode", required=True, choices=["none", "init", "kd"])
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="test accuracy and FLOPs of a checkpoint")
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("report", help="consolidated CSV report for a run directory")
    p.add_argument("--run-dir", required=True)
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pretrain-teacher":
            return cmd_pretrain_teacher(_load_cfg(args), args.resume)
        if args.command == "search":
            return cmd_search(_load_cfg(args), args.teacher, args.resume)
        if args.command == "derive":
            return cmd_derive(args.search_ckpt, args.out)
        if args.command == "transfer":
            return cmd_transfer(_load_cfg(args), args.arch, args.teacher, args.mode,
                                args.resume)
        if args.command == "eval":
            return cmd_eval(args.ckpt)
        if args.command == "report":
            return cmd_report(args.run_dir)
        raise CliError(f"unknown command {args.command}")
    except (CliError, ConfigError, CheckpointError, DivergenceError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
