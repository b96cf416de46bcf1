"""Command-line front end: config parsing, subcommands and report files.

    orthounlearn pretrain --config run.json --out runs/pre
    orthounlearn unlearn  --config run.json --checkpoint runs/pre/pretrained.json --out runs/u
    orthounlearn probe    --config run.json --checkpoint runs/u/checkpoint_task4.json
    orthounlearn run      --config run.json --seed 42 --seed 288 --jobs 2 --out runs/rep
    orthounlearn report   runs/rep/seed*/report.json --out runs/rep
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Literal

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import Dataset, default_schedule, gen_synthetic, load_csv, partition_tasks
from .errors import ParseError, UnlearnError, ValidationError
from .model import ModelConfig, load_checkpoint, mask_head, save_checkpoint
from .scenario import (
    PretrainConfig,
    ProbeConfig,
    accuracy,
    pretrain,
    projection_energy_probe,
    recovery_probe,
    run_incremental,
)
from .unlearn import SubspaceSet, TrainConfig

REPORT_SEEDS = (42, 288, 488, 688, 1337)
METRIC_FIELDS = ("acc_r", "acc_f", "acc_o", "drop", "h_mean")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    source: Literal["synthetic", "csv"] = "synthetic"
    num_classes: int = Field(20, ge=2)
    dim: int = Field(32, ge=2)
    per_class_n: int = Field(200, ge=2)
    separation: float = Field(8.0, gt=0)
    seed: int = 42
    csv_path: str | None = None

    @model_validator(mode="after")
    def _csv_exists(self):
        if self.source == "csv":
            if not self.csv_path:
                raise ValueError("csv_path is required when source is 'csv'")
            if not Path(self.csv_path).is_file():
                raise ValueError(f"csv_path {self.csv_path!r} does not exist")
        return self


class ModelSection(_Section):
    hidden_dim: int = Field(64, ge=1)
    num_hidden_layers: int = Field(3, ge=1)
    activation: Literal["relu", "tanh"] = "relu"
    lora_rank: int = Field(8, ge=1)


class PretrainSection(_Section):
    max_epochs: int = Field(200, ge=0)
    learning_rate: float = Field(0.05, gt=0)
    batch_size: int = Field(64, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    target_accuracy: float = Field(95.0, ge=0, le=100)
    min_epochs: int = Field(0, ge=0)
    weight_decay: float = Field(0.0, ge=0)


class UnlearnSection(_Section):
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(0.2, ge=0)
    learning_rate: float = Field(1e-4, ge=0)
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(64, ge=1)
    optimizer: Literal["sgd", "sgd_momentum"] = "sgd_momentum"
    epsilon: float = Field(0.99, gt=0, le=1)
    gradient_projection: Literal["sequential", "literal"] = "sequential"
    expansion_rule: Literal["cumulative", "residual"] = "cumulative"


class ProbeSection(_Section):
    epochs: int = Field(100, ge=0)
    learning_rate: float = Field(0.1, gt=0)
    batch_size: int = Field(64, ge=1)


class ScheduleSection(_Section):
    tasks: list[list[int]] = Field(default_factory=default_schedule)


class OutputSection(_Section):
    directory: str = "runs"
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])
    checkpoints: bool = True


class RunConfig(_Section):
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    unlearn: UnlearnSection = Field(default_factory=UnlearnSection)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    output: OutputSection = Field(default_factory=OutputSection)
    seed: int = 42

    @model_validator(mode="after")
    def _schedule_in_range(self):
        c = self.dataset.num_classes
        if self.dataset.source == "synthetic":
            for t, fset in enumerate(self.schedule.tasks, start=1):
                bad = [k for k in fset if not 0 <= k < c]
                if bad:
                    raise ValueError(f"schedule task {t} names classes {bad} outside 0..{c - 1}")
        return self

    def model_cfg(self, num_classes: int, input_dim: int) -> ModelConfig:
        m = self.model
        return ModelConfig(input_dim, m.hidden_dim, m.num_hidden_layers, num_classes, m.activation, m.lora_rank)

    def pretrain_cfg(self, seed: int) -> PretrainConfig:
        return PretrainConfig(**self.pretrain.model_dump(), seed=seed)

    def train_cfg(self, seed: int) -> TrainConfig:
        u = self.unlearn.model_dump(exclude={"epsilon", "expansion_rule"})
        return TrainConfig(**u, seed=seed)

    def probe_cfg(self, seed: int) -> ProbeConfig:
        return ProbeConfig(**self.probe.model_dump(), seed=seed)


def _loc(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def validate_config(doc) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except pydantic.ValidationError as exc:
        first = exc.errors()[0]
        raise ValidationError(f"{_loc(first)}: {first['msg']}") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if text.splitlines() else ""
        raise ParseError(f"{source}: line {exc.lineno} col {exc.colno}: {exc.msg}: {line.strip()!r}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: line 1: top level must be a JSON object")
    return validate_config(doc)


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ParseError(f"{path}: no such config file")
    return parse_config_text(p.read_text(), str(path))


def config_echo(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


# -- scenario plumbing -----------------------------------------------------------


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.dataset
    if d.source == "csv":
        return load_csv(d.csv_path, d.seed)
    return gen_synthetic(d.num_classes, d.dim, d.per_class_n, d.separation, d.seed)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", *METRIC_FIELDS])
    for r in records:
        w.writerow([r["task"], *(_fmt(r[k]) for k in METRIC_FIELDS)])
    return buf.getvalue()


def _split_acc(model, ds: Dataset) -> dict:
    return {s: accuracy(model, *ds.select(s)) for s in ("train", "test")}


def do_pretrain(cfg: RunConfig, seed: int, out: Path) -> dict:
    ds = load_dataset(cfg)
    model = pretrain(ds, cfg.model_cfg(ds.num_classes, ds.dim), cfg.pretrain_cfg(seed), seed)
    summary = {"seed": seed, "accuracy": _split_acc(model, ds), "config": config_echo(cfg)}
    _write(out / "pretrained.json", save_checkpoint(model))
    _write(out / "pretrain_metrics.json", _dump(summary))
    return summary


def _forgotten_union(cfg: RunConfig, upto: int | None = None) -> list[int]:
    tasks = cfg.schedule.tasks[:upto] if upto else cfg.schedule.tasks
    return sorted({c for fset in tasks for c in fset})


def scenario_report(cfg: RunConfig, ds: Dataset, pretrained, seed: int, out: Path | None) -> dict:
    tasks = partition_tasks(ds, cfg.schedule.tasks)
    u = cfg.unlearn
    res = run_incremental(pretrained, ds, tasks, cfg.train_cfg(seed), u.epsilon, cfg.model.lora_rank,
                          expansion_rule=u.expansion_rule)
    records = []
    for outcome in res.outcomes:
        row = asdict(outcome.metrics)
        row.update(
            pretrain_acc_r=outcome.pretrain_acc_r,
            energy_before=outcome.energy_before,
            energy_after=outcome.energy_after,
            subspace_ranks=outcome.subspace_ranks,
            max_relative_delta=outcome.max_relative_delta,
        )
        records.append(row)
    forgotten = _forgotten_union(cfg)
    pcfg = cfg.probe_cfg(seed)
    report = {
        "seed": seed,
        "config": config_echo(cfg),
        "pretrain": _split_acc(pretrained, ds),
        "tasks": records,
        "probes": {
            "forgotten_classes": forgotten,
            "pretrain_acc_f": accuracy(pretrained, *ds.select("test", forgotten)) if forgotten else None,
            "unlearned": recovery_probe(res.model, ds, forgotten, pcfg),
            "head_mask": recovery_probe(mask_head(pretrained, forgotten), ds, forgotten, pcfg),
            "pretrained": recovery_probe(pretrained, ds, forgotten, pcfg),
        },
        "loss_curve": res.loss_curve,
    }
    if out is not None:
        if cfg.output.checkpoints:
            for outcome, model, subs in zip(res.outcomes, res.models, res.subspaces):
                _write(out / f"checkpoint_task{outcome.metrics.task}.json", save_checkpoint(_with_subs(model, subs)))
        if "csv" in cfg.output.formats:
            _write(out / "metrics.csv", metrics_csv(records))
        if "json" in cfg.output.formats:
            _write(out / "report.json", _dump(report))
    return report


def _with_subs(model, subs: SubspaceSet):
    m = model.copy()
    m.subspaces = subs.as_dict()
    return m


def do_unlearn(cfg: RunConfig, seed: int, checkpoint: Path, out: Path) -> dict:
    ds = load_dataset(cfg)
    pretrained = load_checkpoint(checkpoint.read_text())
    return scenario_report(cfg, ds, pretrained, seed, out)


def do_run(cfg: RunConfig, seed: int, out: Path) -> dict:
    """Pretrain then unlearn, one full replicate."""
    do_pretrain(cfg, seed, out)
    return do_unlearn(cfg, seed, out / "pretrained.json", out)


def do_probe(cfg: RunConfig, seed: int, checkpoint: Path, upto: int | None) -> dict:
    ds = load_dataset(cfg)
    model = load_checkpoint(checkpoint.read_text())
    forgotten = _forgotten_union(cfg, upto)
    result = {"checkpoint": str(checkpoint), "forgotten_classes": forgotten}
    result.update(recovery_probe(model, ds, forgotten, cfg.probe_cfg(seed)))
    energy = None
    if model.subspaces:
        x_f, _ = ds.select("test", forgotten)
        energy = projection_energy_probe(model, x_f, SubspaceSet.from_dict(model.subspaces))
    result["projection_energy"] = energy
    return result


def aggregate(reports: list[dict]) -> list[dict]:
    """Mean and sample std of every per-task metric across replicate reports."""
    ntasks = {len(r["tasks"]) for r in reports}
    if len(ntasks) != 1:
        raise ValidationError(f"reports disagree on task count: {sorted(ntasks)}")
    rows = []
    for t in range(ntasks.pop()):
        row = {"task": reports[0]["tasks"][t]["task"], "n": len(reports)}
        for k in METRIC_FIELDS:
            vals = [r["tasks"][t][k] for r in reports if r["tasks"][t][k] is not None]
            if vals:
                row[f"{k}_mean"] = float(np.mean(vals))
                row[f"{k}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            else:
                row[f"{k}_mean"] = row[f"{k}_std"] = None
        rows.append(row)
    return rows


def summary_csv(rows: list[dict]) -> str:
    cols = ["task", "n"] + [f"{k}_{s}" for k in METRIC_FIELDS for s in ("mean", "std")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([row["task"], row["n"]] + [_fmt(row[c]) for c in cols[2:]])
    return buf.getvalue()


# -- entry point -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orthounlearn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, multi=False):
        sp.add_argument("--config", type=Path, help="JSON run config (defaults when omitted)")
        if multi:
            sp.add_argument("--seed", type=int, action="append", help="repeat for replicates")
            sp.add_argument("--jobs", type=int, default=1)
            sp.add_argument("--replicates", action="store_true", help=f"use seeds {REPORT_SEEDS}")
        else:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, required=True)

    common(sub.add_parser("pretrain", help="train backbone and head"))
    common(sub.add_parser("unlearn", help="incremental unlearning from a pretrained checkpoint"), True, True)
    pr = sub.add_parser("probe", help="recovery and projection-energy probes")
    common(pr, True)
    pr.add_argument("--through-task", type=int, help="forgotten classes of tasks 1..T (default all)")
    common(sub.add_parser("run", help="pretrain + unlearn per seed"), multi=True)
    rp = sub.add_parser("report", help="mean and std across replicate reports")
    rp.add_argument("reports", nargs="+", type=Path)
    rp.add_argument("--out", type=Path)
    return p


def _seeded_out(base: Path, seed: int, many: bool) -> Path:
    return base / f"seed{seed}" if many else base


def _replicates(fn, cfg, seeds, jobs, out, *extra):
    many = len(seeds) > 1
    args = [(cfg, s, *extra, _seeded_out(out, s, many)) for s in seeds]
    if jobs > 1 and many:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_call, [fn] * len(args), args))
    return [fn(*a) for a in args]


def _call(fn, args):
    return fn(*args)


def _brief(report: dict) -> list[dict]:
    return [{k: r[k] for k in ("task", *METRIC_FIELDS)} for r in report["tasks"]]


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            reports = []
            for path in args.reports:
                try:
                    reports.append(json.loads(path.read_text()))
                except (OSError, json.JSONDecodeError) as exc:
                    raise ParseError(f"{path}: {exc}") from None
            rows = aggregate(reports)
            if args.out:
                _write(args.out / "summary.csv", summary_csv(rows))
                _write(args.out / "summary.json", _dump({"seeds": [r.get("seed") for r in reports], "tasks": rows}))
            sys.stdout.write(summary_csv(rows))
            return 0

        cfg = parse_config(args.config) if args.config else RunConfig()
        out = args.out or Path(cfg.output.directory)
        if args.command == "pretrain":
            summary = do_pretrain(cfg, cfg.seed if args.seed is None else args.seed, out)
            print(json.dumps(summary["accuracy"]))
        elif args.command == "probe":
            if args.checkpoint and not args.checkpoint.is_file():
                raise ParseError(f"{args.checkpoint}: no such checkpoint")
            result = do_probe(cfg, cfg.seed if args.seed is None else args.seed, args.checkpoint, args.through_task)
            if args.out:
                _write(args.out / "probe.json", _dump(result))
            print(json.dumps(result, sort_keys=True))
        else:
            seeds = list(REPORT_SEEDS) if args.replicates else args.seed or [cfg.seed]
            if args.command == "unlearn":
                if not args.checkpoint.is_file():
                    raise ParseError(f"{args.checkpoint}: no such checkpoint")
                reports = _replicates(do_unlearn, cfg, seeds, args.jobs, out, args.checkpoint)
            else:
                reports = _replicates(do_run, cfg, seeds, args.jobs, out)
            for rep in reports:
                print(json.dumps({"seed": rep["seed"], "tasks": _brief(rep)}))
    except (UnlearnError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
