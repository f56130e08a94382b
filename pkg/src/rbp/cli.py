"""Command-line pipeline driver.

    rbp pretrain|prune|finetune|eval|report --config <path>
        [--seed N] [--out DIR] [--resume CKPT] [--allow-config-mismatch]

Exit codes: 0 success, 1 validation error (bad config, missing data,
incompatible checkpoint), 2 runtime failure.  Every training command
acquires a lock on its output directory and writes the fully-resolved
configuration beside its outputs, so a finished run can be reproduced
bitwise from those files alone.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, architecture_from, config_hash, \
    load_config, resolved_yaml, schedule_from
from .data import DataError, Dataset, expected_files, load_dataset, \
    synthesize_digits_corpus
from .metrics import PruneReport, write_report_files
from .model import Model
from .optim import SGD, Adam
from .pruner import rbp_pipeline
from .train import TrainLog, evaluate_accuracy, finetune_lr_schedule, train_epochs

LOCK_NAME = ".rbp.lock"


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


class OutputLock:
    """Exclusive per-directory lock; commands never share an output dir."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / LOCK_NAME
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"output directory {self.path.parent} is locked by another "
                           f"run (remove {self.path} if that run is dead)")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _load_split(cfg: RunConfig, split: str) -> Dataset:
    root = Path(cfg.dataset.root)
    name = cfg.dataset.name
    if cfg.dataset.synthesize and name == "mnist":
        synthesize_digits_corpus(root, cfg.dataset.synth_train, cfg.dataset.synth_test,
                                 seed=cfg.dataset.synth_seed)
    if not root.exists():
        wanted = ", ".join(expected_files(name, split))
        raise DataError(f"dataset root {root} does not exist; expected files for "
                        f"{name}/{split}: {wanted}")
    ds = load_dataset(name, root, split)
    if split == "train" and cfg.dataset.limit_train:
        n = cfg.dataset.limit_train
        ds = Dataset(ds.name, ds.split, ds.images[:n], ds.labels[:n],
                     ds.num_classes, ds.mean, ds.std)
    return ds


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    (out / "resolved-config.yaml").write_text(resolved_yaml(cfg))


def _pretrain_optimizer(cfg: RunConfig):
    if cfg.pretrain.optimizer == "sgd":
        return SGD(lr=cfg.pretrain.lr, momentum=cfg.pretrain.momentum)
    return Adam(lr=cfg.pretrain.lr)


def cmd_pretrain(cfg: RunConfig, out: Path, seed: int, resume=None,
                 allow_mismatch: bool = False) -> None:
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    epoch_offset = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.meta.get("config_hash") != config_hash(cfg) and not allow_mismatch:
            raise CliError("checkpoint was produced by a different configuration; "
                           "pass --allow-config-mismatch to resume anyway")
        model = ckpt.to_model()
        epoch_offset = int(ckpt.meta.get("epoch", 0))
    else:
        model = Model.build(architecture_from(cfg), seed=seed)
    log = TrainLog(out / "train-log.csv")
    remaining = max(cfg.pretrain.epochs - epoch_offset, 0)
    train_epochs(model, train, epochs=remaining, batch_size=cfg.dataset.batch_size,
                 optimizer=_pretrain_optimizer(cfg), seed=seed,
                 augmentation=cfg.dataset.augmentation, phase="pretrain", log=log,
                 epoch_offset=epoch_offset)
    acc = evaluate_accuracy(model, test)
    save_checkpoint(out / "baseline.ckpt", model,
                    meta={"config_hash": config_hash(cfg), "seed": seed,
                          "epoch": cfg.pretrain.epochs, "phase": "pretrain",
                          "test_accuracy": acc})
    print(f"pretrain: {cfg.pretrain.epochs} epochs, test accuracy {acc:.4f}")
    print(f"wrote {out / 'baseline.ckpt'}")


def cmd_prune(cfg: RunConfig, out: Path, seed: int, resume=None,
              allow_mismatch: bool = False) -> None:
    ckpt_path = Path(resume) if resume else out / "baseline.ckpt"
    ckpt = load_checkpoint(ckpt_path)
    arch = architecture_from(cfg)
    if ckpt.arch.id != arch.id:
        raise CliError(f"checkpoint architecture {ckpt.arch.id!r} does not match "
                       f"configured {arch.id!r}")
    model = ckpt.to_model()
    schedule = schedule_from(cfg, model.arch)
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    log = TrainLog(out / "train-log.csv")

    def save_stage(k, stage_model, gates, masks):
        save_checkpoint(out / f"stage-{k}.ckpt", stage_model, gates,
                        meta={"config_hash": config_hash(cfg), "seed": seed,
                              "stage_index": k, "phase": "prune"})

    result = rbp_pipeline(model, train, schedule, seed=seed, eval_dataset=test,
                          log=log, convention=cfg.metrics.flops_convention,
                          stage_callback=save_stage)
    save_checkpoint(out / "pruned.ckpt", result.model, result.gates,
                    meta={"config_hash": config_hash(cfg), "seed": seed,
                          "phase": "pruned"})
    write_report_files(result.report, out)
    rep = result.report
    print(f"prune: FLOPs {rep.flops_before} -> {rep.flops_after} "
          f"({rep.flops_ratio:.2f}x, {rep.convention} convention), "
          f"compression {rep.compression:.2f}x")
    if rep.accuracy_before is not None:
        print(f"accuracy: before {rep.accuracy_before:.4f}, after prune "
              f"{rep.accuracy_after_prune:.4f}, after finetune "
              f"{rep.accuracy_after:.4f}")
    print(f"wrote {out / 'pruned.ckpt'} and report files")


def cmd_finetune(cfg: RunConfig, out: Path, seed: int, resume=None,
                 allow_mismatch: bool = False) -> None:
    ckpt_path = Path(resume) if resume else out / "pruned.ckpt"
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.to_model()
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    log = TrainLog(out / "train-log.csv")
    sgd = SGD(lr=cfg.finetune.lr, momentum=cfg.finetune.momentum)
    lrs = finetune_lr_schedule(cfg.finetune.lr, cfg.finetune.epochs,
                               cfg.finetune.decay, cfg.finetune.decay_every)
    train_epochs(model, train, epochs=cfg.finetune.epochs,
                 batch_size=cfg.dataset.batch_size, optimizer=sgd, seed=seed,
                 augmentation=cfg.dataset.augmentation, phase="finetune", log=log,
                 lr_schedule=lrs)
    acc = evaluate_accuracy(model, test)
    save_checkpoint(out / "finetuned.ckpt", model, ckpt.gates,
                    meta={"config_hash": config_hash(cfg), "seed": seed,
                          "phase": "finetune", "test_accuracy": acc})
    print(f"finetune: {cfg.finetune.epochs} epochs, test accuracy {acc:.4f}")
    print(f"wrote {out / 'finetuned.ckpt'}")


def cmd_eval(cfg: RunConfig, out: Path, seed: int, resume=None,
             allow_mismatch: bool = False) -> None:
    if resume is None:
        raise CliError("eval requires --resume pointing at a checkpoint")
    ckpt = load_checkpoint(resume)
    model = ckpt.to_model()
    test = _load_split(cfg, "test")
    acc = evaluate_accuracy(model, test)
    print(f"eval: test accuracy {acc:.4f} ({len(test)} examples)")


def cmd_report(cfg: RunConfig, out: Path, seed: int, resume=None,
               allow_mismatch: bool = False) -> None:
    report_path = out / "report.json"
    if not report_path.exists():
        raise CliError(f"no report at {report_path}; run prune first")
    report = PruneReport.from_json(report_path.read_text())
    written = write_report_files(report, out)
    print(f"report: regenerated {', '.join(written)} in {out}")


_COMMANDS = {"pretrain": cmd_pretrain, "prune": cmd_prune, "finetune": cmd_finetune,
             "eval": cmd_eval, "report": cmd_report}
_LOCKING = {"pretrain", "prune", "finetune"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbp",
                                     description="Recursive Bayesian channel pruning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the dataset seed")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--resume", default=None, help="input checkpoint")
        p.add_argument("--allow-config-mismatch", action="store_true",
                       help="resume even if the checkpoint's config hash differs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.dataset.seed = args.seed
        seed = cfg.dataset.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        command = _COMMANDS[args.command]
        if args.command in _LOCKING:
            with OutputLock(out):
                _write_resolved(cfg, out)
                command(cfg, out, seed, resume=args.resume,
                        allow_mismatch=args.allow_config_mismatch)
        else:
            command(cfg, out, seed, resume=args.resume,
                    allow_mismatch=args.allow_config_mismatch)
        return 0
    except (ConfigError, DataError, CheckpointError, CliError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return getattr(err, "code", 1)
    except NonFiniteError as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - contract: unexpected failures exit 2
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
