"""``mimforge`` command-line entry point.

Usage::

    mimforge <dataset|pretrain|finetune|eval> --config <path>
             [--checkpoint <path>] [--out <dir>] [--seed <u64>]

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from ._io import FormatError, atomic_write_text
from .config import ConfigError, RunConfig, load_config
from .data import (
    Dataset,
    corrupt_dataset,
    generate_shapes_dataset,
    load_dataset,
    mesh_dataset,
    save_dataset,
)
from .metrics import evaluate
from .model import (
    attach_classifier,
    init_model,
    load_checkpoint,
    param_names,
    save_checkpoint,
)
from .patches import patchify_batch
from .tokenizer import TrainingError as TokenizerError
from .tokenizer import load_codebook, save_codebook, token_reconstruction_loss, train_codebook
from .training import (
    TrainingError,
    finetune_split,
    init_optimizer,
    load_optimizer,
    run_finetune,
    run_pretrain,
    save_optimizer,
)

log = logging.getLogger("mimforge")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

TRAIN_FILE = "source_train.mimd"
VAL_FILE = "source_val.mimd"
OOD_TRAIN_FILE = "ood_train.mimd"
CODEBOOK_FILE = "codebook.mimc"
PRETRAIN_CKPT = "pretrain.mims"
FINETUNE_CKPT = "finetune.mims"
PRETRAIN_LOG = "pretrain_metrics.tsv"
FINETUNE_LOG = "finetune_metrics.tsv"
CURVE_FILE = "eval_curve.csv"


class InputError(RuntimeError):
    pass


def _opt_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".mimo")


def _read_dataset(path: Path) -> Dataset:
    try:
        return load_dataset(path)
    except OSError as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc


def build_datasets(config: RunConfig) -> dict[str, Dataset]:
    """All dataset files keyed by file name, in write order."""
    d = config.data
    size = config.model.image_size
    train = generate_shapes_dataset(d.num_classes, d.per_class, size, config.sub_seed("dataset/train"), d.channels)
    val = generate_shapes_dataset(d.num_classes, d.val_per_class, size, config.sub_seed("dataset/val"), d.channels)
    ood_train = mesh_dataset(train, d.mesh_count, config.sub_seed("mesh/train"))
    target_mesh = mesh_dataset(val, d.target_mesh_count, config.sub_seed("mesh/target"))
    out = {TRAIN_FILE: train, VAL_FILE: val, OOD_TRAIN_FILE: ood_train, "target_clean.mimd": val.concat(target_mesh)}
    for spec in config.shift_specs():
        out[f"target_{spec.name}.mimd"] = corrupt_dataset(val, spec).concat(target_mesh)
    return out


def cmd_dataset(config: RunConfig, out: Path) -> int:
    datasets = build_datasets(config)
    for name, ds in datasets.items():
        save_dataset(ds, out / name)
        log.info("wrote %s (%d images)", name, len(ds))
    return EXIT_OK


def _truncated_log(path: Path, before_step: int) -> str:
    if not path.exists():
        return ""
    keep = [ln for ln in path.read_text().splitlines(keepends=True) if ln and int(ln.split("\t", 1)[0]) < before_step]
    return "".join(keep)


def cmd_pretrain(config: RunConfig, out: Path, checkpoint: Path | None) -> int:
    train = _read_dataset(out / TRAIN_FILE).known()
    tcfg = config.train_config()
    cfg = config.model_config()
    if train.image_shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise InputError(f"dataset images {train.image_shape} do not match the model config")
    images = train.images.astype(np.float64)

    if checkpoint is not None:
        try:
            state = load_checkpoint(checkpoint)
            opt = load_optimizer(_opt_path(checkpoint), param_names(state.config))
            codebook = load_codebook(out / CODEBOOK_FILE)
        except (OSError, FormatError) as exc:
            raise InputError(f"cannot resume from {checkpoint}: {exc}") from exc
        log.info("resuming pretraining at step %d", opt.step)
    else:
        patches = patchify_batch(images, cfg.patch_size).reshape(-1, cfg.patch_dim)
        codebook = train_codebook(
            patches,
            cfg.vocab_size,
            config.train.tokenizer_iters,
            config.sub_seed("tokenizer"),
            patch_size=cfg.patch_size,
            channels=cfg.channels,
        )
        save_codebook(codebook, out / CODEBOOK_FILE)
        state = init_model(cfg, config.sub_seed("init"))
        opt = init_optimizer(state)

    log_path = out / PRETRAIN_LOG
    prefix = _truncated_log(log_path, opt.step)
    buf = io.StringIO(prefix)
    buf.seek(0, io.SEEK_END)
    names = param_names(state.config)
    every = config.train.checkpoint_every

    def on_step(step: int, _m) -> None:
        if (step + 1) % every == 0:
            save_checkpoint(state, out / PRETRAIN_CKPT)
            save_optimizer(opt, names, _opt_path(out / PRETRAIN_CKPT))
            atomic_write_text(log_path, buf.getvalue())

    run_pretrain(images, codebook, state, opt, tcfg, log=buf, on_step=on_step)
    save_checkpoint(state, out / PRETRAIN_CKPT)
    save_optimizer(opt, names, _opt_path(out / PRETRAIN_CKPT))
    atomic_write_text(log_path, buf.getvalue())

    recon = float(np.mean([token_reconstruction_loss(img, codebook) for img in images]))
    summary = pretrain_summary(buf.getvalue(), len(images), tcfg.batch_size)
    summary["token_reconstruction_loss"] = recon
    summary["steps"] = opt.step
    atomic_write_text(out / "pretrain_summary.tsv", "".join(f"{k}\t{v!r}\n" for k, v in summary.items()))
    log.info(
        "pretraining done: mim_loss=%.4f masked_acc=%.4f token_reconstruction_loss=%.5f",
        summary["final_mim_loss"],
        summary["final_masked_acc"],
        recon,
    )
    return EXIT_OK


def pretrain_summary(log_text: str, n_images: int, batch_size: int) -> dict:
    """Initial loss plus loss and masked-token accuracy averaged over the final epoch of steps.

    A single step's loss swings with its batch and masks; the final-epoch
    mean sees every training image once.
    """
    rows = [ln.split("\t") for ln in log_text.splitlines() if ln]
    if not rows:
        nan = float("nan")
        return {"initial_mim_loss": nan, "final_mim_loss": nan, "final_masked_acc": nan}
    window = rows[-max(1, math.ceil(n_images / batch_size)) :]
    return {
        "initial_mim_loss": float(rows[0][2]),
        "final_mim_loss": float(np.mean([float(r[2]) for r in window])),
        "final_masked_acc": float(np.mean([float(r[3]) for r in window])),
    }


def cmd_finetune(config: RunConfig, out: Path, checkpoint: Path | None) -> int:
    ckpt = checkpoint or out / PRETRAIN_CKPT
    try:
        state = load_checkpoint(ckpt)
    except (OSError, FormatError) as exc:
        raise InputError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    expected = config.model_config(state.config.num_classes)
    if state.config != expected:
        raise InputError(f"checkpoint config {state.config} does not match run config {expected}")
    train = _read_dataset(out / TRAIN_FILE)
    ood = _read_dataset(out / OOD_TRAIN_FILE) if config.data.ood_class else None
    split = finetune_split(train, ood, config.data.ood_class)
    state = attach_classifier(state, config.head_classes(), config.sub_seed("head"))
    buf = io.StringIO()
    state, history = run_finetune(split, state, config.train_config(), log=buf)
    save_checkpoint(state, out / FINETUNE_CKPT)
    atomic_write_text(out / FINETUNE_LOG, buf.getvalue())
    rows = "".join(
        f"{e}\t{size}\t{loss!r}\t{acc!r}\n"
        for e, (size, loss, acc) in enumerate(zip(history.image_size, history.epoch_loss, history.epoch_acc))
    )
    atomic_write_text(out / "finetune_history.tsv", rows)
    log.info("fine-tuning done: train acc %.4f at %dpx", history.epoch_acc[-1], history.image_size[-1])
    return EXIT_OK


def _target_meta(name: str) -> tuple[str, int]:
    stem = name[len("target_") : -len(".mimd")]
    if stem == "clean":
        return "clean", 0
    kind, _, sev = stem.rpartition("_s")
    return kind, int(sev)


def cmd_eval(config: RunConfig, out: Path, checkpoint: Path | None) -> int:
    ckpt = checkpoint or out / FINETUNE_CKPT
    try:
        state = load_checkpoint(ckpt)
        codebook = load_codebook(out / CODEBOOK_FILE) if (out / CODEBOOK_FILE).exists() else None
    except (OSError, FormatError) as exc:
        raise InputError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    targets = sorted(p.name for p in out.glob("target_*.mimd"))
    if not targets:
        raise InputError(f"no target files in {out}")
    tables = []
    report = evaluate(state, codebook, _read_dataset(out / VAL_FILE), batch_size=config.eval.batch_size)
    report.save(out / "report_source_val.tsv")
    tables.append(report.to_table("source_val"))
    curve = io.StringIO()
    writer = csv.writer(curve, lineterminator="\n")
    writer.writerow(["target", "kind", "severity", "acc", "auroc"])
    for name in targets:
        ds = _read_dataset(out / name)
        report = evaluate(state, codebook, ds, batch_size=config.eval.batch_size)
        stem = name[: -len(".mimd")]
        report.save(out / f"report_{stem}.tsv")
        tables.append(report.to_table(stem))
        kind, sev = _target_meta(name)
        writer.writerow([stem, kind, sev, repr(report.acc), "NA" if report.auroc is None else repr(report.auroc)])
    atomic_write_text(out / CURVE_FILE, curve.getvalue())
    text = "\n".join(tables)
    atomic_write_text(out / "report.txt", text)
    print(text, end="")
    return EXIT_OK


COMMANDS = ("dataset", "pretrain", "finetune", "eval")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimforge", description="Desk-scale masked image modeling pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--checkpoint", type=Path)
    parser.add_argument("--out", type=Path, default=Path("runs/default"))
    parser.add_argument("--seed", type=int, help="master seed (overrides [train] seed)")
    return parser


def _limit_threads():
    raw = os.environ.get("MIMFORGE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"MIMFORGE_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        config = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be a u64")
            config = config.with_seed(args.seed)
        limiter = _limit_threads()
        out: Path = args.out
        if args.command == "dataset":
            code = cmd_dataset(config, out)
        elif args.command == "pretrain":
            code = cmd_pretrain(config, out, args.checkpoint)
        elif args.command == "finetune":
            code = cmd_finetune(config, out, args.checkpoint)
        else:
            code = cmd_eval(config, out, args.checkpoint)
        if limiter is not None:
            limiter.restore_original_limits()
        return code
    except (ConfigError, InputError, FormatError, TokenizerError, OSError) as exc:
        print(f"mimforge: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, FloatingPointError) as exc:
        print(f"mimforge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
