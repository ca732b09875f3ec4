"""Command-line interface.

Subcommands: gen-data, pretrain, finetune, eval, gradcheck, reconstruct.
A JSON config file supplies defaults; command-line flags win.  Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numerical failure.

Set SYDES_THREADS to cap the numeric kernels' thread pools; it must take
effect before numpy loads, so it is applied at import time here.
"""

from __future__ import annotations

import os
import sys


def _cap_threads() -> None:
    value = os.environ.get("SYDES_THREADS")
    if value:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, value)


_cap_threads()

import argparse  # noqa: E402
import json  # noqa: E402

import numpy as np  # noqa: E402

from .checkpoint import load_checkpoint, read_checkpoint  # noqa: E402
from .config import RunConfig  # noqa: E402
from .data import DatasetArrays, generate_synthetic, ingest_manifest  # noqa: E402
from .errors import ContractError, DataError, NumericalError, SydesError  # noqa: E402
from .gradcheck import run_suite  # noqa: E402
from .metrics import compute_metrics  # noqa: E402
from .model import TASK_CLASSES, TASKS, SydesModel  # noqa: E402
from .tensor import RngState  # noqa: E402
from .text import Vocab  # noqa: E402
from .training import StageConfig, batch_masks, predict, run_stage  # noqa: E402
from .viz import export_attention, export_triptych  # noqa: E402

from dataclasses import replace  # noqa: E402


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="sydes", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--seed", type=int, help="root random seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    common(p)
    p.add_argument("--n", type=int, default=64, help="training samples")
    p.add_argument("--val-n", type=int, default=0, help="validation samples")
    p.add_argument("--test-n", type=int, default=0, help="test samples")

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(p)
    p.add_argument("--data", help="dataset directory (train.jsonl + images)")
    p.add_argument("--mask-ratio", type=float, help="override the mask ratio")
    p.add_argument("--epochs", type=int, help="override epoch count")

    p = sub.add_parser("finetune", help="task fine-tuning from a checkpoint")
    common(p)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--checkpoint", required=True, help="pretraining checkpoint")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--no-itc", action="store_true",
                   help="drop the contrastive term from the fine-tuning loss")

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    common(p)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="test", help="manifest name to evaluate")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--cases", type=int, default=100, help="trials per loss")

    p = sub.add_parser("reconstruct", help="export reconstruction triptychs and attention maps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="train")
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--n", type=int, default=4, help="samples to export")

    return parser


def _load_config(args, base: RunConfig | None = None) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_json(args.config)
    else:
        cfg = base if base is not None else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "data", None):
        cfg = replace(cfg, data_dir=args.data)
    if getattr(args, "task", None):
        cfg = replace(cfg, task=args.task)
    if getattr(args, "mask_ratio", None) is not None and args.command == "pretrain":
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, mask_ratio=args.mask_ratio))
    if getattr(args, "epochs", None) is not None:
        if args.command == "pretrain":
            cfg = replace(cfg, pretrain=replace(cfg.pretrain, epochs=args.epochs))
        elif args.command == "finetune":
            cfg = replace(cfg, finetune=replace(cfg.finetune, epochs=args.epochs))
    if getattr(args, "no_itc", False):
        cfg = replace(cfg, finetune=cfg.finetune.with_weights(itc=0.0))
    return cfg


def _load_split(cfg: RunConfig, split: str, vocab: Vocab) -> DatasetArrays:
    manifest = os.path.join(cfg.data_dir, f"{split}.jsonl")
    if not os.path.isfile(manifest):
        raise DataError(f"manifest not found: {manifest}")
    samples, _ = ingest_manifest(manifest, cfg.data_dir)
    return DatasetArrays(samples, cfg.image, vocab, cfg.encoder.seq_len)


def _model_meta(cfg: RunConfig, vocab: Vocab) -> dict:
    d = cfg.to_dict()
    # Paths are runtime wiring; keeping them out makes equal-seed runs
    # produce byte-identical checkpoints.
    d.pop("data_dir", None)
    d.pop("out_dir", None)
    return {"run_config": d, "vocab": vocab.tokens()}


def _rebuild_from_checkpoint(path: str) -> tuple[RunConfig, Vocab, SydesModel, dict]:
    meta, _, _ = read_checkpoint(path)
    if "run_config" not in meta or "vocab" not in meta:
        raise DataError(f"{path}: checkpoint lacks embedded config/vocab")
    cfg = RunConfig.from_dict(meta["run_config"])
    tokens = meta["vocab"]
    vocab = Vocab(token_to_id={w: i + 3 for i, w in enumerate(tokens[3:])})
    model = SydesModel(cfg.image, cfg.encoder, vocab.size,
                       decoder_layers=cfg.decoder_layers, decoder_heads=cfg.decoder_heads)
    load_checkpoint(path, model)
    return cfg, vocab, model, meta


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = args.out or cfg.data_dir
    rng = RngState(cfg.seed, "data")
    wrote = []
    for split, n in (("train", args.n), ("val", args.val_n), ("test", args.test_n)):
        if n > 0:
            samples = generate_synthetic(n, cfg.image, rng, out, split=split)
            wrote.append(f"{split}: {len(samples)} samples")
    print(f"wrote {', '.join(wrote)} under {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    manifest = os.path.join(cfg.data_dir, "train.jsonl")
    samples, _ = ingest_manifest(manifest, cfg.data_dir)
    vocab = Vocab.build(s.text for s in samples)
    vocab.save(os.path.join(out, "vocab.txt"))
    data = DatasetArrays(samples, cfg.image, vocab, cfg.encoder.seq_len)

    rng = RngState(cfg.seed)
    model = SydesModel(cfg.image, cfg.encoder, vocab.size,
                       decoder_layers=cfg.decoder_layers, decoder_heads=cfg.decoder_heads)
    model.initialize(rng)
    kept_n = round((1.0 - cfg.pretrain.mask_ratio) * cfg.image.patches_per_image)
    print(f"pretraining on {len(samples)} samples, mask ratio "
          f"{cfg.pretrain.mask_ratio} ({kept_n}/{cfg.image.patches_per_image} patches kept)")
    result = run_stage(model, data, cfg.pretrain, rng, out_dir=out, tau=cfg.tau,
                       rec_squared=cfg.rec_squared, entropy_sign=cfg.entropy_sign,
                       meta_extra=_model_meta(cfg, vocab))
    last = result.history[-1]
    print(f"final epoch loss {last['loss']:.6f} "
          f"(rec {last['rec']:.6f}, si {last['si']:.6f}, "
          f"dc {last['dc']:.6f}, itc {last['itc']:.6f})")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_finetune(args) -> int:
    ckpt_cfg, vocab, model, _ = _rebuild_from_checkpoint(args.checkpoint)
    # The checkpoint's embedded config is the base; a config file and flags
    # override it.  Model structure always follows the checkpoint.
    cfg = _load_config(args, base=ckpt_cfg)
    cfg = replace(cfg, image=ckpt_cfg.image, encoder=ckpt_cfg.encoder,
                  decoder_layers=ckpt_cfg.decoder_layers,
                  decoder_heads=ckpt_cfg.decoder_heads)
    task = cfg.task
    out = os.path.join(args.out or cfg.out_dir, task)
    os.makedirs(out, exist_ok=True)
    data = _load_split(cfg, "train", vocab)
    val_path = os.path.join(cfg.data_dir, "val.jsonl")
    val_data = _load_split(cfg, "val", vocab) if os.path.isfile(val_path) else None

    rng = RngState(cfg.seed)
    print(f"fine-tuning task={task} on {len(data)} samples "
          f"(K={TASK_CLASSES[task]}, itc weight {cfg.finetune.weights.itc})")
    result = run_stage(model, data, cfg.finetune, rng, task=task, val_data=val_data,
                       out_dir=out, tau=cfg.tau,
                       meta_extra=_model_meta(cfg, vocab))
    last = result.history[-1]
    line = f"final epoch loss {last['loss']:.6f} (cls {last['cls']:.6f}, itc {last['itc']:.6f})"
    if result.final_metrics is not None:
        line += f"; val macro-F1 {result.final_metrics.macro_f1:.4f}"
    print(line)
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg, vocab, model, meta = _rebuild_from_checkpoint(args.checkpoint)
    if args.data:
        cfg = replace(cfg, data_dir=args.data)
    task = args.task or meta.get("task") or cfg.task
    data = _load_split(cfg, args.split, vocab)
    preds = predict(model, data, task, cfg.tau)
    report = compute_metrics(preds, data.arrays.labels[task], TASK_CLASSES[task])
    print(f"task: {task}  split: {args.split}")
    print(report.format_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"metrics-{task}-{args.split}.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_suite(seed=seed, cases=args.cases)
    for r in results:
        print(r.line())
    if any(not r.passed for r in results):
        raise NumericalError("gradient verification failed")
    return 0


def cmd_reconstruct(args) -> int:
    if not 0.0 < args.mask_ratio < 1.0:
        raise ContractError(f"reconstruct needs a mask ratio in (0, 1), got {args.mask_ratio}")
    cfg, vocab, model, _ = _rebuild_from_checkpoint(args.checkpoint)
    if args.data:
        cfg = replace(cfg, data_dir=args.data)
    out = args.out or os.path.join(cfg.out_dir, "reconstructions")
    os.makedirs(out, exist_ok=True)
    data = _load_split(cfg, args.split, vocab)
    n = min(args.n, len(data))
    batch = data.batch(np.arange(n))
    rng = RngState(args.seed if args.seed is not None else cfg.seed)
    kept, masked = batch_masks(model, batch.sample_ids, 0, args.mask_ratio,
                               rng.split("reconstruct"))
    aux: dict = {}
    model.pretrain_forward(batch, kept, masked, cfg.tau, aux=aux)
    capture: dict = {}
    model.finetune_forward(batch, cfg.task, cfg.tau, capture=capture)
    for i in range(n):
        sid = batch.sample_ids[i]
        path = os.path.join(out, f"triptych-{sid}.ppm")
        export_triptych(path, batch.sub_patches, aux["pixels"], kept, masked,
                        i, n, cfg.image)
        export_attention(out, sid, capture["weights"], i)
    print(f"wrote {n} triptychs and attention grids under {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "reconstruct": cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except SydesError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
