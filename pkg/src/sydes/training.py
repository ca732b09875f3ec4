"""Two-stage training: AdamW with decoupled decay, linear-warmup cosine
schedule, per-component learning rates, and component freezing.

Pretraining wires the masked-reconstruction losses and keeps the text-side
decoder and heads frozen; fine-tuning wires classification plus the
contrastive term and keeps the vision side frozen.  Frozen parameters are
excluded from the optimizer entirely, so their values stay bit-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import save_checkpoint
from .data import DatasetArrays
from .errors import ConfigError, ContractError, NumericalError
from .imaging import sample_mask
from .losses import LossWeights, cls_loss, finetune_loss, pretrain_loss
from .metrics import MetricReport, compute_metrics
from .model import N_SUBS, TASK_CLASSES, SydesModel, group_major_masks
from .tensor import Parameter, RngState

PRETRAIN_FROZEN = ("text_decoder", "heads")
FINETUNE_FROZEN = ("image_encoder", "image_decoder", "aggregator")


@dataclass(frozen=True)
class StageConfig:
    """Everything that defines one training stage.

    ``lrs`` maps component prefixes to base learning rates; ``frozen`` lists
    component prefixes excluded from optimization.  Every trainable
    parameter must fall under exactly one ``lrs`` prefix.
    """

    stage: str
    mask_ratio: float
    weights: LossWeights
    lrs: dict[str, float]
    warmup_frac: float
    epochs: int
    batch_size: int
    frozen: tuple[str, ...]
    lr_floor_frac: float = 0.01

    @classmethod
    def pretrain_defaults(cls, epochs: int = 30, batch_size: int = 8) -> "StageConfig":
        """Reference pretraining stage: mask ratio 0.75, 15% warmup, loss
        weights (1, 0.5, 0.025, 0.5), component LRs 5e-6 / 5e-5 / 1e-4.
        The aggregator trains in this stage and shares the decoder rate."""
        return cls(
            stage="pretrain",
            mask_ratio=0.75,
            weights=LossWeights.pretrain_defaults(),
            lrs={"image_encoder": 5e-6,
                 "text_encoder": 5e-5,
                 "image_decoder": 1e-4,
                 "aggregator": 1e-4},
            warmup_frac=0.15,
            epochs=epochs,
            batch_size=batch_size,
            frozen=PRETRAIN_FROZEN,
        )

    @classmethod
    def finetune_defaults(cls, epochs: int = 30, batch_size: int = 8) -> "StageConfig":
        """Reference fine-tuning stage: mask ratio 0, 10% warmup, loss
        weights (cls=1, itc=0.4), component LRs 1e-4 / 2e-4 / 1e-4.  The
        ``heads`` rate covers the active task's head; inactive heads are
        frozen by ``run_stage``."""
        return cls(
            stage="finetune",
            mask_ratio=0.0,
            weights=LossWeights.finetune_defaults(),
            lrs={"text_encoder": 1e-4,
                 "text_decoder": 2e-4,
                 "heads": 1e-4},
            warmup_frac=0.10,
            epochs=epochs,
            batch_size=batch_size,
            frozen=FINETUNE_FROZEN,
        )

    def with_weights(self, **kwargs) -> "StageConfig":
        return replace(self, weights=replace(self.weights, **kwargs))


def cosine_lr(step: int, total_steps: int, base: float, warmup_frac: float,
              floor_frac: float = 0.01) -> float:
    """Linear warmup to ``base``, then half-cosine decay to the floor.

    lr(0) = base / warmup_steps; the peak sits at the end of warmup; the
    last step lands exactly on the floor.
    """
    if step < 0:
        raise ContractError(f"negative step {step}")
    warmup_steps = max(1, round(warmup_frac * total_steps))
    if step < warmup_steps:
        return base * (step + 1) / warmup_steps
    floor = base * floor_frac
    if total_steps <= warmup_steps:
        return base
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return floor + (base - floor) * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments.

    Moments exist only for the parameters handed in (the unfrozen set).
    """

    def __init__(self, groups: list[tuple[str, list[Parameter], float]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for _, params, _ in groups:
            for p in params:
                if p.frozen:
                    raise ContractError(f"frozen parameter {p.name} handed to the optimizer")
                self.m[p.name] = np.zeros(p.shape)
                self.v[p.name] = np.zeros(p.shape)

    def step(self, lr_factor: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for _, params, base_lr in self.groups:
            lr = base_lr * lr_factor
            for p in params:
                g = p.grad if p.grad is not None else np.zeros(p.shape)
                m = self.m[p.name] = b1 * self.m[p.name] + (1.0 - b1) * g
                v = self.v[p.name] = b2 * self.v[p.name] + (1.0 - b2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data = p.data - lr * (update + self.weight_decay * p.data)


def component_of(name: str, prefixes) -> str | None:
    """Longest prefix in ``prefixes`` owning the dotted parameter name."""
    best = None
    for prefix in prefixes:
        if name == prefix or name.startswith(prefix + "."):
            if best is None or len(prefix) > len(best):
                best = prefix
    return best


def apply_freeze(model: SydesModel, frozen: tuple[str, ...]) -> None:
    model.assign_names()
    for name, p in model.named_parameters():
        p.frozen = component_of(name, frozen) is not None


def build_optimizer(model: SydesModel, cfg: StageConfig) -> AdamW:
    groups: dict[str, list[Parameter]] = {prefix: [] for prefix in cfg.lrs}
    for name, p in model.named_parameters():
        if p.frozen:
            continue
        prefix = component_of(name, cfg.lrs)
        if prefix is None:
            raise ConfigError(f"no learning rate covers trainable parameter {name}")
        groups[prefix].append(p)
    return AdamW([(prefix, params, cfg.lrs[prefix])
                  for prefix, params in groups.items() if params])


def batch_masks(model: SydesModel, sample_ids: list[str], epoch: int,
                mask_ratio: float, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    """Fresh per-sample, per-sub-image masks; streams are split per sample
    id so the draw is independent of batch composition."""
    p = model.image_cfg.patches_per_image
    specs = [[sample_mask(p, mask_ratio, rng.split(f"mask/e{epoch}/{sid}/n{n}"))
              for n in range(N_SUBS)] for sid in sample_ids]
    return group_major_masks(specs)


def full_masks(model: SydesModel, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    p = model.image_cfg.patches_per_image
    kept = np.broadcast_to(np.arange(p, dtype=np.int64), (N_SUBS * batch_size, p)).copy()
    masked = np.zeros((N_SUBS * batch_size, 0), dtype=np.int64)
    return kept, masked


@dataclass
class StageResult:
    history: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None
    log_path: str | None = None
    final_metrics: MetricReport | None = None


def _check_finite(parts: dict, epoch: int, step: int) -> None:
    for name, value in parts.items():
        if not np.isfinite(value.data).all():
            raise NumericalError(f"non-finite {name} loss at epoch {epoch} step {step}")


def predict(model: SydesModel, data: DatasetArrays, task: str, tau: float,
            batch_size: int = 32) -> np.ndarray:
    """Greedy class predictions over a dataset (no gradient bookkeeping)."""
    preds = []
    n = len(data)
    for start in range(0, n, batch_size):
        index = np.arange(start, min(start + batch_size, n))
        logits, _ = model.finetune_forward(data.batch(index), task, tau)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def run_stage(model: SydesModel, data: DatasetArrays, cfg: StageConfig,
              rng: RngState, *, task: str | None = None,
              val_data: DatasetArrays | None = None, out_dir: str | None = None,
              tau: float = 0.07, rec_squared: bool = True,
              entropy_sign: float = 1.0, checkpoint_every: int = 0,
              meta_extra: dict | None = None) -> StageResult:
    """Train one stage over ``data``.

    Pretraining ignores ``task``; fine-tuning requires it and, when
    ``val_data`` is given, reports validation metrics every epoch.  Writes
    ``{stage}-epoch{N}.ckpt`` and ``{stage}-log.csv`` under ``out_dir``.
    """
    if cfg.stage not in ("pretrain", "finetune"):
        raise ConfigError(f"unknown stage {cfg.stage!r}")
    if cfg.stage == "finetune" and task is None:
        raise ConfigError("fine-tuning requires a task")

    frozen = cfg.frozen
    if cfg.stage == "finetune":
        # Only the active task's head trains; the others stay untouched.
        frozen = frozen + tuple(f"heads.{t}" for t in TASK_CLASSES if t != task)
    apply_freeze(model, frozen)
    opt = build_optimizer(model, cfg)
    stage_rng = rng.split(cfg.stage if task is None else f"{cfg.stage}/{task}")

    n = len(data)
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    result = StageResult()
    log_lines: list[str] = []

    part_names = (("rec", "si", "dc", "itc") if cfg.stage == "pretrain"
                  else ("cls", "itc"))
    lr_names = sorted(cfg.lrs)
    header = ["epoch", "loss", *part_names, *(f"lr_{g}" for g in lr_names)]
    if cfg.stage == "finetune" and val_data is not None:
        header += ["val_precision", "val_recall", "val_macro_f1", "val_accuracy"]
    log_lines.append(",".join(header))

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = stage_rng.split(f"shuffle/e{epoch}").permutation(n)
        sums = {name: 0.0 for name in ("loss", *part_names)}
        lr_factor = 0.0
        for b in range(n_batches):
            index = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = data.batch(index)
            if cfg.stage == "pretrain":
                kept, masked = batch_masks(model, batch.sample_ids, epoch,
                                           cfg.mask_ratio, stage_rng)
                parts = model.pretrain_forward(batch, kept, masked, tau,
                                               rec_squared=rec_squared,
                                               entropy_sign=entropy_sign)
                _check_finite(parts, epoch, step)
                total = pretrain_loss(parts, cfg.weights)
            else:
                logits, parts = model.finetune_forward(batch, task, tau)
                parts["cls"] = cls_loss(logits, batch.labels[task],
                                        sample_ids=batch.sample_ids)
                _check_finite(parts, epoch, step)
                total = finetune_loss(parts, cfg.weights)
            if not np.isfinite(total.data).all():
                raise NumericalError(f"non-finite total loss at epoch {epoch} step {step}")

            model.zero_grad()
            total.backward()
            lr_factor = cosine_lr(step, total_steps, 1.0, cfg.warmup_frac,
                                  cfg.lr_floor_frac)
            opt.step(lr_factor)
            step += 1
            sums["loss"] += total.item() * len(index)
            for name in part_names:
                sums[name] += parts[name].item() * len(index)

        record = {"epoch": epoch}
        record.update({name: sums[name] / n for name in ("loss", *part_names)})
        record.update({f"lr_{g}": cfg.lrs[g] * lr_factor for g in lr_names})
        if cfg.stage == "finetune" and val_data is not None:
            report = compute_metrics(predict(model, val_data, task, tau),
                                     val_data.arrays.labels[task], TASK_CLASSES[task])
            record.update({"val_precision": report.precision,
                           "val_recall": report.recall,
                           "val_macro_f1": report.macro_f1,
                           "val_accuracy": report.accuracy})
            result.final_metrics = report
        result.history.append(record)
        log_lines.append(",".join(_format_field(record[h]) for h in header))

        if out_dir and (epoch == cfg.epochs
                        or (checkpoint_every and epoch % checkpoint_every == 0)):
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, f"{cfg.stage}-epoch{epoch}.ckpt")
            meta = {"stage": cfg.stage, "epoch": epoch, "task": task}
            meta.update(meta_extra or {})
            save_checkpoint(path, model, rng, meta)
            result.checkpoint_path = path

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.log_path = os.path.join(out_dir, f"{cfg.stage}-log.csv")
        with open(result.log_path, "w", encoding="utf-8") as f:
            f.write("\n".join(log_lines) + "\n")
    return result


def _format_field(value) -> str:
    if isinstance(value, int):
        return str(value)
    return f"{value:.12g}"
