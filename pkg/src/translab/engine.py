"""Training, evaluation and ablation drivers."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import random
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from translab.boundary import DEFAULT_THICKNESS
from translab.datasets import (SegmentationDataset, decode_mask, load_image,
                               load_manifest, normalize_image, resize_pair)
from translab.losses import BOUNDARY_LOSSES, LossConfig, total_loss
from translab.metrics import ConfusionState, report
from translab.model import ABLATION_LEVELS, ModelConfig, TransLab

logger = logging.getLogger(__name__)

DEVICE_ENV = "TRANSLAB_DEVICE"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 16
    batch_size: int = 8
    poly_power: float = 0.9
    input_size: int = 512
    seed: int = 0
    device_count: int = 1
    iterations: int | None = None  # overrides epochs * steps_per_epoch when set
    thickness: int = DEFAULT_THICKNESS
    hflip: bool = False
    num_workers: int = 0
    keep_checkpoints: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("base_lr", "poly_power"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("epochs", "batch_size", "device_count", "input_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.input_size % 16:
            raise ValueError(f"input_size must be divisible by 16, got {self.input_size}")
        if self.loss.boundary_loss != "none" and not self.model.boundary_stream_enabled:
            raise ValueError("a boundary loss needs boundary_stream_enabled")

    @property
    def effective_batch_size(self):
        return self.batch_size * self.device_count

    def to_flat(self):
        flat = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if f.name not in ("loss", "model")}
        flat.update(self.loss.to_dict())
        flat.update(self.model.to_dict())
        return flat


_KEY_ALIASES = {"lambda": "lam", "lr": "base_lr", "wd": "weight_decay"}


def config_from_flat(values, base=None):
    """Build a TrainConfig from flat key/value pairs over all three config types."""
    base = base or TrainConfig()
    groups = {"train": {}, "loss": base.loss.to_dict(), "model": base.model.to_dict()}
    groups["train"] = {k: v for k, v in base.to_flat().items()
                       if k in {f.name for f in dataclasses.fields(TrainConfig)}}
    owners = {f.name: "train" for f in dataclasses.fields(TrainConfig)}
    owners.update({f.name: "loss" for f in dataclasses.fields(LossConfig)})
    owners.update({f.name: "model" for f in dataclasses.fields(ModelConfig)})
    for key, value in values.items():
        key = _KEY_ALIASES.get(key, key)
        if key not in owners or key in ("loss", "model"):
            raise ValueError(f"unknown config key {key!r}")
        groups[owners[key]][key] = value
    groups["train"].pop("loss", None)
    groups["train"].pop("model", None)
    return TrainConfig(loss=LossConfig(**groups["loss"]),
                       model=ModelConfig(**groups["model"]), **groups["train"])


def poly_lr(iteration, max_iter, base_lr=0.02, power=0.9):
    """``base_lr * (1 - iteration / max_iter) ** power``."""
    if max_iter <= 0:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1 - iteration / max_iter) ** power


def select_device():
    name = os.environ.get(DEVICE_ENV)
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def param_groups(model, weight_decay):
    """Weight decay on conv/linear weights only."""
    decay, no_decay = [], []
    for p in model.parameters():
        if p.requires_grad:
            (decay if p.dim() > 1 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


def build_optimizer(model, config):
    return torch.optim.SGD(param_groups(model, config.weight_decay), lr=config.base_lr,
                           momentum=config.momentum)


def save_checkpoint(path, model, optimizer, config, iteration, epoch):
    torch.save({
        "config": config.to_flat(),
        "iteration": iteration,
        "epoch": epoch,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }, path)


def load_checkpoint(path, device="cpu"):
    """Return ``(model, config, checkpoint_dict)``."""
    ckpt = torch.load(path, map_location=device, weights_only=False)
    config = config_from_flat(ckpt["config"])
    model_cfg = dataclasses.replace(config.model, pretrained=False)
    model = TransLab(model_cfg).to(device)
    model.load_state_dict(ckpt["model"])
    return model, config, ckpt


def _epoch_batches(n, batch_size, seed, epoch):
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    order = torch.randperm(n, generator=g).tolist()
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    checkpoint: Path
    log: list
    model: TransLab
    config: TrainConfig


def train(config, dataset_root, out_dir, resume=None, records=None, device=None,
          progress=False):
    """Run SGD with per-iteration poly decay; returns a TrainResult.

    Writes ``train_log.jsonl`` and ``checkpoint.pt`` (every epoch) into
    ``out_dir``; with ``keep_checkpoints`` each epoch is also kept as
    ``epoch_XXX.pt``.
    """
    config.validate()
    device = device or select_device()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)

    records = records if records is not None else load_manifest(dataset_root, "train")
    if not records:
        raise TrainingError(f"no training records under {dataset_root}")
    dataset = SegmentationDataset(records, config.input_size, config.thickness,
                                  hflip=config.hflip, seed=config.seed)
    batch = config.effective_batch_size
    steps_per_epoch = -(-len(dataset) // batch)
    max_iter = config.iterations or config.epochs * steps_per_epoch
    n_epochs = -(-max_iter // steps_per_epoch)

    model = TransLab(config.model).to(device)
    optimizer = build_optimizer(model, config)
    iteration, start_epoch = 0, 0
    if resume is not None:
        ckpt = torch.load(resume, map_location=device, weights_only=False)
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        iteration, start_epoch = ckpt["iteration"], ckpt["epoch"]
        logger.info("resumed from %s at epoch %d, iteration %d", resume, start_epoch, iteration)

    log_path = out_dir / "train_log.jsonl"
    log = []
    ckpt_path = out_dir / "checkpoint.pt"
    model.train()
    with open(log_path, "a" if resume else "w") as log_file:
        for epoch in range(start_epoch, n_epochs):
            dataset.epoch = epoch
            loader = DataLoader(dataset, batch_sampler=_epoch_batches(len(dataset), batch,
                                                                      config.seed, epoch),
                                num_workers=config.num_workers)
            for sample in loader:
                if iteration >= max_iter:
                    break
                lr = poly_lr(iteration, max_iter, config.base_lr, config.poly_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                image = sample["image"].to(device)
                out = model(image)
                loss, parts = total_loss(out.seg_logits, out.boundary_logits,
                                         sample["mask"].to(device),
                                         sample["boundary"].to(device), config.loss)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss.item()} at iteration {iteration}, epoch "
                        f"{epoch}; batch indices {sample['index'].tolist()} "
                        f"({[str(records[i].image_path) for i in sample['index'].tolist()]})")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                entry = {"iter": iteration, "lr": lr, **parts, "epoch": epoch}
                log.append(entry)
                log_file.write(json.dumps(entry) + "\n")
                iteration += 1
                if progress:
                    print(f"\r[epoch {epoch} iter {iteration}/{max_iter}] "
                          f"loss {parts['loss']:.4f}", end="", file=sys.stderr)
            save_checkpoint(ckpt_path, model, optimizer, config, iteration, epoch + 1)
            if config.keep_checkpoints:
                save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.pt", model, optimizer,
                                config, iteration, epoch + 1)
    if progress:
        print(file=sys.stderr)
    return TrainResult(ckpt_path, log, model, config)


@torch.no_grad()
def predict_image(model, image, input_size, device=None):
    """Class-id map and boundary probability for one uint8 RGB image, at its own size."""
    device = device or next(model.parameters()).device
    h, w = image.shape[:2]
    resized, _ = resize_pair(image, None, input_size)
    out = model(normalize_image(resized)[None].to(device))
    labels = out.seg_logits.argmax(1, keepdim=True).float()
    labels = F.interpolate(labels, size=(h, w), mode="nearest")[0, 0].to(torch.uint8)
    boundary = None
    if out.boundary_logits is not None:
        boundary = torch.sigmoid(F.interpolate(out.boundary_logits, size=(h, w),
                                               mode="bilinear", align_corners=False))[0, 0]
        boundary = boundary.cpu().numpy()
    return labels.cpu().numpy(), boundary


def evaluate_model(model, records, input_size):
    was_training = model.training
    model.eval()
    states = {}
    try:
        for rec in records:
            gt = decode_mask(rec.mask_path)
            pred, _ = predict_image(model, load_image(rec.image_path), input_size)
            states.setdefault(rec.difficulty, ConfusionState()).update(pred, gt)
    finally:
        model.train(was_training)
    return report(states)


def evaluate(checkpoint, dataset_root, split, device=None, input_size=None):
    """MetricReports for all/easy/hard of ``split`` using a trained checkpoint."""
    device = device or select_device()
    model, config, _ = load_checkpoint(checkpoint, device)
    records = load_manifest(dataset_root, split)
    return evaluate_model(model, records, input_size or config.input_size)


# ---------------------------------------------------------------------------
# ablations

ABLATION_SPECS = ("boundary_loss_sweep", "bam_level_sweep")
ABLATION_COLUMNS = ("variant", "n_seeds", "miou", "acc", "mber", "mae", "miou_all")


def ablation_variants(spec, base_config, attend_in_loss_sweep=False):
    """``[(name, TrainConfig)]`` ordered from the plain baseline to the full model."""
    variants = []
    if spec == "boundary_loss_sweep":
        for kind in BOUNDARY_LOSSES:
            enabled = kind != "none"
            levels = base_config.model.bam_levels if (enabled and attend_in_loss_sweep) else ()
            model = dataclasses.replace(base_config.model, boundary_stream_enabled=enabled,
                                        bam_levels=levels)
            loss = dataclasses.replace(base_config.loss, boundary_loss=kind)
            variants.append(("-" if kind == "none" else kind,
                             dataclasses.replace(base_config, model=model, loss=loss)))
    elif spec == "bam_level_sweep":
        for name, levels in ABLATION_LEVELS.items():
            model = dataclasses.replace(base_config.model, boundary_stream_enabled=True,
                                        bam_levels=levels)
            loss = dataclasses.replace(base_config.loss, boundary_loss="dice")
            variants.append((name, dataclasses.replace(base_config, model=model, loss=loss)))
    else:
        raise ValueError(f"unknown ablation spec {spec!r}; expected one of {ABLATION_SPECS}")
    return variants


@dataclass
class AblationRow:
    variant: str
    reports: list  # one report dict per seed

    def mean(self, metric, split="hard"):
        vals = [getattr(r[split], metric) for r in self.reports]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv_row(self, split="hard"):
        return {"variant": self.variant, "n_seeds": len(self.reports),
                "miou": self.mean("miou", split), "acc": self.mean("acc", split),
                "mber": self.mean("mber", split), "mae": self.mean("mae", split),
                "miou_all": self.mean("miou", "all")}


def run_ablation(spec, base_config, dataset_root, seeds=(0,), eval_split="validation",
                 work_dir=None, out_csv=None, attend_in_loss_sweep=False, progress=False):
    """Train every variant of ``spec`` for each seed and score it on ``eval_split``."""
    variants = ablation_variants(spec, base_config, attend_in_loss_sweep)
    train_records = load_manifest(dataset_root, "train")
    eval_records = load_manifest(dataset_root, eval_split)
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        work_dir = Path(work_dir or tmp)
        for name, cfg in variants:
            reports = []
            for seed in seeds:
                run_cfg = dataclasses.replace(cfg, seed=seed)
                safe = name.replace("&", "_").replace("+", "_") if name != "-" else "none"
                result = train(run_cfg, dataset_root, work_dir / f"{safe}_seed{seed}",
                               records=train_records, progress=progress)
                reports.append(evaluate_model(result.model, eval_records, run_cfg.input_size))
                logger.info("%s seed %d: miou(all)=%.2f", name, seed, reports[-1]["all"].miou)
            rows.append(AblationRow(name, reports))
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows


def write_ablation_csv(rows, out, split="hard"):
    close = False
    if isinstance(out, (str, Path)):
        out, close = open(out, "w", newline=""), True
    try:
        writer = csv.DictWriter(out, fieldnames=list(ABLATION_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v)
                             for k, v in row.to_csv_row(split).items()})
    finally:
        if close:
            out.close()
