"""The CMIL optimization loop, a per-crop baseline, and training log I/O."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .bags import DatasetManifest, validate_manifest
from .config import TrainConfig
from .data import CropStore
from .evaluation import EvalSplit, evaluate
from .losses import LossConfig, alignment_loss, identity_loss, total_loss
from .models import CMILModel
from .sampling import BatchPlan, plan_epoch

__all__ = [
    "TrainLogRow",
    "TrainingError",
    "train",
    "train_crop_baseline",
    "batch_tensors",
    "log_alignment",
    "write_log_csv",
    "read_log_csv",
    "LOG_HEADER",
]

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "step", "total", "triplet", "ce", "align", "val_rank1", "wall_time")


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    total: float
    triplet: float
    ce: float
    align: float
    val_rank1: float | None = None
    wall_time: float = 0.0


def batch_tensors(plan: BatchPlan, store: CropStore, class_of: dict[str, int]):
    """Crop tensor (B, S, *input_shape), sub-bag labels and class indices for one plan."""
    idx = np.stack([store.indices(sb.crop_ids) for sb in plan.subbags])
    x = torch.from_numpy(store.x[idx])
    labels = plan.labels
    classes = torch.tensor([class_of[lab] for lab in labels])
    return x, labels, classes


def log_alignment(model: CMILModel, x: torch.Tensor, cfg: LossConfig) -> float:
    """Batch-mean alignment loss for sub-bag crops ``x``; independent of ``cfg.gamma``."""
    with torch.no_grad():
        z, r, _ = model(x)
        return float(alignment_loss(r, z, cfg.m_align, cfg.distance).mean())


def _set_frozen(params: Iterable[torch.nn.Parameter], frozen: bool) -> None:
    for p in params:
        p.requires_grad_(not frozen)


class _Validator:
    """Tracks best val rank-1, the matching parameters, and patience."""

    def __init__(self, split: EvalSplit | None, distance: str, patience: int):
        self.split = split
        self.distance = distance
        self.patience = patience
        self.best = -math.inf
        self.best_state = None
        self.stale = 0

    def __call__(self, model: CMILModel) -> float | None:
        if self.split is None:
            return None
        rank1 = evaluate(self.split, model, self.distance).rank1
        if rank1 > self.best:
            self.best, self.stale = rank1, 0
            self.best_state = copy.deepcopy(model.state_dict())
        else:
            self.stale += 1
        return rank1

    @property
    def should_stop(self) -> bool:
        return self.split is not None and self.stale >= self.patience

    def restore_best(self, model: CMILModel) -> None:
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


def _check_inputs(manifest: DatasetManifest, cfg: TrainConfig) -> None:
    problems = validate_manifest(manifest)
    if problems:
        raise TrainingError("invalid training manifest: " + "; ".join(problems[:5]))
    if any(c.true_identity is not None for c in manifest.crops):
        # true identities are diagnostics only; nothing below reads them
        log.debug("manifest carries true_identity fields; training ignores them")


def train(
    manifest: DatasetManifest,
    val_split: EvalSplit | None,
    cfg: TrainConfig,
    *,
    data_root=None,
    store: CropStore | None = None,
    on_step: Callable[[TrainLogRow, CMILModel], None] | None = None,
) -> tuple[CMILModel, list[TrainLogRow]]:
    """Optimize extractor, accumulator and classifier on weakly labeled bags.

    Every step samples one batch of sub-bags, embeds all their crops, pools
    each sub-bag, and takes one plain SGD step on
    ``alpha*triplet + beta*ce + gamma*align``. The extractor is frozen for the
    first ``cfg.fixbase_epochs`` epochs. With a validation split the model is
    scored (rank-1) after every epoch, the best parameters are returned, and
    training stops after ``early_stop_patience`` epochs without improvement.
    """
    _check_inputs(manifest, cfg)
    store = store or CropStore(manifest, data_root, cfg.extractor.input_shape)
    labels = sorted({b.label for b in manifest.bags})
    class_of = {lab: i for i, lab in enumerate(labels)}
    model = CMILModel(cfg.extractor, cfg.accumulator, len(labels), seed=cfg.seed)
    model.labels = labels
    groups = model.groups()
    opt = torch.optim.SGD([p for g in groups.values() for p in g], lr=cfg.learning_rate)
    validator = _Validator(val_split, cfg.losses.distance, cfg.early_stop_patience)

    rows: list[TrainLogRow] = []
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        _set_frozen(groups["theta"], epoch < cfg.fixbase_epochs)
        model.train()
        for plan in plan_epoch(manifest, cfg.sampler, epoch):
            x, sub_labels, classes = batch_tensors(plan, store, class_of)
            opt.zero_grad(set_to_none=True)
            z, r, probs = model(x)
            report = total_loss(r, z, probs, sub_labels, classes, cfg.losses)
            if not torch.isfinite(report.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}: {report.as_floats()}; "
                    f"try a smaller learning rate (now {cfg.learning_rate})"
                )
            report.total.backward()
            opt.step()
            row = TrainLogRow(epoch, step, **report.as_floats(), wall_time=time.perf_counter() - start)
            rows.append(row)
            if on_step is not None:
                on_step(row, model)
            step += 1
        model.eval()
        rank1 = validator(model)
        if rows and rows[-1].epoch == epoch:
            rows[-1].val_rank1 = rank1
        log.info("epoch %d: loss %.4f val rank-1 %s", epoch, rows[-1].total if rows else float("nan"), rank1)
        if validator.should_stop:
            log.info("early stop after epoch %d (best rank-1 %.4f)", epoch, validator.best)
            break
    _set_frozen(groups["theta"], False)
    validator.restore_best(model)
    return model, rows


def train_crop_baseline(
    manifest: DatasetManifest,
    val_split: EvalSplit | None,
    cfg: TrainConfig,
    *,
    data_root=None,
    store: CropStore | None = None,
) -> tuple[CMILModel, list[TrainLogRow]]:
    """Naive baseline: every crop inherits its bag label, trained with per-crop cross entropy.

    Uses the same extractor, classifier head, optimizer, learning rate and
    crops-per-step budget as :func:`train`; no bag pooling, no triplets.
    """
    _check_inputs(manifest, cfg)
    store = store or CropStore(manifest, data_root, cfg.extractor.input_shape)
    labels = sorted({b.label for b in manifest.bags})
    class_of = {lab: i for i, lab in enumerate(labels)}
    bag_label = {b.bag_id: b.label for b in manifest.bags}
    y = torch.tensor([class_of[bag_label[c.bag_id]] for c in manifest.crops])
    x_all = torch.from_numpy(store.x)

    model = CMILModel(cfg.extractor, cfg.accumulator, len(labels), seed=cfg.seed)
    model.labels = labels
    groups = model.groups()
    opt = torch.optim.SGD(groups["theta"] + groups["psi"], lr=cfg.learning_rate)
    validator = _Validator(val_split, cfg.losses.distance, cfg.early_stop_patience)
    per_step = cfg.sampler.batch_size * cfg.sampler.subbag_size
    rng = np.random.default_rng(cfg.sampler.seed)

    rows: list[TrainLogRow] = []
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        _set_frozen(groups["theta"], epoch < cfg.fixbase_epochs)
        order = rng.permutation(len(y))
        for lo in range(0, len(order), per_step):
            idx = torch.from_numpy(order[lo:lo + per_step])
            opt.zero_grad(set_to_none=True)
            probs = torch.softmax(model.classifier(model.embed(x_all[idx])), dim=-1)
            loss = identity_loss(probs, y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite baseline loss at epoch {epoch} step {step}")
            loss.backward()
            opt.step()
            v = float(loss.detach())
            rows.append(TrainLogRow(epoch, step, v, 0.0, v, float("nan"), None, time.perf_counter() - start))
            step += 1
        rank1 = validator(model)
        if rows:
            rows[-1].val_rank1 = rank1
        if validator.should_stop:
            break
    _set_frozen(groups["theta"], False)
    validator.restore_best(model)
    return model, rows


# ---------------------------------------------------------------------------
# log files
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_log_csv(rows: Sequence[TrainLogRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in rows:
            w.writerow([_fmt(getattr(row, name)) for name in LOG_HEADER])


def read_log_csv(path: str | Path) -> list[TrainLogRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_HEADER:
            raise ValueError(f"{path}: expected header {','.join(LOG_HEADER)}, got {reader.fieldnames}")
        out = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                out.append(
                    TrainLogRow(
                        epoch=int(rec["epoch"]),
                        step=int(rec["step"]),
                        total=float(rec["total"]),
                        triplet=float(rec["triplet"]),
                        ce=float(rec["ce"]),
                        align=float(rec["align"]),
                        val_rank1=float(rec["val_rank1"]) if rec["val_rank1"] else None,
                        wall_time=float(rec["wall_time"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed log row ({exc})") from exc
    return out
