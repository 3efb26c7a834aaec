"""Sub-bag sampling and batch planning.

Every batch holds ``batch_size`` sub-bags. Labels are drawn so that each label
present in a batch owns at least two sub-bags, which guarantees that a triplet
(anchor, positive, negative) of bag representations exists whenever the batch
spans two or more labels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .bags import BagRecord, DatasetManifest

__all__ = [
    "SamplerConfig",
    "SubBag",
    "BatchPlan",
    "SamplingError",
    "sample_subbag",
    "plan_epoch",
    "plan_batches",
    "label_slots",
]


class SamplingError(ValueError):
    """A batch satisfying the sampling conditions cannot be built."""


@dataclass(frozen=True)
class SamplerConfig:
    subbag_size: int = 6
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.subbag_size < 1:
            raise ValueError(f"subbag_size must be >= 1, got {self.subbag_size}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")


@dataclass(frozen=True)
class SubBag:
    source_bag_id: str
    label: str
    crop_ids: tuple[str, ...]


@dataclass(frozen=True)
class BatchPlan:
    subbags: tuple[SubBag, ...]

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.subbags]

    def to_json(self) -> list[dict]:
        return [
            {"source_bag_id": s.source_bag_id, "label": s.label, "crop_ids": list(s.crop_ids)}
            for s in self.subbags
        ]

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def sample_subbag(bag: BagRecord, subbag_size: int, rng: np.random.Generator) -> SubBag:
    """Draw ``subbag_size`` crops from ``bag``.

    Large bags are sampled without replacement. Small bags are oversampled in
    a balanced way: each crop appears ``subbag_size // len(bag)`` times, and
    the remainder is a without-replacement draw, so counts differ by at most 1.
    """
    n = len(bag.crop_ids)
    if n == 0:
        raise SamplingError(f"bag {bag.bag_id!r} is empty")
    if n >= subbag_size:
        idx = rng.choice(n, size=subbag_size, replace=False)
    else:
        reps, rest = divmod(subbag_size, n)
        idx = np.concatenate([np.tile(np.arange(n), reps), rng.choice(n, size=rest, replace=False)])
        rng.shuffle(idx)
    return SubBag(bag.bag_id, bag.label, tuple(bag.crop_ids[i] for i in idx))


def label_slots(batch_size: int, num_labels: int) -> list[int]:
    """Sub-bag counts per chosen label: two each, leftovers spread round-robin."""
    n_chosen = min(batch_size // 2, num_labels)
    slots = [2] * n_chosen
    for i in range(batch_size - 2 * n_chosen):
        slots[i % n_chosen] += 1
    return slots


def plan_epoch(m: DatasetManifest, cfg: SamplerConfig, epoch: int = 0) -> Iterator[BatchPlan]:
    """Yield the batches of one epoch.

    An epoch ends once every bag has been the source of at least one sub-bag.
    Labels whose bags are still uncovered are preferred when filling a batch,
    and within a label uncovered bags are used before random repeats. The
    generator is seeded by ``(cfg.seed, epoch)``.
    """
    by_label = m.bags_by_label()
    if len(by_label) < 2:
        raise SamplingError(f"dataset has {len(by_label)} label(s); at least 2 are needed for negatives")
    labels = sorted(by_label)
    rng = np.random.default_rng([cfg.seed, epoch])
    slots = label_slots(cfg.batch_size, len(labels))

    pending: dict[str, list[BagRecord]] = {}
    for lab in labels:
        bags = by_label[lab]
        pending[lab] = [bags[i] for i in rng.permutation(len(bags))]
    # uncovered labels are visited in a random order
    queue = [labels[i] for i in rng.permutation(len(labels))]

    while queue:
        chosen = queue[: len(slots)]
        if len(chosen) < len(slots):
            others = [lab for lab in labels if lab not in chosen]
            fill = rng.choice(len(others), size=len(slots) - len(chosen), replace=False)
            chosen = chosen + [others[i] for i in sorted(fill)]
        subbags: list[SubBag] = []
        for lab, count in zip(chosen, slots):
            todo = pending[lab]
            bags = by_label[lab]
            for _ in range(count):
                bag = todo.pop(0) if todo else bags[rng.integers(len(bags))]
                subbags.append(sample_subbag(bag, cfg.subbag_size, rng))
        queue = [lab for lab in queue if pending[lab]]
        yield BatchPlan(tuple(subbags))


def plan_batches(m: DatasetManifest, cfg: SamplerConfig, epochs: int | None = 1) -> Iterator[BatchPlan]:
    """Stream batches over ``epochs`` epochs (forever if ``epochs`` is None)."""
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from plan_epoch(m, cfg, epoch)
        epoch += 1

