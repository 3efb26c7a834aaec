"""Weakly labeled bag datasets: records, manifest I/O, validation, noise generation.

A dataset is a set of *bags*; every bag carries a single identity label, but
only some of its crops actually show that identity. Crops reference their data
either by file path or by an inline feature vector.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "CropRecord",
    "BagRecord",
    "DatasetManifest",
    "NoiseSpec",
    "BagStatistics",
    "ManifestError",
    "load_manifest",
    "save_manifest",
    "dumps_manifest",
    "loads_manifest",
    "validate_manifest",
    "generate_synthetic_weak_labels",
    "compute_bag_statistics",
    "split_dataset",
    "strong_manifest_from_vectors",
    "noise_for_factor",
    "factor_for_noise",
]

MAX_DUPLICATION_FACTOR = 10


class ManifestError(ValueError):
    """Raised for unparseable manifests or broken referential integrity."""


@dataclass(frozen=True)
class CropRecord:
    crop_id: str
    source_image_id: str
    bag_id: str
    # either a path string or a tuple of floats
    data_ref: str | tuple[float, ...]
    true_identity: str | None = None
    camera_id: str | None = None

    @property
    def is_vector(self) -> bool:
        return not isinstance(self.data_ref, str)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "crop_id": self.crop_id,
            "source_image_id": self.source_image_id,
            "bag_id": self.bag_id,
            "data_ref": (
                {"path": self.data_ref}
                if isinstance(self.data_ref, str)
                else {"vector": list(self.data_ref)}
            ),
        }
        if self.true_identity is not None:
            out["true_identity"] = self.true_identity
        if self.camera_id is not None:
            out["camera_id"] = self.camera_id
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "CropRecord":
        ref = obj["data_ref"]
        if "path" in ref:
            data_ref: str | tuple[float, ...] = str(ref["path"])
        elif "vector" in ref:
            data_ref = tuple(float(v) for v in ref["vector"])
        else:
            raise ManifestError(
                f"crop {obj.get('crop_id')!r}: data_ref needs 'path' or 'vector'"
            )
        return cls(
            crop_id=str(obj["crop_id"]),
            source_image_id=str(obj["source_image_id"]),
            bag_id=str(obj["bag_id"]),
            data_ref=data_ref,
            true_identity=obj.get("true_identity"),
            camera_id=obj.get("camera_id"),
        )


@dataclass(frozen=True)
class BagRecord:
    bag_id: str
    label: str
    crop_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.crop_ids)

    def to_json(self) -> dict[str, Any]:
        return {"bag_id": self.bag_id, "label": self.label, "crop_ids": list(self.crop_ids)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "BagRecord":
        return cls(str(obj["bag_id"]), str(obj["label"]), tuple(str(c) for c in obj["crop_ids"]))


@dataclass(frozen=True)
class DatasetManifest:
    bags: tuple[BagRecord, ...]
    crops: tuple[CropRecord, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        object.__setattr__(self, "crops", tuple(self.crops))

    @property
    def labels(self) -> list[str]:
        """Distinct bag labels in first-seen order."""
        return list(dict.fromkeys(b.label for b in self.bags))

    @property
    def num_identities(self) -> int:
        return len(set(b.label for b in self.bags))

    def crop_index(self) -> dict[str, CropRecord]:
        return {c.crop_id: c for c in self.crops}

    def bag_index(self) -> dict[str, BagRecord]:
        return {b.bag_id: b for b in self.bags}

    def bags_by_label(self) -> dict[str, list[BagRecord]]:
        out: dict[str, list[BagRecord]] = defaultdict(list)
        for b in self.bags:
            out[b.label].append(b)
        return dict(out)

    def to_json(self) -> dict[str, Any]:
        return {
            "bags": [b.to_json() for b in self.bags],
            "crops": [c.to_json() for c in self.crops],
            "metadata": dict(self.metadata),
        }


@dataclass(frozen=True)
class NoiseSpec:
    """Duplicate every crop ``duplication_factor`` times into wrongly labeled bags."""

    duplication_factor: int
    seed: int = 0

    def __post_init__(self):
        if int(self.duplication_factor) != self.duplication_factor or self.duplication_factor < 1:
            raise ValueError(f"duplication_factor must be an integer >= 1, got {self.duplication_factor}")

    @property
    def target_noise(self) -> float:
        return noise_for_factor(self.duplication_factor)


def noise_for_factor(k: int) -> float:
    return k / (k + 1)


def factor_for_noise(noise: float, max_factor: int = MAX_DUPLICATION_FACTOR, tol: float = 0.01) -> int:
    """Map a noise fraction such as 0.75 or 0.66 to its duplication factor.

    Accepts the nearest k/(k+1) within ``tol`` so that truncated values like
    0.66 resolve to k=2.
    """
    best = min(range(1, max_factor + 1), key=lambda k: abs(noise_for_factor(k) - noise))
    if abs(noise_for_factor(best) - noise) > tol:
        valid = ", ".join(f"{noise_for_factor(k):.4g}" for k in range(1, max_factor + 1))
        raise ValueError(f"noise {noise} is not k/(k+1) for k <= {max_factor}; valid values: {valid}")
    return best


@dataclass(frozen=True)
class BagStatistics:
    num_bags: int
    num_crops: int
    mean_bag_size: float
    min_bag_size: int
    max_bag_size: int
    mean_noise: float | None = None
    per_bag_noise: tuple[float, ...] | None = None


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def dumps_manifest(m: DatasetManifest) -> str:
    return json.dumps(m.to_json(), indent=1, ensure_ascii=False) + "\n"


def loads_manifest(text: str, *, validate: bool = True) -> DatasetManifest:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict) or "bags" not in obj or "crops" not in obj:
        raise ManifestError("manifest must be an object with 'bags' and 'crops' keys")
    try:
        m = DatasetManifest(
            bags=tuple(BagRecord.from_json(b) for b in obj["bags"]),
            crops=tuple(CropRecord.from_json(c) for c in obj["crops"]),
            metadata=obj.get("metadata", {}),
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest record: missing or invalid field {exc}") from exc
    if validate:
        problems = validate_manifest(m)
        if problems:
            raise ManifestError("invalid manifest: " + "; ".join(problems))
    return m


def load_manifest(path: str | Path, *, validate: bool = True) -> DatasetManifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"), validate=validate)


def save_manifest(m: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(dumps_manifest(m), encoding="utf-8")


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_manifest(m: DatasetManifest) -> list[str]:
    """Return a list of human readable invariant violations (empty if valid)."""
    problems: list[str] = []

    crop_counts = Counter(c.crop_id for c in m.crops)
    for cid, n in crop_counts.items():
        if n > 1:
            problems.append(f"crop {cid!r}: crop_id duplicated ({n} records)")
    bag_counts = Counter(b.bag_id for b in m.bags)
    for bid, n in bag_counts.items():
        if n > 1:
            problems.append(f"bag {bid!r}: bag_id duplicated ({n} records)")

    crops = m.crop_index()
    bags = m.bag_index()
    for b in m.bags:
        if not b.label:
            problems.append(f"bag {b.bag_id!r}: empty label")
        if not b.crop_ids:
            problems.append(f"bag {b.bag_id!r}: empty crop_ids")
        dupes = [cid for cid, n in Counter(b.crop_ids).items() if n > 1]
        if dupes:
            problems.append(f"bag {b.bag_id!r}: crop_ids not unique ({', '.join(dupes)})")
        for cid in b.crop_ids:
            c = crops.get(cid)
            if c is None:
                problems.append(f"bag {b.bag_id!r}: references missing crop {cid!r}")
            elif c.bag_id != b.bag_id:
                problems.append(f"crop {cid!r}: listed in bag {b.bag_id!r} but bag_id is {c.bag_id!r}")

    listed = {cid for b in m.bags for cid in b.crop_ids}
    for c in m.crops:
        if c.bag_id not in bags:
            problems.append(f"crop {c.crop_id!r}: bag_id {c.bag_id!r} does not exist")
        elif c.crop_id not in listed:
            problems.append(f"crop {c.crop_id!r}: not listed by its bag {c.bag_id!r}")

    kinds = {c.is_vector for c in m.crops}
    if len(kinds) > 1:
        problems.append("crops mix path and vector data_refs")
    dims = {len(c.data_ref) for c in m.crops if c.is_vector}
    if len(dims) > 1:
        problems.append(f"vector data_refs have inconsistent lengths {sorted(dims)}")
    return problems


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def strong_manifest_from_vectors(
    vectors: np.ndarray,
    identities: Sequence[str],
    *,
    crops_per_bag: int | None = None,
    cameras: Sequence[str] | None = None,
    prefix: str = "",
) -> DatasetManifest:
    """Build a clean manifest from labeled feature vectors.

    Crops of one identity are chunked into bags of ``crops_per_bag`` (one bag
    per identity when None). Every bag label equals the true identity.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    by_id: dict[str, list[int]] = defaultdict(list)
    for i, ident in enumerate(identities):
        by_id[str(ident)].append(i)

    bags: list[BagRecord] = []
    crops: list[CropRecord] = []
    for ident, rows in by_id.items():
        size = crops_per_bag or len(rows)
        for chunk_no, start in enumerate(range(0, len(rows), size)):
            bag_id = f"{prefix}{ident}/b{chunk_no}"
            ids = []
            for i in rows[start:start + size]:
                cid = f"{prefix}c{i}"
                ids.append(cid)
                crops.append(
                    CropRecord(
                        crop_id=cid,
                        source_image_id=f"{prefix}img{i}",
                        bag_id=bag_id,
                        data_ref=tuple(float(v) for v in vectors[i]),
                        true_identity=ident,
                        camera_id=None if cameras is None else str(cameras[i]),
                    )
                )
            bags.append(BagRecord(bag_id, ident, tuple(ids)))
    return DatasetManifest(tuple(bags), tuple(crops), {})


def generate_synthetic_weak_labels(strong: DatasetManifest, spec: NoiseSpec) -> DatasetManifest:
    """Inject bag-level label noise by duplicating crops into wrong bags.

    Every crop stays in its own bag; additionally ``spec.duplication_factor``
    copies of it are placed into bags drawn uniformly from all bags whose
    label differs from the crop's true identity.
    """
    missing = [c.crop_id for c in strong.crops if c.true_identity is None]
    if missing:
        raise ValueError(f"{len(missing)} crops lack true_identity (first: {missing[0]!r})")
    labels = np.array([b.label for b in strong.bags])
    if len(set(labels.tolist())) < 2:
        raise ValueError("need at least 2 distinct bag labels to place duplicates in wrong bags")

    rng = np.random.default_rng(spec.seed)
    k = spec.duplication_factor
    candidates: dict[str, np.ndarray] = {}
    extra: list[list[str]] = [[] for _ in strong.bags]
    new_crops: list[CropRecord] = list(strong.crops)

    for c in strong.crops:
        cand = candidates.get(c.true_identity)
        if cand is None:
            cand = candidates[c.true_identity] = np.flatnonzero(labels != c.true_identity)
        picks = cand[rng.integers(0, len(cand), size=k)]
        for n, bag_pos in enumerate(picks, start=1):
            target = strong.bags[bag_pos]
            dup = CropRecord(
                crop_id=f"{c.crop_id}#dup{n}",
                source_image_id=c.source_image_id,
                bag_id=target.bag_id,
                data_ref=c.data_ref,
                true_identity=c.true_identity,
                camera_id=c.camera_id,
            )
            new_crops.append(dup)
            extra[bag_pos].append(dup.crop_id)

    bags = tuple(
        BagRecord(b.bag_id, b.label, b.crop_ids + tuple(more)) for b, more in zip(strong.bags, extra)
    )
    meta = dict(strong.metadata)
    meta.update({"duplication_factor": k, "noise_seed": spec.seed, "target_noise": spec.target_noise})
    return DatasetManifest(bags, tuple(new_crops), meta)


def compute_bag_statistics(m: DatasetManifest) -> BagStatistics:
    sizes = np.array([len(b) for b in m.bags], dtype=np.int64)
    if sizes.size == 0:
        return BagStatistics(0, len(m.crops), 0.0, 0, 0)
    crops = m.crop_index()
    mean_noise = per_bag = None
    if m.crops and all(c.true_identity is not None for c in m.crops):
        per_bag = tuple(
            float(np.mean([crops[cid].true_identity != b.label for cid in b.crop_ids])) for b in m.bags
        )
        wrong = sum(crops[cid].true_identity != b.label for b in m.bags for cid in b.crop_ids)
        mean_noise = wrong / int(sizes.sum())
    return BagStatistics(
        num_bags=len(m.bags),
        num_crops=len(m.crops),
        mean_bag_size=float(sizes.mean()),
        min_bag_size=int(sizes.min()),
        max_bag_size=int(sizes.max()),
        mean_noise=mean_noise,
        per_bag_noise=per_bag,
    )


def _subset(m: DatasetManifest, labels: set[str]) -> DatasetManifest:
    bags = tuple(b for b in m.bags if b.label in labels)
    keep = {b.bag_id for b in bags}
    crops = tuple(c for c in m.crops if c.bag_id in keep)
    return DatasetManifest(bags, crops, dict(m.metadata))


def split_dataset(
    m: DatasetManifest, fractions: tuple[float, float] = (0.8, 0.2), seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split by bag label so no identity appears on both sides.

    The first side gets ``round(fractions[0] * n_labels)`` labels, clipped so
    that each side keeps at least one label.
    """
    if len(fractions) != 2 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be two positive numbers summing to 1, got {fractions}")
    labels = sorted(set(b.label for b in m.bags))
    if len(labels) < 2:
        raise ValueError(f"cannot split {len(labels)} label(s) into two non-empty sides")
    order = np.random.default_rng(seed).permutation(len(labels))
    n_first = int(np.clip(round(fractions[0] * len(labels)), 1, len(labels) - 1))
    first = {labels[i] for i in order[:n_first]}
    second = set(labels) - first
    return _subset(m, first), _subset(m, second)
