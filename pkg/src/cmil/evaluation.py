"""Query/gallery re-identification evaluation: ranking, rank-k accuracy and mAP.

Only crop embeddings are used here; bags play no role at inference.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bags import DatasetManifest
from .losses import pairwise_distance

__all__ = [
    "EvalSplit",
    "EvalReport",
    "RankedLists",
    "rank_embeddings",
    "rank_queries",
    "rank_k_accuracy",
    "mean_average_precision",
    "evaluate",
    "evaluate_embeddings",
    "make_eval_split",
    "load_eval_split",
    "save_eval_split",
]


@dataclass
class EvalSplit:
    """Crops as arrays of shape (N, *input_shape) plus their identities."""

    query_x: np.ndarray
    query_ids: Sequence[str]
    gallery_x: np.ndarray
    gallery_ids: Sequence[str]
    distractor_x: np.ndarray | None = None
    query_cams: Sequence[str] | None = None
    gallery_cams: Sequence[str] | None = None

    def __post_init__(self):
        self.query_x = np.asarray(self.query_x, dtype=np.float64)
        self.gallery_x = np.asarray(self.gallery_x, dtype=np.float64)
        if self.distractor_x is None:
            self.distractor_x = np.zeros((0,) + self.gallery_x.shape[1:])
        self.distractor_x = np.asarray(self.distractor_x, dtype=np.float64)
        if len(self.gallery_x) == 0:
            raise ValueError("gallery is empty")
        missing = set(self.query_ids) - set(self.gallery_ids)
        if missing:
            raise ValueError(f"query identities absent from gallery: {sorted(missing)[:5]}")

    @property
    def num_queries(self) -> int:
        return len(self.query_ids)


@dataclass(frozen=True)
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    num_queries: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


@dataclass
class RankedLists:
    """Per-query ranking over gallery followed by distractors.

    ``order[q]`` holds item indices sorted by ascending distance; ``matches[q]``
    flags relevant items in that order. Excluded (junk) items are dropped, so
    rows may have different lengths.
    """

    order: list[np.ndarray]
    matches: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.order)


def rank_embeddings(
    query_emb,
    query_ids: Sequence[str],
    gallery_emb,
    gallery_ids: Sequence[str],
    distractor_emb=None,
    *,
    distance: str = "euclidean",
    query_cams: Sequence[str] | None = None,
    gallery_cams: Sequence[str] | None = None,
    exclude_same_camera: bool = False,
) -> RankedLists:
    q = torch.as_tensor(query_emb, dtype=torch.float64)
    items = torch.as_tensor(gallery_emb, dtype=torch.float64)
    if distractor_emb is not None and len(distractor_emb):
        items = torch.cat([items, torch.as_tensor(distractor_emb, dtype=torch.float64)])
    if len(items) == 0:
        raise ValueError("gallery is empty")
    n_gallery = len(gallery_ids)
    with torch.no_grad():
        dist = pairwise_distance(q, items, distance).numpy()

    item_ids = np.array(list(gallery_ids) + [None] * (len(items) - n_gallery), dtype=object)
    junk_possible = exclude_same_camera and query_cams is not None and gallery_cams is not None
    if junk_possible:
        item_cams = np.array(list(gallery_cams) + [None] * (len(items) - n_gallery), dtype=object)

    order, matches = [], []
    for i, qid in enumerate(query_ids):
        ranked = np.argsort(dist[i], kind="stable")
        rel = item_ids[ranked] == qid
        if junk_possible:
            keep = ~(rel & (item_cams[ranked] == query_cams[i]))
            ranked, rel = ranked[keep], rel[keep]
        order.append(ranked)
        matches.append(rel.astype(bool))
    return RankedLists(order, matches)


def rank_queries(
    split: EvalSplit, model, distance: str = "euclidean", *, exclude_same_camera: bool = False
) -> RankedLists:
    """Embed every crop with the model's extractor and rank gallery + distractors per query."""
    with torch.no_grad():
        q = model.embed(split.query_x)
        g = model.embed(split.gallery_x)
        d = model.embed(split.distractor_x) if len(split.distractor_x) else None
    return rank_embeddings(
        q, split.query_ids, g, split.gallery_ids, d,
        distance=distance,
        query_cams=split.query_cams,
        gallery_cams=split.gallery_cams,
        exclude_same_camera=exclude_same_camera,
    )


def rank_k_accuracy(ranked: RankedLists, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked) == 0:
        return 0.0
    return float(np.mean([m[:k].any() for m in ranked.matches]))


def mean_average_precision(ranked: RankedLists) -> float:
    aps = []
    for q, m in enumerate(ranked.matches):
        hits = np.flatnonzero(m)
        if hits.size == 0:
            raise ValueError(f"query {q} has no relevant gallery item")
        # precision at the rank of each relevant item
        aps.append(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))
    return float(np.mean(aps)) if aps else 0.0


def _report(ranked: RankedLists) -> EvalReport:
    return EvalReport(
        rank1=rank_k_accuracy(ranked, 1),
        rank5=rank_k_accuracy(ranked, 5),
        rank10=rank_k_accuracy(ranked, 10),
        map=mean_average_precision(ranked),
        num_queries=len(ranked),
    )


def evaluate(split: EvalSplit, model, distance: str = "euclidean", *, exclude_same_camera: bool = False) -> EvalReport:
    return _report(rank_queries(split, model, distance, exclude_same_camera=exclude_same_camera))


def evaluate_embeddings(query_emb, query_ids, gallery_emb, gallery_ids, distractor_emb=None, *, distance="euclidean") -> EvalReport:
    return _report(rank_embeddings(query_emb, query_ids, gallery_emb, gallery_ids, distractor_emb, distance=distance))


# ---------------------------------------------------------------------------
# construction and file format
# ---------------------------------------------------------------------------


def make_eval_split(
    m: DatasetManifest, queries_per_identity: int = 1, seed: int = 0, data_root: str | Path | None = None
) -> EvalSplit:
    """Turn a strongly labeled manifest into a query/gallery split.

    For each identity ``queries_per_identity`` crops become queries and the
    rest gallery; identities with a single crop go to the gallery only.
    """
    from .data import load_crop_array

    by_id: dict[str, list[int]] = defaultdict(list)
    for i, c in enumerate(m.crops):
        if c.true_identity is None:
            raise ValueError(f"crop {c.crop_id!r} has no true_identity")
        by_id[c.true_identity].append(i)
    x = load_crop_array(m, data_root)
    rng = np.random.default_rng(seed)
    q_idx, g_idx = [], []
    for ident in sorted(by_id):
        rows = by_id[ident]
        n_q = min(queries_per_identity, len(rows) - 1)
        picked = set(rng.choice(len(rows), size=n_q, replace=False).tolist()) if n_q > 0 else set()
        for j, row in enumerate(rows):
            (q_idx if j in picked else g_idx).append(row)
    ids = [c.true_identity for c in m.crops]
    cams = [c.camera_id for c in m.crops]
    has_cams = all(c is not None for c in cams)
    return EvalSplit(
        query_x=x[q_idx],
        query_ids=[ids[i] for i in q_idx],
        gallery_x=x[g_idx],
        gallery_ids=[ids[i] for i in g_idx],
        query_cams=[cams[i] for i in q_idx] if has_cams else None,
        gallery_cams=[cams[i] for i in g_idx] if has_cams else None,
    )


def save_eval_split(split: EvalSplit, path: str | Path) -> None:
    def items(x, ids, cams):
        out = []
        for i, row in enumerate(x):
            item = {"identity": ids[i], "vector": row.reshape(-1).tolist()}
            if cams is not None:
                item["camera_id"] = cams[i]
            out.append(item)
        return out

    doc = {
        "input_shape": list(split.gallery_x.shape[1:]),
        "queries": items(split.query_x, split.query_ids, split.query_cams),
        "gallery": items(split.gallery_x, split.gallery_ids, split.gallery_cams),
        "distractors": [{"vector": row.reshape(-1).tolist()} for row in split.distractor_x],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_eval_split(path: str | Path) -> EvalSplit:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    shape = tuple(doc["input_shape"])

    def arr(items):
        return np.array([it["vector"] for it in items], dtype=np.float64).reshape((len(items),) + shape)

    def cams(items):
        c = [it.get("camera_id") for it in items]
        return c if items and all(v is not None for v in c) else None

    return EvalSplit(
        query_x=arr(doc["queries"]),
        query_ids=[it["identity"] for it in doc["queries"]],
        gallery_x=arr(doc["gallery"]),
        gallery_ids=[it["identity"] for it in doc["gallery"]],
        distractor_x=arr(doc.get("distractors", [])),
        query_cams=cams(doc["queries"]),
        gallery_cams=cams(doc["gallery"]),
    )
