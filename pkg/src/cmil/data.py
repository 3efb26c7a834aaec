"""Crop tensors for manifests and a synthetic Gaussian-cluster identity generator."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .bags import DatasetManifest, strong_manifest_from_vectors

__all__ = ["CropStore", "load_crop_array", "gaussian_identities", "toy_reid_splits"]


def _load_ref(ref, root: Path | None) -> np.ndarray:
    if isinstance(ref, str):
        p = Path(ref)
        if root is not None and not p.is_absolute():
            p = root / p
        return np.load(p)
    return np.asarray(ref, dtype=np.float64)


def load_crop_array(
    m: DatasetManifest, data_root: str | Path | None = None, input_shape: tuple[int, ...] | None = None
) -> np.ndarray:
    """Stack every crop of ``m`` (manifest order) into one float64 array.

    Path refs are ``.npy`` files, resolved against ``data_root`` when relative.
    Vector refs are reshaped to ``input_shape`` when given.
    """
    root = Path(data_root) if data_root is not None else None
    rows = [_load_ref(c.data_ref, root) for c in m.crops]
    if not rows:
        return np.zeros((0,) + tuple(input_shape or ()))
    x = np.stack(rows).astype(np.float64)
    if input_shape is not None:
        x = x.reshape((len(rows),) + tuple(input_shape))
    return x


class CropStore:
    """Crop data of a manifest indexed by crop_id."""

    def __init__(self, m: DatasetManifest, data_root=None, input_shape=None):
        self.x = load_crop_array(m, data_root, input_shape)
        self.row = {c.crop_id: i for i, c in enumerate(m.crops)}

    def indices(self, crop_ids) -> np.ndarray:
        return np.fromiter((self.row[c] for c in crop_ids), dtype=np.int64)

    def __getitem__(self, crop_ids) -> np.ndarray:
        return self.x[self.indices(crop_ids)]


def gaussian_identities(
    n_identities: int,
    crops_per_identity: int,
    dim: int = 32,
    *,
    seed: int = 0,
    world_seed: int = 0,
    signal_dim: int = 8,
    center_std: float = 1.0,
    within_std: float = 0.35,
    nuisance_std: float = 1.0,
    id_prefix: str = "p",
) -> tuple[np.ndarray, list[str]]:
    """Sample vector crops of ``n_identities`` people.

    Identities live in a ``signal_dim``-dimensional subspace shared by all
    identities drawn with the same ``world_seed``; the remaining directions
    carry identity-independent nuisance noise. Distances on raw vectors are
    therefore dominated by nuisance, and a useful embedding has to learn the
    projection. Different ``seed`` values give disjoint sets of people from the
    same world, which is what a held-out test set needs.
    """
    if signal_dim > dim:
        raise ValueError("signal_dim cannot exceed dim")
    world = np.random.default_rng(world_seed)
    basis, _ = np.linalg.qr(world.standard_normal((dim, dim)))
    signal, nuisance = basis[:, :signal_dim], basis[:, signal_dim:]

    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_std, size=(n_identities, signal_dim))
    ids = np.repeat(np.arange(n_identities), crops_per_identity)
    latent = centers[ids] + rng.normal(0.0, within_std, size=(len(ids), signal_dim))
    junk = rng.normal(0.0, nuisance_std, size=(len(ids), dim - signal_dim))
    x = latent @ signal.T + junk @ nuisance.T
    return x, [f"{id_prefix}{i:03d}" for i in ids]


def toy_reid_splits(
    n_identities: int = 20,
    n_train: int = 50,
    n_val: int = 5,
    n_test: int = 10,
    dim: int = 32,
    *,
    crops_per_bag: int = 10,
    val_queries: int = 2,
    test_queries: int = 3,
    seed: int = 1,
):
    """Strong training manifest plus val and test query/gallery splits of the same people.

    Each identity gets ``n_train + n_val + n_test`` crops; the first
    ``n_train`` form strong bags of ``crops_per_bag``, the next ``n_val``
    the validation split and the last ``n_test`` the test split. Inject
    noise into the training manifest with the bag noise generator.
    """
    from .evaluation import make_eval_split

    per = n_train + n_val + n_test
    x, ids = gaussian_identities(n_identities, per, dim, seed=seed)
    j = np.arange(len(ids)) % per

    def pick(mask, prefix=""):
        kept = [i for i, keep in zip(ids, mask) if keep]
        return strong_manifest_from_vectors(x[mask], kept, crops_per_bag=crops_per_bag, prefix=prefix)

    strong = pick(j < n_train)
    val = make_eval_split(pick((j >= n_train) & (j < n_train + n_val), "V"), val_queries, seed=0)
    test = make_eval_split(pick(j >= n_train + n_val, "T"), test_queries, seed=0)
    return strong, val, test
