import numpy as np
import pytest
import torch

from cmil.bags import BagRecord, CropRecord, DatasetManifest, strong_manifest_from_vectors


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_manifest(rng, n_ids=5, crops=(1, 6), bags_per_id=(1, 3), dim=4):
    """Clean manifest with random bag sizes and a random number of bags per identity."""
    bags, crops_out = [], []
    c = 0
    for i in range(n_ids):
        for _ in range(int(rng.integers(bags_per_id[0], bags_per_id[1] + 1))):
            bag_id = f"bag{len(bags)}"
            cids = []
            for _ in range(int(rng.integers(crops[0], crops[1] + 1))):
                cid = f"c{c}"
                c += 1
                cids.append(cid)
                vec = tuple(float(v) for v in rng.normal(size=dim))
                crops_out.append(CropRecord(cid, f"img{c}", bag_id, vec, f"id{i}"))
            bags.append(BagRecord(bag_id, f"id{i}", tuple(cids)))
    return DatasetManifest(tuple(bags), tuple(crops_out), {"kind": "random"})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_strong():
    x = np.arange(24, dtype=float).reshape(6, 4)
    return strong_manifest_from_vectors(x, ["a", "a", "b", "b", "c", "c"], crops_per_bag=1)
