import math

import numpy as np
import pytest
import torch

from cmil.bags import NoiseSpec, generate_synthetic_weak_labels, strong_manifest_from_vectors
from cmil.config import TrainConfig
from cmil.data import CropStore, gaussian_identities
from cmil.evaluation import make_eval_split
from cmil.losses import alignment_loss
from cmil.models import CMILModel
from cmil.sampling import plan_epoch
from cmil.training import (
    LOG_HEADER,
    TrainingError,
    TrainLogRow,
    batch_tensors,
    log_alignment,
    read_log_csv,
    train,
    train_crop_baseline,
    write_log_csv,
)


def small_data(n_ids=6, per_id=12, dim=8, noise_k=None):
    x, ids = gaussian_identities(n_ids, per_id, dim, seed=0, signal_dim=4)
    m = strong_manifest_from_vectors(x, ids, crops_per_bag=4)
    if noise_k:
        m = generate_synthetic_weak_labels(m, NoiseSpec(noise_k, seed=0))
    xv, idv = gaussian_identities(4, 4, dim, seed=1, signal_dim=4, id_prefix="v")
    val = make_eval_split(strong_manifest_from_vectors(xv, idv, prefix="V"), 1, seed=0)
    return m, val


def cfg(**kw):
    base = {
        "epochs": 2, "bag_size": 3, "batch_size": 4, "lr": 0.05, "patience": 100,
        "extractor.input_shape": [8], "extractor.hidden_sizes": [16], "embed_dim": 4,
    }
    base.update(kw)
    return TrainConfig.from_flat(base)


class TestTrain:
    def test_zero_epochs_returns_initial_model(self):
        m, _ = small_data()
        c = cfg(epochs=0)
        model, rows = train(m, None, c)
        fresh = CMILModel(c.extractor, c.accumulator, m.num_identities, seed=c.seed)
        assert rows == []
        for a, b in zip(model.state_dict().values(), fresh.state_dict().values()):
            assert torch.equal(a, b)

    def test_fixbase_freezes_theta(self):
        m, _ = small_data()
        c = cfg(epochs=2, fixbase=2)
        fresh = CMILModel(c.extractor, c.accumulator, m.num_identities, seed=c.seed)
        model, _ = train(m, None, c)
        theta0 = fresh.named_groups()["theta"]
        for name, p in model.named_groups()["theta"].items():
            assert torch.equal(p, theta0[name])
        psi0 = fresh.named_groups()["psi"]
        assert any(not torch.equal(p, psi0[n]) for n, p in model.named_groups()["psi"].items())

    def test_deterministic(self):
        m, val = small_data()
        a_model, a_rows = train(m, val, cfg(seed=3))
        b_model, b_rows = train(m, val, cfg(seed=3))
        strip = lambda rows: [(r.epoch, r.step, r.total, r.triplet, r.ce, r.align, r.val_rank1) for r in rows]
        assert strip(a_rows) == strip(b_rows)
        for a, b in zip(a_model.state_dict().values(), b_model.state_dict().values()):
            assert torch.equal(a, b)

    def test_loss_decreases_for_some_lr(self):
        m, _ = small_data(n_ids=4)
        descended = []
        for lr in (0.2, 0.05, 0.01):
            _, rows = train(m, None, cfg(epochs=30, lr=lr))
            first = np.mean([r.total for r in rows if r.epoch < 3])
            last = np.mean([r.total for r in rows if r.epoch >= 27])
            descended.append(last < first)
        assert any(descended)

    def test_val_logged_once_per_epoch(self):
        m, val = small_data()
        _, rows = train(m, val, cfg(epochs=3))
        per_epoch = {}
        for r in rows:
            if r.val_rank1 is not None:
                per_epoch[r.epoch] = per_epoch.get(r.epoch, 0) + 1
        assert per_epoch == {0: 1, 1: 1, 2: 1}

    def test_early_stopping(self):
        m, val = small_data()
        _, rows = train(m, val, cfg(epochs=50, patience=1, lr=1e-6))
        assert rows[-1].epoch < 49

    def test_gamma_zero_align_finite(self):
        m, _ = small_data(noise_k=1)
        _, rows = train(m, None, cfg(gamma=0, epochs=2))
        assert rows and all(math.isfinite(r.align) for r in rows)

    def test_logged_alignment_matches_loss_module(self):
        m, _ = small_data()
        c = cfg()
        store = CropStore(m, None, c.extractor.input_shape)
        class_of = {lab: i for i, lab in enumerate(sorted(m.labels))}
        plan = next(plan_epoch(m, c.sampler, 0))
        x, _, _ = batch_tensors(plan, store, class_of)
        model = CMILModel(c.extractor, c.accumulator, len(class_of), seed=0)
        with torch.no_grad():
            z, r, _ = model(x)
        expected = float(torch.stack([alignment_loss(r[i], z[i], c.losses.m_align) for i in range(len(r))]).mean())
        assert log_alignment(model, x, c.losses) == pytest.approx(expected, abs=1e-12)

    def test_divergence_is_reported(self):
        m, _ = small_data()
        with pytest.raises(TrainingError, match="non-finite"):
            train(m, None, cfg(lr=1e300, epochs=3))

    def test_set_transformer_runs(self):
        m, val = small_data()
        model, rows = train(m, val, cfg(accumulator="set_transformer", epochs=1))
        assert rows and model.groups()["phi"]


class TestBaseline:
    def test_runs_and_logs_nan_align(self):
        m, val = small_data(noise_k=1)
        model, rows = train_crop_baseline(m, val, cfg(epochs=2))
        assert rows[-1].val_rank1 is not None
        assert all(math.isnan(r.align) and r.triplet == 0.0 for r in rows)

    def test_phi_untouched(self):
        m, _ = small_data()
        c = cfg(epochs=1, accumulator="set_transformer")
        fresh = CMILModel(c.extractor, c.accumulator, m.num_identities, seed=c.seed)
        model, _ = train_crop_baseline(m, None, c)
        phi0 = fresh.named_groups()["phi"]
        for name, p in model.named_groups()["phi"].items():
            assert torch.equal(p, phi0[name])


class TestLogCSV:
    def test_roundtrip(self, tmp_path):
        rows = [TrainLogRow(0, 0, 1.5, 0.5, 1.0, 0.1 / 3, None, 0.01), TrainLogRow(0, 1, 1.25, 0.25, 1.0, float("nan"), 0.4, 0.02)]
        write_log_csv(rows, tmp_path / "log.csv")
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_HEADER)
        back = read_log_csv(tmp_path / "log.csv")
        assert back[0] == rows[0]
        assert math.isnan(back[1].align) and back[1].val_rank1 == 0.4

    def test_bad_header_and_row(self, tmp_path):
        (tmp_path / "a.csv").write_text("epoch,step\n0,0\n")
        with pytest.raises(ValueError, match="header"):
            read_log_csv(tmp_path / "a.csv")
        (tmp_path / "b.csv").write_text(",".join(LOG_HEADER) + "\n0,0,x,0,0,0,,0\n")
        with pytest.raises(ValueError, match=":2:"):
            read_log_csv(tmp_path / "b.csv")
