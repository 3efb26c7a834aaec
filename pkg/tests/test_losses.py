import itertools
import math

import numpy as np
import pytest
import torch

from cmil.losses import (
    LossConfig,
    alignment_loss,
    degenerate_counts,
    distance,
    identity_loss,
    pairwise_distance,
    total_loss,
    triplet_loss_batch_all,
)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def brute_triplet(reps, labels, margin, dist):
    """Plain loop over every (a, p, n) index triple."""
    vals = []
    for a, p, n in itertools.product(range(len(labels)), repeat=3):
        if a != p and labels[a] == labels[p] and labels[n] != labels[a]:
            vals.append(max(0.0, dist(reps[a], reps[p]) - dist(reps[a], reps[n]) + margin))
    return (sum(vals) / len(vals) if vals else None), len(vals)


def np_euclid(u, v):
    return float(np.linalg.norm(np.asarray(u) - np.asarray(v)))


def np_cosine(u, v):
    u, v = np.asarray(u), np.asarray(v)
    return float(1 - u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


class TestDistance:
    def test_euclidean_345(self):
        assert float(distance(t([0.0, 0.0]), t([3.0, 4.0]))) == 5.0

    def test_cosine(self):
        assert float(distance(t([1.0, 0.0]), t([0.0, 1.0]), "cosine")) == pytest.approx(1.0)
        assert float(distance(t([1.0, 0.0]), t([2.0, 0.0]), "cosine")) == pytest.approx(0.0, abs=1e-15)
        assert float(distance(t([1.0, 0.0]), t([-3.0, 0.0]), "cosine")) == pytest.approx(2.0)

    def test_cosine_zero_vector(self):
        before = degenerate_counts["cosine_zero_vector"]
        assert float(distance(t([0.0, 0.0]), t([1.0, 2.0]), "cosine")) == 1.0
        assert degenerate_counts["cosine_zero_vector"] == before + 1

    def test_euclidean_zero_gradient_finite(self):
        u = t([1.0, 2.0]).requires_grad_()
        distance(u, t([1.0, 2.0])).backward()
        assert torch.isfinite(u.grad).all()

    def test_cosine_scale_invariance(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            u, v = torch.randn(5, generator=g, dtype=D), torch.randn(5, generator=g, dtype=D)
            c = float(torch.rand(1, generator=g, dtype=D)) * 10 + 0.1
            assert float(distance(c * u, v, "cosine")) == pytest.approx(float(distance(u, v, "cosine")), abs=1e-12)

    def test_pairwise_matches_numpy(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        for kind, ref in (("euclidean", np_euclid), ("cosine", np_cosine)):
            d = pairwise_distance(t(x), t(y), kind).numpy()
            expected = [[ref(a, b) for b in y] for a in x]
            np.testing.assert_allclose(d, expected, atol=1e-12)

    def test_unknown_and_mismatch(self):
        with pytest.raises(ValueError):
            distance(t([1.0]), t([1.0]), "manhattan")
        with pytest.raises(ValueError, match="dimension"):
            distance(t([1.0]), t([1.0, 2.0]))


class TestIdentityLoss:
    def test_uniform_four(self):
        assert float(identity_loss(t([[0.25] * 4]), [2])) == pytest.approx(math.log(4), abs=1e-6)
        assert float(identity_loss(t([[0.25] * 4]), [2])) == pytest.approx(1.386294, abs=1e-6)

    def test_half(self):
        assert float(identity_loss(t([[0.5, 0.5]]), [0])) == pytest.approx(0.693147, abs=1e-6)

    def test_clamp(self):
        before = degenerate_counts["ce_clamped"]
        v = float(identity_loss(t([[1.0, 0.0]]), [1]))
        assert v == pytest.approx(-math.log(1e-12))
        assert degenerate_counts["ce_clamped"] == before + 1

    def test_nonnegative(self):
        p = torch.softmax(torch.randn(6, 3, dtype=D), -1)
        assert float(identity_loss(p, [0, 1, 2, 0, 1, 2])) >= 0


class TestTriplet:
    def test_margin_example(self):
        # d(a,p)=1, d(a,n)=2 with margin 0.5 -> hinge 0 for that triplet; check one by hand
        reps = t([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        loss, n = triplet_loss_batch_all(reps, ["A", "A", "B"], margin=0.5)
        # (0,1,2): 1 - 2 + .5 = 0 ; (1,0,2): 1 - 1 + .5 = .5
        assert n == 2
        assert float(loss) == pytest.approx(0.25)

    def test_two_by_two_count(self):
        rng = np.random.default_rng(0)
        reps = rng.normal(size=(4, 3))
        loss, n = triplet_loss_batch_all(t(reps), ["A", "A", "B", "B"], 0.3)
        ref, n_ref = brute_triplet(reps, ["A", "A", "B", "B"], 0.3, np_euclid)
        assert n == n_ref == 8
        assert float(loss) == pytest.approx(ref, abs=1e-12)

    @pytest.mark.parametrize("kind,ref", [("euclidean", np_euclid), ("cosine", np_cosine)])
    def test_random_batches_match_brute_force(self, kind, ref):
        rng = np.random.default_rng(1)
        for _ in range(25):
            labels = list(rng.integers(0, 3, size=int(rng.integers(4, 9))))
            reps = rng.normal(size=(len(labels), 4))
            expected, n_ref = brute_triplet(reps, labels, 0.4, ref)
            if n_ref == 0:
                with pytest.raises(ValueError):
                    triplet_loss_batch_all(t(reps), labels, 0.4, kind)
                continue
            loss, n = triplet_loss_batch_all(t(reps), labels, 0.4, kind)
            assert n == n_ref
            assert float(loss) == pytest.approx(expected, abs=1e-12)

    def test_no_valid_triplet(self):
        with pytest.raises(ValueError, match="no valid triplet"):
            triplet_loss_batch_all(t([[0.0], [1.0]]), ["A", "B"], 0.5)


class TestAlignment:
    def test_examples(self):
        r = t([0.0, 0.0])
        assert float(alignment_loss(r, t([[0.8, 0.0], [3.0, 0.0]]), 0.5)) == pytest.approx(0.3)
        assert float(alignment_loss(r, t([[0.2, 0.0], [3.0, 0.0]]), 0.5)) == 0.0

    def test_batched(self):
        r = t([[0.0, 0.0], [1.0, 1.0]])
        z = t([[[0.8, 0.0]], [[1.0, 1.0]]])
        np.testing.assert_allclose(alignment_loss(r, z, 0.5).numpy(), [0.3, 0.0], atol=1e-12)

    def test_permutation_invariance(self):
        g = torch.Generator().manual_seed(3)
        r, z = torch.randn(4, generator=g, dtype=D), torch.randn(7, 4, generator=g, dtype=D)
        ref = alignment_loss(r, z, 0.1)
        for _ in range(10):
            assert torch.equal(alignment_loss(r, z[torch.randperm(7, generator=g)], 0.1), ref)

    def test_empty(self):
        with pytest.raises(ValueError):
            alignment_loss(t([0.0]), torch.zeros(0, 1, dtype=D), 0.5)


class TestTotal:
    def batch(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        reps = torch.randn(4, 3, generator=g, dtype=D)
        crops = torch.randn(4, 5, 3, generator=g, dtype=D)
        probs = torch.softmax(torch.randn(4, 2, generator=g, dtype=D), -1)
        return reps, crops, probs, ["A", "A", "B", "B"], [0, 0, 1, 1]

    def test_weighted_sum(self):
        reps, crops, probs, labels, cls = self.batch()
        cfg = LossConfig(alpha=0.5638, beta=0.3872, gamma=0.1, m_triplet=0.7, m_align=0.2)
        rep = total_loss(reps, crops, probs, labels, cls, cfg)
        trip = triplet_loss_batch_all(reps, labels, 0.7)[0]
        ce = identity_loss(probs, cls)
        align = torch.stack([alignment_loss(reps[i], crops[i], 0.2) for i in range(4)]).mean()
        assert float(rep.total) == pytest.approx(float(0.5638 * trip + 0.3872 * ce + 0.1 * align), abs=1e-12)
        assert rep.num_valid_triplets == 8

    def test_gamma_zero_still_reports_align(self):
        reps, crops, probs, labels, cls = self.batch(1)
        rep = total_loss(reps, crops, probs, labels, cls, LossConfig(gamma=0.0, m_align=0.0))
        f = rep.as_floats()
        assert math.isfinite(f["align"]) and f["align"] > 0
        assert f["total"] == pytest.approx(f["triplet"] + f["ce"], abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=0, beta=0)
        with pytest.raises(ValueError):
            LossConfig(gamma=-1)
        with pytest.raises(ValueError):
            LossConfig(distance="l1")
