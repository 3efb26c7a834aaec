import numpy as np
import pytest
import torch

from cmil.models import (
    AccumulatorConfig,
    CMILModel,
    ExtractorConfig,
    MaxPool,
    MeanPool,
    SetTransformer,
    SumPool,
    accumulate,
    classify_bag,
    extract_features,
    load_checkpoint,
    save_checkpoint,
    set_transformer_forward,
)

from gradcheck import analytic_grad, numeric_grad, relative_error

D = torch.float64


def model(kind="mean", embed=4, norm=False, seed=0, classes=3, in_dim=5):
    return CMILModel(
        ExtractorConfig("toy_mlp", (in_dim,), embed, (6,), norm),
        AccumulatorConfig(kind, st_heads=2),
        classes,
        seed=seed,
    )


class TestExtractor:
    def test_identical_inputs(self):
        m = model()
        x = np.random.default_rng(0).normal(size=(1, 5))
        z = extract_features(np.repeat(x, 3, axis=0), m)
        assert torch.equal(z[0], z[1]) and torch.equal(z[1], z[2])

    def test_feature_norm(self):
        m = model(norm=True)
        z = extract_features(np.random.default_rng(1).normal(size=(10, 5)), m)
        np.testing.assert_allclose(z.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)

    def test_zero_weights(self):
        m = model()
        with torch.no_grad():
            for p in m.extractor.parameters():
                p.zero_()
        z = extract_features(np.random.default_rng(2).normal(size=(4, 5)), m)
        assert torch.count_nonzero(z) == 0

    def test_crops_are_independent(self):
        m = model()
        x = np.random.default_rng(3).normal(size=(6, 5))
        together = extract_features(x, m)
        alone = torch.cat([extract_features(x[i:i + 1], m) for i in range(6)])
        torch.testing.assert_close(together, alone, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="input_shape"):
            extract_features(np.zeros((2, 7)), model())

    def test_seeded_init(self):
        a, b, c = model(seed=5), model(seed=5), model(seed=6)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert not torch.equal(next(a.parameters()), next(c.parameters()))

    def test_cnn(self):
        m = CMILModel(ExtractorConfig("toy_cnn", (3, 8, 6), 4, (4, 6)), AccumulatorConfig("mean"), 2)
        z = extract_features(np.random.default_rng(0).normal(size=(5, 3, 8, 6)), m)
        assert z.shape == (5, 4)

    def test_external_needs_module(self):
        with pytest.raises(ValueError, match="external"):
            CMILModel(ExtractorConfig("external", (5,), 4), AccumulatorConfig("mean"), 2)
        ext = torch.nn.Linear(5, 4)
        m = CMILModel(ExtractorConfig("external", (5,), 4), AccumulatorConfig("mean"), 2, external=ext)
        assert m.embed(torch.zeros(2, 5)).shape == (2, 4)


class TestAccumulators:
    def test_mean(self):
        r = accumulate(torch.tensor([[1.0, 1.0], [3.0, 3.0]], dtype=D), MeanPool())
        assert r.tolist() == [2.0, 2.0]

    def test_max(self):
        r = accumulate(torch.tensor([[1.0, 4.0], [3.0, 2.0]], dtype=D), MaxPool())
        assert r.tolist() == [3.0, 4.0]

    @pytest.mark.parametrize("pool", [MeanPool(), MaxPool(), SumPool()])
    def test_singleton(self, pool):
        v = torch.tensor([[0.3, -1.2, 5.0]], dtype=D)
        assert torch.equal(accumulate(v, pool), v[0])

    def test_empty(self):
        with pytest.raises(ValueError):
            accumulate(torch.zeros(0, 3, dtype=D), MeanPool())

    def test_set_transformer_permutation(self):
        torch.manual_seed(0)
        st = SetTransformer(8, heads=4).to(D)
        z = torch.randn(10, 8, dtype=D)
        ref = set_transformer_forward(z, st)
        g = torch.Generator().manual_seed(1)
        for _ in range(20):
            out = set_transformer_forward(z[torch.randperm(10, generator=g)], st)
            assert (out - ref).abs().max() <= 1e-5

    def test_set_transformer_duplicates(self):
        torch.manual_seed(1)
        st = SetTransformer(6, heads=2).to(D)
        for _ in range(5):
            v = torch.randn(1, 6, dtype=D)
            a = set_transformer_forward(v, st)
            b = set_transformer_forward(torch.cat([v, v]), st)
            assert (a - b).abs().max() <= 1e-5

    def test_set_transformer_shape_and_layers(self):
        st = SetTransformer(4, heads=2, layers=2)
        assert len(st.blocks) == 2
        assert st(torch.randn(3, 7, 4)).shape == (3, 4)

    def test_set_transformer_phi_gradient(self):
        torch.manual_seed(2)
        st = SetTransformer(4, heads=2).to(D)
        z = torch.randn(3, 4, dtype=D)
        w = torch.randn(4, dtype=D)
        params = list(st.parameters())
        fn = lambda: (set_transformer_forward(z, st) * w).sum()
        assert relative_error(analytic_grad(fn, params), numeric_grad(fn, params)) <= 1e-4

    def test_width_must_divide_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            SetTransformer(6, heads=4)


class TestClassifier:
    def test_zero_weights_uniform(self):
        head = torch.nn.Linear(4, 5).to(D)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
        p = classify_bag(torch.randn(4, dtype=D), head)
        torch.testing.assert_close(p, torch.full((5,), 0.2, dtype=D))

    def test_simplex(self):
        torch.manual_seed(0)
        head = torch.nn.Linear(4, 7).to(D)
        p = classify_bag(torch.randn(10, 4, dtype=D), head)
        assert (p > 0).all()
        np.testing.assert_allclose(p.sum(-1).detach().numpy(), 1.0, atol=1e-9)

    def test_shift_invariance(self):
        torch.manual_seed(0)
        head = torch.nn.Linear(4, 3).to(D)
        r = torch.randn(4, dtype=D)
        p = classify_bag(r, head)
        with torch.no_grad():
            head.bias += 17.0
        torch.testing.assert_close(classify_bag(r, head), p)


class TestFullModel:
    def test_forward_shapes(self):
        m = model("set_transformer")
        z, r, p = m(torch.randn(3, 4, 5, dtype=D))
        assert z.shape == (3, 4, 4) and r.shape == (3, 4) and p.shape == (3, 3)

    def test_groups(self):
        assert model("mean").groups()["phi"] == []
        g = model("set_transformer").groups()
        assert all(g[k] for k in ("theta", "phi", "psi"))

    @pytest.mark.parametrize("kind", ["mean", "set_transformer"])
    def test_checkpoint_roundtrip(self, tmp_path, kind):
        m = model(kind, seed=3)
        save_checkpoint(m, tmp_path / "ck.json", labels=["a", "b", "c"])
        back, doc = load_checkpoint(tmp_path / "ck.json")
        assert doc["format"] == "cmil-checkpoint/1" and doc["labels"] == ["a", "b", "c"]
        assert set(doc["params"]) == {"theta", "phi", "psi"}
        for a, b in zip(m.state_dict().values(), back.state_dict().values()):
            assert torch.equal(a, b)
