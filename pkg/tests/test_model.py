import numpy as np
import pytest

import oracles
from lcm.core import Rng, Tensor, clear_tape, finite_difference_check, no_grad
from lcm.data import PhenotypeSchema, categorical
from lcm.errors import ConfigError
from lcm.core.tensor import ShapeError
from lcm.model import (LcmModel, ModelConfig, cross_attention_block, export_cross_attention,
                       feed_forward_block, layer_forward, parameter_count,
                       region_token_cross_attention, self_attention_block, token_self_attention)
from lcm.training import multitask_loss, stage1_loss


@pytest.fixture(autouse=True)
def fresh_tape():
    clear_tape()
    yield
    clear_tape()


def tokens(p, d, seed):
    return Tensor(Rng(seed, "V").normal((p, d)))


class TestSelfAttention:
    @pytest.mark.parametrize("heads", [1, 2])
    def test_oracle(self, heads):
        model = oracles.random_model(heads=heads, dim=4, seed=3)
        p = model.layer_params(0)
        v = tokens(3, 4, 3)
        out = token_self_attention(v, p, heads)
        np.testing.assert_allclose(out.data, oracles.self_attention(v.data, p, heads), atol=1e-12, rtol=0)

    def test_single_token(self):
        model = oracles.random_model(dim=4, seed=1)
        p = model.layer_params(0)
        v = tokens(1, 4, 2)
        out = self_attention_block(v, p, 1)
        from lcm.core import layer_norm
        h = layer_norm(v, p["ln_self.gain"], p["ln_self.bias"]).data
        val = h @ p["self.v.weight"].data + p["self.v.bias"].data
        merged = val @ p["self.out.weight"].data + p["self.out.bias"].data
        np.testing.assert_allclose(out.data, merged + v.data, atol=1e-13)

    def test_identical_rows(self):
        model = oracles.random_model(dim=8, heads=2, seed=4)
        row = Rng(5).normal(8)
        out = token_self_attention(Tensor(np.tile(row, (4, 1))), model.layer_params(0), 2).data
        np.testing.assert_allclose(out, np.tile(out[0], (4, 1)), atol=1e-14)

    def test_mask_blocks_key(self):
        model = oracles.random_model(dim=4, seed=6)
        p = model.layer_params(0)
        v = tokens(3, 4, 7)
        mask = np.ones((3, 3), dtype=bool)
        mask[:2, 2] = False
        masked = token_self_attention(v, p, 1, mask).data
        np.testing.assert_allclose(masked[:2], token_self_attention(v[:2], p, 1).data, atol=1e-12)


class TestCrossAttention:
    @pytest.mark.parametrize("heads", [1, 2])
    def test_oracle(self, heads):
        model = oracles.random_model(heads=heads, dim=4, regions=4, seed=5)
        p = model.layer_params(0)
        v, m = tokens(3, 4, 5), oracles.random_fc(4, 5)
        out = region_token_cross_attention(v, Tensor(m), p, heads)
        np.testing.assert_allclose(out.data, oracles.cross_attention(v.data, m, p, heads), atol=1e-12, rtol=0)

    def test_zero_connectome(self):
        model = LcmModel(ModelConfig(1, 2, 8, 5, PhenotypeSchema((categorical("a", 3),))), seed=1)
        p = model.layer_params(0)
        capture = {}
        out = region_token_cross_attention(tokens(3, 8, 1), Tensor(np.zeros((5, 5))), p, 2, capture)
        np.testing.assert_allclose(capture["cross"], 1 / 5, atol=1e-15)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-15)  # biases are zero at init

    def test_single_region(self):
        model = oracles.random_model(dim=4, regions=1, seed=2)
        p = model.layer_params(0)
        m = np.array([[1.0]])
        capture = {}
        out = region_token_cross_attention(tokens(3, 4, 2), Tensor(m), p, 1, capture)
        assert np.all(capture["cross"] == 1.0)
        row = (m @ p["cross.v.weight"].data + p["cross.v.bias"].data) @ p["cross.out.weight"].data \
            + p["cross.out.bias"].data
        np.testing.assert_allclose(out.data, np.tile(row, (3, 1)), atol=1e-13)

    def test_weights_match_oracle(self):
        model = oracles.random_model(heads=2, dim=8, regions=4, seed=8)
        m = oracles.random_fc(4, 8)
        V = tokens(5, 8, 8)
        capture = {}
        region_token_cross_attention(V, Tensor(m), model.layer_params(0), 2, capture)
        _, w = oracles.cross_attention(V.data, m, model.layer_params(0), 2, return_weights=True)
        np.testing.assert_allclose(capture["cross"][0], w, atol=1e-12)


class TestLayer:
    def test_residual_identity(self):
        model = oracles.random_model(dim=8, regions=4, heads=2, seed=1)
        p = model.layer_params(0)
        for name in ("self.out", "cross.out", "ffn.down"):
            p[f"{name}.weight"].data[...] = 0.0
            p[f"{name}.bias"].data[...] = 0.0
        v = tokens(5, 8, 3)
        out = layer_forward(v, Tensor(oracles.random_fc(4, 3)), p, 2)
        np.testing.assert_array_equal(out.data, v.data)

    def test_composition(self):
        model = oracles.random_model(dim=8, regions=4, heads=2, seed=2)
        p = model.layer_params(1)
        v, m = tokens(5, 8, 4), Tensor(oracles.random_fc(4, 4))
        manual = feed_forward_block(cross_attention_block(self_attention_block(v, p, 2), m, p, 2), p)
        np.testing.assert_array_equal(layer_forward(v, m, p, 2).data, manual.data)

    def test_shape_closure(self):
        model = oracles.random_model(dim=8, regions=4, heads=4, seed=2)
        for p_count in (1, 2, 7):
            out = layer_forward(tokens(p_count, 8, 1), Tensor(oracles.random_fc(4, 1, batch=3)),
                                model.layer_params(0), 4)
            assert out.shape == (3, p_count, 8)


class TestModelForward:
    def test_single_layer(self):
        model = oracles.random_model(layers=1, seed=1)
        m = oracles.random_fc(4, 1)
        preds = model.forward(m)
        v = layer_forward(model.params["tokens"], Tensor(m), model.layer_params(0), 1)
        expect = v.data @ model.params["readout.weight"].data[:, 0] + model.params["readout.bias"].data
        np.testing.assert_allclose(preds.layers[0].data[0], expect, atol=1e-13)
        assert preds.values(0, 0).shape == (3,) and preds.values(0, 1).shape == (2,)

    def test_region_permutation(self):
        model = oracles.random_model(layers=2, heads=2, dim=8, regions=6, seed=3)
        m = oracles.random_fc(6, 3)
        perm = Rng(3).permutation(6)
        permuted = model.copy()
        for layer in range(2):
            for name in ("cross.q.weight", "cross.v.weight"):
                t = permuted.params[f"layers.{layer}.{name}"]
                t.data[...] = t.data[perm]
        base = model.forward(m)
        moved = permuted.forward(m[np.ix_(perm, perm)])
        for a, b in zip(base.layers, moved.layers):
            np.testing.assert_allclose(a.data, b.data, atol=1e-10)

    def test_prefix_equality(self):
        schema = PhenotypeSchema((categorical("a", 3), categorical("b", 2)))
        deep = oracles.random_model(layers=3, heads=2, dim=8, schema=schema, seed=4)
        cfg = ModelConfig(2, 2, 8, 4, schema)
        shallow = LcmModel(cfg, {k: v for k, v in deep.params.items() if not k.startswith("layers.2.")})
        m = oracles.random_fc(4, 4, batch=2)
        np.testing.assert_array_equal(deep.forward(m).layers[1].data, shallow.forward(m).layers[1].data)

    def test_region_mismatch(self):
        with pytest.raises(ShapeError):
            oracles.random_model(regions=4).forward(np.eye(5))

    def test_batch_matches_single(self):
        model = oracles.random_model(layers=2, heads=2, dim=8, seed=5)
        m = oracles.random_fc(4, 5, batch=3)
        batched = model.forward(m)
        for i in range(3):
            single = model.forward(m[i])
            np.testing.assert_allclose(single.layers[1].data[0], batched.layers[1].data[i], atol=1e-13)

    def test_config_errors(self):
        schema = PhenotypeSchema((categorical("a", 2),))
        with pytest.raises(ConfigError):
            ModelConfig(2, 3, 8, 4, schema)
        with pytest.raises(ConfigError):
            ModelConfig(0, 1, 8, 4, schema)


class TestExport:
    def test_rows_sum_to_one(self):
        model = oracles.random_model(layers=2, heads=2, dim=8, seed=6)
        maps = export_cross_attention(model, oracles.random_fc(4, 6), 2)
        assert maps["a"].shape == (3, 4) and maps["b"].shape == (2, 4)
        for w in maps.values():
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)

    def test_uniform(self):
        model = LcmModel(ModelConfig(2, 2, 8, 4, oracles.mixed_schema()), seed=1)
        for i in range(2):
            model.params[f"layers.{i}.cross.k.weight"].data[...] = 0.0
        maps = export_cross_attention(model, oracles.random_fc(4, 1), 1)
        for w in maps.values():
            np.testing.assert_allclose(w, 0.25, atol=1e-15)

    def test_consistent_with_internal(self):
        model = oracles.random_model(layers=2, heads=2, dim=8, seed=7)
        m = oracles.random_fc(4, 7)
        maps = export_cross_attention(model, m, 2, head_average=False)
        with no_grad():
            v1 = layer_forward(model.params["tokens"], Tensor(m), model.layer_params(0), 2)
            from lcm.core import layer_norm
            p = model.layer_params(1)
            v1 = self_attention_block(v1, p, 2)
            h = layer_norm(v1, p["ln_cross.gain"], p["ln_cross.bias"])
        _, w = oracles.cross_attention(h.data, m, p, 2, return_weights=True)
        np.testing.assert_allclose(maps["a"], w[:, :3], atol=1e-12)
        np.testing.assert_allclose(maps["b"], w[:, 3:], atol=1e-12)

    def test_bad_layer(self):
        with pytest.raises(ConfigError):
            export_cross_attention(oracles.random_model(layers=2), np.eye(4), 3)


class TestParameterCount:
    @pytest.mark.parametrize("layers,heads,dim,regions,ffn", [(1, 1, 4, 3, 4), (2, 2, 8, 4, 4), (3, 4, 16, 7, 2)])
    def test_matches_enumeration(self, layers, heads, dim, regions, ffn):
        schema = oracles.mixed_schema()
        model = LcmModel(ModelConfig(layers, heads, dim, regions, schema, ffn))
        assert model.num_parameters() == parameter_count(layers, heads, dim, regions, schema.total_tokens, ffn)


def test_full_model_gradient():
    model = oracles.random_model(layers=2, heads=2, dim=8, regions=4, schema=oracles.mixed_schema(), seed=9, std=0.3)
    assert model.config.tokens == 6
    m = oracles.random_fc(4, 9, batch=2)
    labels = np.array([[2, 0.7, 1], [0, -1.2, 0]], dtype=float)
    mask = np.ones_like(labels, dtype=bool)

    def f():
        preds = model.forward(m)
        return stage1_loss(preds, labels, mask).total

    report = finite_difference_check(f, model.parameters(), step=1e-5, tolerance=1e-4)
    assert report.ok, [(n, e) for n, e in zip(report.names, report.max_rel_error) if e >= 1e-4]


def test_per_task_loss_uses_slices():
    model = oracles.random_model(schema=oracles.mixed_schema(), seed=10)
    preds = model.forward(oracles.random_fc(4, 10))
    labels = np.array([[1, 0.5, 0]])
    br = multitask_loss([preds.task(0, i) for i in range(3)], labels, np.ones((1, 3), bool), model.config.schema)
    logits = preds.layers[0].data[0]
    expect = oracles.cross_entropy(list(logits[:3]), 1) + (logits[3] - 0.5) ** 2 \
        + oracles.cross_entropy(list(logits[4:6]), 0)
    assert br.total.item() == pytest.approx(expect, abs=1e-12)
