import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from lcm.checkpoint import Checkpoint
from lcm.core import Rng, Tensor, clear_tape, current_tape
from lcm.data import PhenotypeSchema, SynthConfig, categorical, continuous, synth_generate
from lcm.errors import ConfigError, DataError
from lcm.model import LcmModel, ModelConfig, PerLayerPredictions
from lcm.training import (ADAPTIVE, LAST, MOMENTUM, TargetScaler, TrainConfig, chosen_layers,
                          layer_scores, multitask_loss, predict_logits, predict_test, select_layer,
                          split_validation, stage1_loss, stage2_loss, task_loss, train)


@pytest.fixture(autouse=True)
def fresh_tape():
    clear_tape()
    yield
    clear_tape()


def small_data(seed=0, per_class=6, regions=4, tasks=None):
    tasks = tasks or (categorical("a", 2), categorical("b", 2))
    return synth_generate(SynthConfig(tasks=tasks, subjects_per_class=per_class, regions=regions,
                                      timepoints=20, latent_dim=2, effect=2.0, seed=seed))


def fake_preds(schema, arrays):
    return PerLayerPredictions([Tensor(a, requires_grad=True) for a in arrays], schema, False)


class TestMultitaskLoss:
    def test_uniform_binary(self):
        schema = PhenotypeSchema((categorical("a", 2),))
        br = multitask_loss([Tensor(np.zeros((1, 2)))], np.array([[0.0]]), np.ones((1, 1), bool), schema)
        assert br.total.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_zero_mse(self):
        schema = PhenotypeSchema((continuous("c"),))
        br = multitask_loss([Tensor(np.zeros((3, 1)))], np.zeros((3, 1)), np.ones((3, 1), bool), schema)
        assert br.total.item() == 0.0

    @pytest.mark.parametrize("classes", [2, 3, 7, 11])
    def test_uniform_is_log_class_count(self, classes):
        loss = task_loss(Tensor(np.full((4, classes), 0.3)), np.arange(4) % classes, np.ones(4, bool), True)
        assert abs(loss.item() - math.log(classes)) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_sum_of_task_oracles(self, seed):
        schema = oracles.mixed_schema()
        rng = Rng(seed, "loss")
        logits = [rng.child(str(i)).normal((5, t.class_count if t.categorical else 1)) for i, t in enumerate(schema)]
        labels = np.stack([rng.integers(0, 3, 5), rng.normal(5), rng.integers(0, 2, 5)], axis=1).astype(float)
        mask = rng.uniform((5, 3)) < 0.7
        mask[0] = True
        br = multitask_loss([Tensor(z) for z in logits], labels, mask, schema)
        expect = 0.0
        for i, task in enumerate(schema):
            rows = [r for r in range(5) if mask[r, i]]
            if task.categorical:
                term = sum(oracles.cross_entropy(list(logits[i][r]), int(labels[r, i])) for r in rows) / len(rows)
            else:
                term = sum((logits[i][r][0] - labels[r, i]) ** 2 for r in rows) / len(rows)
            expect += term
            assert br.values()[task.name] == pytest.approx(term, abs=1e-12)
        assert abs(br.total.item() - expect) < 1e-12
        assert abs(br.total.item() - sum(br.values().values())) < 1e-15
        assert [t.count for t in br.terms] == [int(mask[:, i].sum()) for i in range(3)]

    def test_missing_task_skipped(self):
        schema = oracles.mixed_schema()
        mask = np.array([[True, False, True]])
        br = multitask_loss([Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 2)))],
                            np.array([[0.0, 5.0, 1.0]]), mask, schema)
        assert [t.name for t in br.terms] == ["a", "b"]

    def test_all_missing_is_error(self):
        schema = PhenotypeSchema((categorical("a", 2),))
        with pytest.raises(DataError):
            multitask_loss([Tensor(np.zeros((2, 2)))], np.zeros((2, 1)), np.zeros((2, 1), bool), schema)


class TestStage1:
    def test_single_layer_is_plain_loss(self):
        model = oracles.random_model(layers=1, seed=1)
        m = oracles.random_fc(4, 1, batch=3)
        labels, mask = np.array([[0, 1], [2, 0], [1, 1]], float), np.ones((3, 2), bool)
        preds = model.forward(m)
        plain = multitask_loss([preds.task(0, 0), preds.task(0, 1)], labels, mask, model.config.schema)
        assert stage1_loss(preds, labels, mask).total.item() == plain.total.item()

    @pytest.mark.parametrize("average", ["logits", "loss"])
    def test_identical_layers(self, average):
        schema = PhenotypeSchema((categorical("a", 3), categorical("b", 2)))
        z = Rng(2).normal((4, 5))
        labels, mask = np.array([[0, 1], [2, 0], [1, 1], [0, 0]], float), np.ones((4, 2), bool)
        one = stage1_loss(fake_preds(schema, [z]), labels, mask, average).total.item()
        three = stage1_loss(fake_preds(schema, [z, z, z]), labels, mask, average).total.item()
        assert three == pytest.approx(one, abs=1e-14)

    def test_averaging_oracle(self):
        schema = oracles.mixed_schema()
        rng = Rng(3, "avg")
        layers = [rng.child(str(l)).normal((4, 6)) for l in range(3)]
        labels = np.array([[0, 0.5, 1], [2, -1.0, 0], [1, 0.0, 1], [0, 2.0, 0]])
        mask = np.ones((4, 3), bool)
        got = stage1_loss(fake_preds(schema, layers), labels, mask).total.item()
        expect = 0.0
        for r in range(4):
            avg = [sum(layers[l][r][c] for l in range(3)) / 3 for c in range(6)]
            expect += oracles.cross_entropy(avg[0:3], int(labels[r, 0])) / 4
            expect += (avg[3] - labels[r, 1]) ** 2 / 4
            expect += oracles.cross_entropy(avg[4:6], int(labels[r, 2])) / 4
        assert abs(got - expect) < 1e-12

    def test_gradients_reach_all_layers(self):
        model = oracles.random_model(layers=3, seed=4)
        preds = model.forward(oracles.random_fc(4, 4, batch=2))
        current_tape().backward(stage1_loss(preds, np.array([[0, 1], [1, 0]], float), np.ones((2, 2), bool)).total)
        for layer in range(3):
            assert np.abs(model.params[f"layers.{layer}.ffn.down.weight"].grad).sum() > 0


def plant(preds, layer, labels, mask, strength=50.0):
    """Overwrite one layer's logits with a confident correct predictor."""
    schema = preds.schema
    off = schema.offsets
    z = preds.layers[layer].data.copy()
    for i, task in enumerate(schema):
        for r in range(z.shape[0]):
            if not mask[r, i]:
                continue
            if task.categorical:
                z[r, off[i]:off[i + 1]] = 0.0
                z[r, off[i] + int(labels[r, i])] = strength
            else:
                z[r, off[i]] = labels[r, i]
    layers = list(preds.layers)
    layers[layer] = Tensor(z, requires_grad=True)
    return PerLayerPredictions(layers, schema, preds.single)


class TestStage2:
    @pytest.mark.parametrize("planted", [0, 1, 2])
    def test_planted_layer_selected(self, planted):
        model = oracles.random_model(layers=3, schema=oracles.mixed_schema(), seed=5, std=0.3)
        rng = Rng(5, "labels")
        for batch in range(10):
            labels = np.stack([rng.integers(0, 3, 8), rng.normal(8), rng.integers(0, 2, 8)], axis=1).astype(float)
            mask = np.ones((8, 3), bool)
            preds = plant(model.forward(oracles.random_fc(4, batch, batch=8)), planted, labels, mask)
            _, records = stage2_loss(preds, labels, mask, 0, batch)
            assert [r.layer for r in records] == [planted + 1] * 3
            clear_tape()

    def test_single_layer(self):
        model = oracles.random_model(layers=1, seed=6)
        _, records = stage2_loss(model.forward(oracles.random_fc(4, 6, batch=3)),
                                 np.array([[0, 1], [1, 0], [2, 1]], float), np.ones((3, 2), bool))
        assert all(r.layer == 1 for r in records)

    def test_copied_layers_tie_to_lowest(self):
        base = oracles.random_model(layers=3, seed=7)
        for name in list(base.params):
            if name.startswith("layers.1.") or name.startswith("layers.2."):
                src = "layers.0." + name.split(".", 2)[2]
                base.params[name].data[...] = base.params[src].data
        schema = base.config.schema
        z = base.forward(oracles.random_fc(4, 7, batch=2)).layers[0].data
        preds = fake_preds(schema, [z, z.copy(), z.copy()])
        _, records = stage2_loss(preds, np.array([[0, 1], [1, 0]], float), np.ones((2, 2), bool))
        assert all(r.layer == 1 for r in records)

    def test_selection_is_argmax(self):
        assert select_layer([-3.0, -1.0, -1.0, -2.0]) == 1
        assert select_layer([0.0]) == 0

    @given(st.lists(st.integers(-3, 3), min_size=1, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_selection_invariant(self, raw):
        scores = [float(v) for v in raw]
        best = select_layer(scores)
        assert scores[best] == max(scores)
        assert all(s < scores[best] for s in scores[:best])

    def test_scores_are_negative_loss(self):
        schema = PhenotypeSchema((categorical("a", 2), continuous("c")))
        z = [np.array([[0.0, 0.0, 1.0]]), np.array([[3.0, 0.0, 0.5]])]
        scores = layer_scores(fake_preds(schema, z), np.array([[0, 0.5]]), np.ones((1, 2), bool))
        assert scores[0][0] == pytest.approx(-math.log(2), abs=1e-12)
        assert scores[0][1] == pytest.approx(-oracles.cross_entropy([3.0, 0.0], 0), abs=1e-12)
        assert scores[1] == pytest.approx([-0.25, 0.0], abs=1e-15)

    def test_gradient_locality(self):
        schema = PhenotypeSchema((categorical("a", 2),))
        model = oracles.random_model(layers=3, schema=schema, seed=8, std=0.3)
        labels, mask = np.array([[0.0], [1.0]]), np.ones((2, 1), bool)
        preds = model.forward(oracles.random_fc(4, 8, batch=2))
        scores = layer_scores(preds, labels, mask)[0]
        chosen = select_layer(scores)
        breakdown, records = stage2_loss(preds, labels, mask)
        assert records[0].layer == chosen + 1
        current_tape().backward(breakdown.total)
        for layer in range(3):
            g = model.params[f"layers.{layer}.ffn.down.weight"].grad
            if layer > chosen:
                assert g is None or np.all(g == 0)
            else:
                assert np.abs(g).sum() > 0

    def test_gradient_locality_planted(self):
        schema = PhenotypeSchema((categorical("a", 2),))
        model = oracles.random_model(layers=3, schema=schema, seed=9, std=0.3)
        labels, mask = np.array([[0.0], [1.0]]), np.ones((2, 1), bool)
        preds = model.forward(oracles.random_fc(4, 9, batch=2))
        # scale layer 0's logits through the graph so it wins without detaching it
        from lcm.core import ops
        sharpened = list(preds.layers)
        onehot = np.array([[1.0, -1.0], [-1.0, 1.0]])
        sharpened[0] = ops.add(sharpened[0], Tensor(40.0 * onehot))
        preds = PerLayerPredictions(sharpened, schema, preds.single)
        breakdown, records = stage2_loss(preds, labels, mask)
        assert records[0].layer == 1
        current_tape().backward(breakdown.total)
        for layer in (1, 2):
            for name in ("self.q.weight", "cross.k.weight", "ffn.up.weight", "ln_ffn.gain"):
                g = model.params[f"layers.{layer}.{name}"].grad
                assert g is None or np.all(g == 0), name
        assert np.abs(model.params["layers.0.cross.k.weight"].grad).sum() > 0


class TestSchedule:
    def test_stage_switch(self):
        cfg = TrainConfig(max_epochs=10, momentum_epochs=3)
        assert [cfg.stage(e) for e in range(5)] == [MOMENTUM] * 3 + [ADAPTIVE] * 2
        assert TrainConfig(max_epochs=4, momentum_epochs=0, supervise="last").stage(0) == LAST

    @pytest.mark.parametrize("kw", [dict(max_epochs=3, momentum_epochs=4), dict(momentum_epochs=-1),
                                     dict(lr=0.0), dict(supervise="best"), dict(stage1_average="mode")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    @pytest.mark.parametrize("m,expect", [(4, [MOMENTUM] * 4), (0, [ADAPTIVE] * 4),
                                         (2, [MOMENTUM] * 2 + [ADAPTIVE] * 2)])
    def test_runs_reachable(self, m, expect):
        data = small_data()
        model = LcmModel(ModelConfig(2, 2, 8, 4, data.schema), seed=0)
        res = train(model, data, TrainConfig(lr=1e-3, batch_size=4, max_epochs=4, momentum_epochs=m))
        assert [h["stage"] for h in res.history] == expect

    def test_last_layer_baseline(self):
        data = small_data()
        model = LcmModel(ModelConfig(3, 2, 8, 4, data.schema), seed=0)
        res = train(model, data, TrainConfig(lr=1e-3, batch_size=4, max_epochs=2, momentum_epochs=0, supervise="last"))
        assert all(h["stage"] == LAST for h in res.history)
        assert all(hist == [0, 0, 3] for hist in res.histograms.values())


class TestTrainLoop:
    def test_histogram_rows_sum_to_batches(self):
        data = small_data()
        model = LcmModel(ModelConfig(3, 2, 8, 4, data.schema), seed=1)
        res = train(model, data, TrainConfig(lr=1e-3, batch_size=5, max_epochs=3, momentum_epochs=1))
        batches = math.ceil(len(data) / 5)
        for h in res.history:
            assert all(sum(v) == batches for v in h["selections"].values())

    def test_determinism(self):
        def run():
            clear_tape()
            data = small_data(seed=3)
            model = LcmModel(ModelConfig(2, 2, 8, 4, data.schema), seed=3)
            res = train(model, data, TrainConfig(lr=1e-3, batch_size=4, max_epochs=3, momentum_epochs=1, seed=3))
            return json.dumps(res.history), json.dumps(res.checkpoint.to_json())
        assert run() == run()

    def test_loss_decreases(self):
        data = small_data(seed=4)
        model = LcmModel(ModelConfig(2, 2, 8, 4, data.schema), seed=4)
        res = train(model, data, TrainConfig(lr=3e-3, batch_size=4, max_epochs=15, momentum_epochs=2))
        assert res.history[-1]["loss"] < res.history[0]["loss"]

    def test_early_stopping(self):
        data = small_data(seed=5)
        model = LcmModel(ModelConfig(1, 1, 4, 4, data.schema), seed=5)
        res = train(model, data, TrainConfig(lr=1e-9, batch_size=12, max_epochs=50, momentum_epochs=0, patience=2))
        assert len(res.history) < 50
        best = res.checkpoint.train_state["epoch"]
        assert len(res.history) - 1 - best == 2

    def test_best_checkpoint_restores_score(self):
        data = small_data(seed=6)
        model = LcmModel(ModelConfig(2, 2, 8, 4, data.schema), seed=6)
        res = train(model, data, TrainConfig(lr=3e-3, batch_size=4, max_epochs=6, momentum_epochs=1))
        best = res.checkpoint
        entry = res.history[best.train_state["epoch"]]
        assert best.train_state["best_val_score"] == max(h["val_score"] for h in res.history)
        assert best.histograms == entry["selections"]

    def test_schema_mismatch(self):
        data = small_data()
        other = PhenotypeSchema((categorical("z", 2),))
        with pytest.raises(ConfigError):
            train(LcmModel(ModelConfig(1, 1, 4, 4, other)), data, TrainConfig(max_epochs=1, momentum_epochs=0))

    def test_region_mismatch(self):
        data = small_data()
        with pytest.raises(ConfigError):
            train(LcmModel(ModelConfig(1, 1, 4, 5, data.schema)), data, TrainConfig(max_epochs=1, momentum_epochs=0))

    def test_empty_fold(self):
        data = small_data()
        with pytest.raises(DataError):
            train(LcmModel(ModelConfig(1, 1, 4, 4, data.schema)), data.subset([]),
                  TrainConfig(max_epochs=1, momentum_epochs=0))

    def test_validation_split(self):
        data = small_data(per_class=10)
        fit, val = split_validation(data, 0.1, 0)
        assert len(val) == 2 and len(fit) == 18
        assert not set(fit.subject_ids) & set(val.subject_ids)

    def test_continuous_scaling(self):
        data = small_data(tasks=(categorical("a", 2), continuous("c")))
        samples = data.samples()
        scaler = TargetScaler.fit(samples, data.schema)
        z = scaler.transform(samples.labels, data.schema)
        assert abs(z[:, 1].mean()) < 1e-12 and abs(z[:, 1].std() - 1) < 1e-12
        np.testing.assert_array_equal(z[:, 0], samples.labels[:, 0])
        np.testing.assert_allclose(scaler.inverse("c", z[:, 1]), samples.labels[:, 1], atol=1e-12)


class TestPredictTest:
    def model(self, layers=5):
        return oracles.random_model(layers=layers, schema=oracles.mixed_schema(), seed=11, std=0.3)

    def test_concentrated(self):
        model = self.model()
        hist = {"a": [0, 0, 9, 0, 0], "c": [1, 0, 0, 0, 0], "b": [0, 0, 0, 0, 4]}
        assert chosen_layers(model.config.schema, hist, 5) == {"a": 2, "c": 0, "b": 4}

    def test_tie_lowest(self):
        model = self.model()
        hist = {"a": [0, 3, 0, 0, 3], "c": [2, 2, 2, 2, 2], "b": [0, 0, 0, 1, 1]}
        assert chosen_layers(model.config.schema, hist, 5) == {"a": 1, "c": 0, "b": 3}

    def test_missing_falls_back(self, caplog):
        model = self.model()
        with caplog.at_level(logging.WARNING, logger="lcm.training"):
            got = chosen_layers(model.config.schema, {"a": [1, 0, 0, 0, 0]}, 5)
        assert got == {"a": 0, "c": 4, "b": 4}
        assert "last layer" in caplog.text

    def test_consistent_with_forward(self):
        model = self.model()
        hist = {"a": [0, 0, 5, 0, 0], "c": [0, 1, 0, 0, 0], "b": [0, 0, 0, 2, 0]}
        ckpt = Checkpoint.from_model(model, histograms=hist, scaler={"c": [1.5, 2.0]})
        m = oracles.random_fc(4, 12, batch=3)
        out = predict_test(model, ckpt, m)
        full = model.forward(m)
        np.testing.assert_array_equal(out["a"], np.argmax(full.layers[2].data[:, 0:3], axis=1))
        np.testing.assert_array_equal(out["c"], full.layers[1].data[:, 3] * 2.0 + 1.5)
        np.testing.assert_array_equal(out["b"], np.argmax(full.layers[3].data[:, 4:6], axis=1))
        logits, layer_of = predict_logits(model, m[0], hist)
        assert logits["a"].shape == (3,) and layer_of == {"a": 2, "c": 1, "b": 3}


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        data = small_data(seed=7)
        model = LcmModel(ModelConfig(2, 2, 8, 4, data.schema), seed=7)
        res = train(model, data, TrainConfig(lr=1e-3, batch_size=4, max_epochs=2, momentum_epochs=1))
        path = tmp_path / "c.json"
        res.checkpoint.save(path)
        back = Checkpoint.load(path)
        assert back.params.keys() == res.checkpoint.params.keys()
        for k, v in res.checkpoint.params.items():
            assert back.params[k].tobytes() == v.tobytes()
        for a, b in zip(back.optimizer.m + back.optimizer.v, res.checkpoint.optimizer.m + res.checkpoint.optimizer.v):
            assert a.tobytes() == b.tobytes()
        assert back.histograms == res.checkpoint.histograms
        back.save(tmp_path / "d.json")
        assert (tmp_path / "d.json").read_bytes() == path.read_bytes()
        m = data.samples().fc[:3]
        best = res.checkpoint.model().forward(m).layers[1].data
        np.testing.assert_array_equal(back.model().forward(m).layers[1].data, best)

    def test_bad_version(self, tmp_path):
        model = oracles.random_model()
        obj = Checkpoint.from_model(model).to_json()
        obj["format_version"] = 99
        with pytest.raises(DataError):
            Checkpoint.from_json(obj)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            Checkpoint.load(tmp_path / "nope.json")
