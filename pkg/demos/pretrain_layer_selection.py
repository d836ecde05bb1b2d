"""Pretrain on two tasks with the momentum-then-adaptive schedule, then see
which layer each task settled on and where its tokens look in the connectome."""
from lcm.data import SynthConfig, categorical, kfold_split, synth_generate
from lcm.evaluation import aggregate_attention, best_layer_report, evaluate
from lcm.model import LcmModel, ModelConfig
from lcm.training import TrainConfig, split_validation, train

data = synth_generate(SynthConfig(tasks=(categorical("sex", 2), categorical("state", 3)), subjects_per_class=24,
                                  regions=16, timepoints=64, seed=1))
split = kfold_split(data, 4, seed=0)
train_set, test_set = data.subset(split.train_subjects(0)), data.subset(split.subjects(0))
fit_set, val_set = split_validation(train_set, 0.1, seed=0)

model = LcmModel(ModelConfig(layers=4, heads=4, dim=32, regions=16, schema=data.schema), seed=0)
config = TrainConfig(lr=1e-3, batch_size=16, max_epochs=60, momentum_epochs=5, patience=20)
result = train(model, fit_set, config, val_data=val_set)
for h in result.history[::10]:
    print(f"epoch {h['epoch']:2d} [{h['stage']}] loss {h['loss']:.3f} val {h['val_scores']}")

ckpt = result.checkpoint
best = ckpt.model()
report = evaluate(best, ckpt, test_set, fold=0)
for t in report.tasks:
    print(f"{t.task}: layer {t.layer}, accuracy {t.accuracy:.3f}, macro-F1 {t.macro_f1:.3f}")

# Selections from the last epoch run, as per-task layer distributions.
for hist in best_layer_report(result.records, layers=4):
    print(hist.task, "layer frequency", [round(f, 2) for f in hist.frequency], hist.quantiles())

# Cross-attention of each class token over regions, averaged per true class.
for s in aggregate_attention(best, ckpt, test_set, "state"):
    top = s.weights.argmax(axis=1)
    print(f"state == {s.group} ({s.count} scans): most attended region per class token {top.tolist()}")
