"""Pretrain on tasks A and B, then add a new task C to the token table and
finetune on a 10% few-shot subset, comparing against training from scratch."""
from lcm.core import Rng
from lcm.data import Dataset, PhenotypeSchema, SubjectRecord, SynthConfig, categorical, synth_generate
from lcm.evaluation import evaluate
from lcm.finetune import FinetuneSpec, assign_pseudo_labels, extend_tokens, fewshot_subsample, finetune
from lcm.model import LcmModel, ModelConfig
from lcm.training import TrainConfig, train


def keep_tasks(ds, names):
    schema = PhenotypeSchema(tuple(ds.schema.task(n) for n in names))
    return Dataset(schema, [SubjectRecord(r.subject_id, {n: r.labels[n] for n in names}, [], r.fcs)
                            for r in ds.records], ds.region_count)


A, B, C = categorical("A", 2), categorical("B", 2), categorical("C", 2)
full = synth_generate(SynthConfig(tasks=(A, B, C), subjects_per_class=40, regions=16, timepoints=64,
                                  coupling=0.8, seed=0))
ids = full.subject_ids
order = Rng(0, "split").permutation(len(ids))
pretrain_set = keep_tasks(full.subset([ids[i] for i in order[:len(ids) // 2]]), ["A", "B"])
downstream = keep_tasks(full.subset([ids[i] for i in order[len(ids) // 2:]]), ["C"])
down_ids = downstream.subject_ids
order = Rng(1, "tt").permutation(len(down_ids))
test = downstream.subset([down_ids[i] for i in order[:len(down_ids) // 2]])
pool = downstream.subset([down_ids[i] for i in order[len(down_ids) // 2:]])

base = LcmModel(ModelConfig(4, 4, 32, 16, pretrain_set.schema), seed=0)
pretrained = train(base, pretrain_set, TrainConfig(lr=1e-3, batch_size=16, max_epochs=40, patience=1000)).checkpoint
print(f"pretrained on {len(pretrain_set)} subjects; model has {base.num_parameters()} parameters")

# Pretrained tasks get no pseudo-label on the downstream subjects.
spec = FinetuneSpec([C], {"A": "skip", "B": "skip"}, fewshot_ratio=0.1)
held_out = assign_pseudo_labels(test, spec, pretrain_set.schema)
for seed in range(3):
    few = assign_pseudo_labels(fewshot_subsample(pool, spec.fewshot_ratio, seed, "C"), spec, pretrain_set.schema)
    config = TrainConfig(lr=1e-3, batch_size=16, max_epochs=30, patience=1000, seed=seed)
    extended = extend_tokens(pretrained, [C], seed)
    ft = finetune(extended, few, config).checkpoint
    scratch = train(LcmModel(ModelConfig(4, 4, 32, 16, extended.schema), seed=seed), few, config).checkpoint
    f1_ft = evaluate(ft.model(), ft, held_out).task("C").macro_f1
    f1_scratch = evaluate(scratch.model(), scratch, held_out).task("C").macro_f1
    print(f"seed {seed}: {len(few.subject_ids)} few-shot subjects, macro-F1 finetuned {f1_ft:.3f}"
          f" vs scratch {f1_scratch:.3f}")
