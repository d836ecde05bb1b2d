"""Turn synthetic BOLD-like scans into correlation connectomes and split the
subjects into folds that never share a subject across train and test."""
import numpy as np

from lcm.data import SynthConfig, categorical, check_fc, compute_fc, continuous, kfold_split, synth_generate

data = synth_generate(SynthConfig(tasks=(categorical("state", ["rest", "task"]), continuous("age")),
                                  subjects_per_class=6, regions=10, timepoints=80, scans_per_subject=2, seed=3))
print(f"{len(data.subject_ids)} subjects, {len(data)} scans, {data.region_count} regions")

# Every stored connectome is a Pearson correlation matrix.
record = data.records[0]
fc = compute_fc(record.bold[0])
check_fc(fc)
print("recomputed matches stored:", np.array_equal(fc, record.fcs[0]))
print("off-diagonal range:", fc[~np.eye(10, dtype=bool)].min().round(3), fc[~np.eye(10, dtype=bool)].max().round(3))

# Correlation ignores per-region scale and offset.
scaled = record.bold[0] * np.linspace(0.5, 3.0, 10)[:, None] + 7.0
print("affine invariant:", np.allclose(compute_fc(scaled), fc, atol=1e-10))

split = kfold_split(data, 3, seed=0)
print("fold sizes:", split.sizes())
for f in range(3):
    overlap = set(split.subjects(f)) & set(split.train_subjects(f))
    print(f"fold {f}: {len(split.subjects(f))} test subjects, overlap with train = {len(overlap)}")
