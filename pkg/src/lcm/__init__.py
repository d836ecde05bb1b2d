"""Multitask connectome transformer on a float64 reverse-mode autodiff engine."""
__version__ = "0.1.0"

from .checkpoint import Checkpoint
from .data import (Dataset, FoldSplit, PhenotypeSchema, SubjectRecord, SynthConfig, TaskSpec, categorical,
                   compute_fc, continuous, kfold_split, load_dataset, save_dataset, synth_generate)
from .errors import ConfigError, DataError, DegenerateSignal
from .evaluation import (EvalReport, accuracy, aggregate_attention, best_layer_report, confusion_matrix,
                         evaluate, macro_f1, scaling_study)
from .finetune import (ExtendedModel, FinetuneSpec, assign_pseudo_labels, extend_tokens, fewshot_subsample,
                       finetune)
from .model import LcmModel, ModelConfig, PerLayerPredictions, export_cross_attention, parameter_count
from .training import TrainConfig, TrainResult, predict_test, train, train_fold

__all__ = [name for name in dir() if not name.startswith("_")]
