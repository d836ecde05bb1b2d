"""``lcm`` command line: fc, synth, pretrain, finetune, eval, interpret, scale-study.

Exit status is 0 on success, 1 for invalid input (one line on stderr) and 2
for internal errors. Every command validates its inputs before writing and
records a ``run.json`` provenance file in the output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from . import __version__
from .checkpoint import FORMAT_VERSION, Checkpoint
from .core.rng import Rng
from .data import (Dataset, FoldSplit, SynthConfig, TaskSpec, align_to_schema, compute_fc, kfold_split,
                   load_dataset, read_scan, save_dataset, save_fc, synth_generate)
from .errors import ConfigError, DataError
from .evaluation import (aggregate_attention, best_layer_csv, best_layer_report, evaluate, report_name,
                         scaling_study, write_json, write_text)
from .finetune import FinetuneSpec, assign_pseudo_labels, extend_tokens, fewshot_subsample, finetune
from .model import LcmModel, ModelConfig
from .training import LayerSelectionRecord, TrainConfig, split_validation, train

log = logging.getLogger("lcm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def content_hash(path: Path) -> str:
    """Git-style blob hash (over ``blob <size>\\0<bytes>``) using SHA-256."""
    data = path.read_bytes()
    return hashlib.sha256(b"blob %d\0" % len(data) + data).hexdigest()


def _manifest_inputs(manifest: Path) -> dict[str, str]:
    out = {str(manifest): content_hash(manifest)}
    obj = json.loads(manifest.read_text(encoding="utf-8"))
    for rec in obj.get("records", []):
        for s in rec.get("scans", []):
            p = manifest.parent / s
            out[str(p)] = content_hash(p)
    return out


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _out_dir(args) -> Path:
    chosen = args.out_dir or os.environ.get("LCM_OUT_DIR")
    if not chosen:
        raise ConfigError("no output directory: pass --out-dir or set LCM_OUT_DIR")
    return Path(chosen)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _dataset_name(args, manifest: Path) -> str:
    return args.name or manifest.resolve().parent.name or "dataset"


def _write_run(out: Path, args, inputs: dict[str, str], extra: dict | None = None) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    record = {"command": args.command, "config": config, "format_version": FORMAT_VERSION,
              "lcm_version": __version__, "inputs": inputs,
              "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    if extra:
        record.update(extra)
    write_text(out / "run.json", _dump(record))


def _fold_seed(seed: int, fold: int) -> int:
    return int(Rng(seed, f"fold{fold}").integers(0, 2**62))


def _parse_list(text: str, kind=int) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def _parse_tasks(text: str) -> list[TaskSpec]:
    """``name:classes`` pairs, with ``name:cont`` for a continuous task."""
    tasks = []
    for item in text.split(","):
        name, _, kind = item.strip().partition(":")
        if not name or not kind:
            raise ConfigError(f"task entry {item!r} must look like name:classes or name:cont")
        if kind == "cont":
            tasks.append(TaskSpec(name, "continuous", 1))
        else:
            try:
                tasks.append(TaskSpec(name, "categorical", int(kind)))
            except ValueError:
                raise ConfigError(f"task entry {item!r}: class count must be an integer") from None
    return tasks


def _train_config(args, seed: int) -> TrainConfig:
    momentum = min(5, args.epochs) if args.momentum_epochs is None else args.momentum_epochs
    return TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
                       momentum_epochs=momentum, patience=args.patience, seed=seed,
                       supervise=args.supervise, stage1_average=args.stage1_average,
                       target_accuracy=args.target_accuracy,
                       freeze_backbone=getattr(args, "freeze_backbone", False))


def _folds(data: Dataset, k: int, seed: int, only: int | None) -> tuple[FoldSplit | None, list[int]]:
    if k < 1:
        raise ConfigError("--folds must be at least 1")
    if k == 1:
        if only not in (None, 0):
            raise ConfigError("with --folds 1 the only fold is 0")
        return None, [0]
    split = kfold_split(data, k, seed)
    if only is not None and not 0 <= only < k:
        raise ConfigError(f"--fold {only} outside [0, {k})")
    return split, [only] if only is not None else list(range(k))


def _history_lines(history: list[dict]) -> str:
    return "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)


def _records_json(records: list[LayerSelectionRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)


def _run_parallel(fn, jobs: list[tuple], threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------- commands

def cmd_fc(args) -> int:
    if bool(args.scans) == bool(args.data):
        raise ConfigError("pass either --scans or --data")
    out = _out_dir(args)
    if args.data:
        manifest = _existing(args.data, "manifest")
        data = load_dataset(manifest)
        inputs = _manifest_inputs(manifest)
        save_dataset(data, out, write_bold=False)
    else:
        paths = [_existing(s, "scan") for s in args.scans]
        fcs = [compute_fc(read_scan(p), context=str(p)) for p in paths]
        inputs = {str(p): content_hash(p) for p in paths}
        out.mkdir(parents=True, exist_ok=True)
        for p, fc in zip(paths, fcs):
            save_fc(fc, out / f"{p.stem}_fc.csv")
    _write_run(out, args, inputs)
    return 0


def cmd_synth(args) -> int:
    if args.config:
        path = _existing(args.config, "synth config")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        obj.setdefault("seed", args.seed)
        cfg = SynthConfig.from_json(obj)
        inputs = {str(path): content_hash(path)}
    else:
        cfg = SynthConfig(tasks=_parse_tasks(args.tasks), subjects_per_class=args.subjects_per_class,
                          regions=args.regions, timepoints=args.timepoints, latent_dim=args.latent_dim,
                          effect=args.effect, noise=args.noise, coupling=args.coupling, shared=args.shared,
                          scans_per_subject=args.scans_per_subject, seed=args.seed)
        inputs = {}
    cfg.validate()
    out = _out_dir(args)
    data = synth_generate(cfg)
    save_dataset(data, out, write_bold=not args.write_fc)
    _write_run(out, args, inputs, {"synth_config": {**cfg.__dict__, "tasks": [t.to_json() for t in cfg.tasks]}})
    return 0


def _pretrain_fold(data: Dataset, split: FoldSplit | None, fold: int, model_cfg: ModelConfig,
                   train_cfg: TrainConfig, val_fraction: float, prov: dict):
    train_part = data if split is None else data.subset(split.train_subjects(fold))
    if len(train_part) == 0:
        raise DataError(f"fold {fold}: training portion is empty")
    fit, val = split_validation(train_part, val_fraction, train_cfg.seed)
    model = LcmModel(model_cfg, seed=train_cfg.seed)
    return train(model, fit, train_cfg, val, provenance=prov)


def _save_fold_outputs(out: Path, name: str, fold: int, seed: int, result) -> None:
    fold_dir = out / f"fold{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(fold_dir / "checkpoint.json")
    write_text(out / report_name(name, fold, seed, "history", "jsonl"), _history_lines(result.history))
    write_text(out / report_name(name, fold, seed, "selections", "jsonl"), _records_json(result.records))


def cmd_pretrain(args) -> int:
    manifest = _existing(args.data, "manifest")
    data = load_dataset(manifest)
    model_cfg = ModelConfig(args.layers, args.heads, args.dim, data.region_count, data.schema, args.ffn_factor)
    _train_config(args, args.seed)
    split, folds = _folds(data, args.folds, args.seed, args.fold)
    out = _out_dir(args)
    name = _dataset_name(args, manifest)
    jobs = []
    for f in folds:
        cfg = _train_config(args, _fold_seed(args.seed, f))
        prov = {"command": "pretrain", "dataset": name, "fold": f, "k": args.folds, "seed": args.seed,
                "train_config": cfg.to_json(), "assignment": split.assignment if split else None}
        jobs.append((data, split, f, model_cfg, cfg, args.val_fraction, prov))
    results = _run_parallel(_pretrain_fold, jobs, args.threads)
    out.mkdir(parents=True, exist_ok=True)
    if split is not None:
        write_text(out / "folds.json", _dump(split.to_json()))
    summary = []
    for f, res in zip(folds, results):
        _save_fold_outputs(out, name, f, args.seed, res)
        summary.append({"fold": f, "best_epoch": res.checkpoint.train_state.get("epoch"),
                        "best_val_score": res.checkpoint.train_state.get("best_val_score"),
                        "epochs_run": len(res.history), "histograms": res.histograms})
    write_text(out / report_name(name, "all", args.seed, "summary", "json"), _dump(summary))
    _write_run(out, args, _manifest_inputs(manifest))
    return 0


def _stratify_task(spec: FinetuneSpec) -> str | None:
    return next((t.name for t in spec.new_tasks if t.categorical), None)


def _finetune_fold(base: Checkpoint, data: Dataset, split: FoldSplit | None, fold: int, spec: FinetuneSpec,
                   ratio: float, train_cfg: TrainConfig, val_fraction: float, prov: dict):
    train_part = data if split is None else data.subset(split.train_subjects(fold))
    few = fewshot_subsample(train_part, ratio, train_cfg.seed, _stratify_task(spec))
    labelled = assign_pseudo_labels(few, spec, base.schema)
    fit, val = split_validation(labelled, val_fraction, train_cfg.seed)
    extended = extend_tokens(base, spec.new_tasks, train_cfg.seed, regions=data.region_count)
    prov = {**prov, "fewshot_subjects": len(few.subject_ids)}
    return finetune(extended, fit, train_cfg, val, provenance=prov)


def cmd_finetune(args) -> int:
    base_path = _existing(args.base, "base checkpoint")
    manifest = _existing(args.data, "manifest")
    spec_path = _existing(args.spec, "finetune spec")
    base = Checkpoint.load(base_path)
    data = load_dataset(manifest)
    spec = FinetuneSpec.load(spec_path)
    ratio = args.ratio if args.ratio is not None else spec.fewshot_ratio
    if not 0 < ratio <= 1:
        raise ConfigError(f"--ratio must lie in (0, 1], got {ratio}")
    spec.validate_against(base.schema)
    if data.region_count != base.config.regions:
        raise ConfigError(f"data has {data.region_count} regions, checkpoint expects {base.config.regions}")
    assign_pseudo_labels(data, spec, base.schema)      # validates the label map up front
    _train_config(args, args.seed)
    split, folds = _folds(data, args.folds, args.seed, args.fold)
    out = _out_dir(args)
    name = _dataset_name(args, manifest)
    jobs = []
    for f in folds:
        cfg = _train_config(args, _fold_seed(args.seed, f))
        prov = {"command": "finetune", "dataset": name, "fold": f, "k": args.folds, "seed": args.seed,
                "ratio": ratio, "base_checkpoint": str(base_path), "finetune_spec": spec.to_json(),
                "train_config": cfg.to_json(), "assignment": split.assignment if split else None}
        jobs.append((base, data, split, f, spec, ratio, cfg, args.val_fraction, prov))
    results = _run_parallel(_finetune_fold, jobs, args.threads)
    out.mkdir(parents=True, exist_ok=True)
    if split is not None:
        write_text(out / "folds.json", _dump(split.to_json()))
    for f, res in zip(folds, results):
        _save_fold_outputs(out, name, f, args.seed, res)
    inputs = {str(base_path): content_hash(base_path), str(spec_path): content_hash(spec_path),
              **_manifest_inputs(manifest)}
    _write_run(out, args, inputs)
    return 0


def _test_subset(ckpt: Checkpoint, data: Dataset, fold: int | None, folds_file: str | None) -> Dataset:
    if fold is None:
        return data
    if folds_file:
        assignment = FoldSplit.from_json(json.loads(_existing(folds_file, "folds file").read_text())).assignment
    else:
        assignment = ckpt.provenance.get("assignment")
    if not assignment:
        raise ConfigError("checkpoint has no fold assignment; pass --folds-file or omit --fold")
    test = data.subset([s for s in data.subject_ids if assignment.get(s) == fold])
    if len(test) == 0:
        raise DataError(f"fold {fold} has no subjects in the data")
    return test


def _load_eval_inputs(args):
    ckpt_path = _existing(args.ckpt, "checkpoint")
    manifest = _existing(args.data, "manifest")
    ckpt = Checkpoint.load(ckpt_path)
    data = load_dataset(manifest)
    if data.region_count != ckpt.config.regions:
        raise ConfigError(f"data has {data.region_count} regions, checkpoint expects {ckpt.config.regions}")
    data = align_to_schema(data, ckpt.schema)
    test = _test_subset(ckpt, data, args.fold, args.folds_file)
    inputs = {str(ckpt_path): content_hash(ckpt_path), **_manifest_inputs(manifest)}
    return ckpt, ckpt_path, manifest, test, inputs


def cmd_eval(args) -> int:
    ckpt, ckpt_path, manifest, test, inputs = _load_eval_inputs(args)
    report = evaluate(ckpt.model(), ckpt, test, args.fold, args.seed, str(ckpt_path))
    out = _out_dir(args)
    name = _dataset_name(args, manifest)
    fold = "all" if args.fold is None else args.fold
    write_json(out / report_name(name, fold, args.seed, "metrics", "json"), report.to_json())
    write_text(out / report_name(name, fold, args.seed, "metrics"), report.metrics_csv())
    for t in report.tasks:
        if t.confusion is not None:
            write_text(out / report_name(name, fold, args.seed, f"confusion-{t.task}"), report.confusion_csv(t.task))
    _write_run(out, args, inputs)
    return 0


def _selection_records(path: str) -> list[LayerSelectionRecord]:
    records = []
    for line in _existing(path, "selections file").read_text(encoding="utf-8").splitlines():
        if line.strip():
            r = json.loads(line)
            records.append(LayerSelectionRecord(r["epoch"], r["batch"], r["task"], r["layer"], r["scores"]))
    return records


def cmd_interpret(args) -> int:
    ckpt, _, manifest, test, inputs = _load_eval_inputs(args)
    tasks = [args.task] if args.task else [t.name for t in ckpt.schema if t.categorical]
    for t in tasks:
        if not ckpt.schema.task(t).categorical:
            raise ConfigError(f"task {t!r} is continuous; attention summaries need a categorical task")
    if args.selections:
        records = _selection_records(args.selections)
        inputs[args.selections] = content_hash(Path(args.selections))
    else:
        records = [LayerSelectionRecord(-1, i, task, layer + 1, [])
                   for task, hist in ckpt.histograms.items() for layer, c in enumerate(hist) for i in range(c)]
    model = ckpt.model()
    summaries = {t: aggregate_attention(model, ckpt, test, t, args.group_by) for t in tasks}
    out = _out_dir(args)
    name = _dataset_name(args, manifest)
    fold = "all" if args.fold is None else args.fold
    for t, groups in summaries.items():
        for s in groups:
            write_text(out / report_name(name, fold, args.seed, f"attention-{t}-{args.group_by}{s.group}"),
                       s.to_csv())
    if records:
        report = best_layer_report(records, ckpt.config.layers)
        write_text(out / report_name(name, fold, args.seed, "bestlayer"), best_layer_csv(report))
        write_json(out / report_name(name, fold, args.seed, "bestlayer", "json"), [h.to_json() for h in report])
    _write_run(out, args, inputs)
    return 0


def cmd_scale_study(args) -> int:
    manifest = _existing(args.data, "manifest")
    data = load_dataset(manifest)
    depths = [d if d in ("small", "mid", "big") else int(d) for d in args.depths.split(",") if d]
    seeds = _parse_list(args.seeds)
    cfg = _train_config(args, args.seed)
    if args.dim % args.heads:
        raise ConfigError(f"--dim {args.dim} is not divisible by --heads {args.heads}")
    out = _out_dir(args)
    table = scaling_study(depths, data, seeds, cfg, args.dim, args.heads, baseline=not args.no_baseline)
    name = _dataset_name(args, manifest)
    write_text(out / report_name(name, "all", args.seed, "scaling"), table.to_csv())
    write_json(out / report_name(name, "all", args.seed, "scaling", "json"), table.to_json())
    _write_run(out, args, _manifest_inputs(manifest))
    return 0


# ---------------------------------------------------------------- parser

def _sanitize_depths(text: str) -> str:
    for d in text.split(","):
        if d and d not in ("small", "mid", "big") and not d.isdigit():
            raise argparse.ArgumentTypeError(f"invalid depth {d!r}")
    return text


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=None, help="defaults to $LCM_OUT_DIR")
    common.add_argument("--threads", type=int, default=1, help="parallel fold workers")
    common.add_argument("--log-level", default="WARNING", type=str.upper, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--name", default=None, help="dataset name used in report file names")

    training = _Parser(add_help=False)
    training.add_argument("--epochs", type=int, default=200)
    training.add_argument("--momentum-epochs", type=int, default=None, help="default: min(5, epochs)")
    training.add_argument("--lr", type=float, default=1e-4)
    training.add_argument("--batch-size", type=int, default=128)
    training.add_argument("--patience", type=int, default=50)
    training.add_argument("--supervise", choices=["two_stage", "last"], default="two_stage")
    training.add_argument("--stage1-average", choices=["logits", "loss"], default="logits")
    training.add_argument("--target-accuracy", type=float, default=None)

    parser = _Parser(prog="lcm", description="Multitask connectome transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fc", parents=[common], help="compute FC matrices from BOLD scans")
    p.add_argument("--scans", nargs="+")
    p.add_argument("--data", help="manifest whose scans are converted to FC files")
    p.set_defaults(handler=cmd_fc)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON synth config (overrides the flags below)")
    p.add_argument("--tasks", default="a:2,b:2")
    p.add_argument("--subjects-per-class", type=int, default=20)
    p.add_argument("--regions", type=int, default=16)
    p.add_argument("--timepoints", type=int, default=100)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--effect", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--coupling", type=float, default=0.5)
    p.add_argument("--shared", type=float, default=0.5)
    p.add_argument("--scans-per-subject", type=int, default=1)
    p.add_argument("--write-fc", action="store_true", help="store FC matrices instead of BOLD")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common, training], help="multitask pretraining with k-fold CV")
    p.add_argument("--data", required=True)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-factor", type=int, default=4)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=None, help="run a single fold")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common, training], help="finetune a checkpoint on new tasks")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--ratio", type=float, default=None, help="overrides fewshot_ratio from --spec")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--freeze-backbone", action="store_true")
    p.set_defaults(handler=cmd_finetune)

    for name, handler, text in (("eval", cmd_eval, "metrics on a test fold"),
                                ("interpret", cmd_interpret, "attention maps and best-layer reports")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--fold", type=int, default=None)
        p.add_argument("--folds-file", default=None)
        if name == "interpret":
            p.add_argument("--task", default=None)
            p.add_argument("--group-by", choices=["label", "prediction"], default="label")
            p.add_argument("--selections", default=None, help="selection records (JSON lines)")
        p.set_defaults(handler=handler)

    p = sub.add_parser("scale-study", parents=[common, training], help="depth-scaling study")
    p.add_argument("--data", required=True)
    p.add_argument("--depths", type=_sanitize_depths, default="2,4,8")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(handler=cmd_scale_study)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lcm: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        return args.handler(args)
    except (ConfigError, DataError, FileNotFoundError, UsageError) as exc:
        print(f"lcm: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level guard maps crashes to exit 2
        log.debug("internal error", exc_info=True)
        print(f"lcm: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
