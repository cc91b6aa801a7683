"""Command-line pipeline wiring the modules into reproducible runs.

Subcommands: synth, ingest, featurize, filter, train-haptic,
train-forest, train-fusion, finetune, eval, predict, compliance-head.
Every run reads one PipelineConfig (YAML file plus flag overrides),
writes its artifacts into a fresh output location (refusing to clobber
without --overwrite), and drops a run manifest recording the config
hash, seed, and library versions. Identical config + seed means
identical artifacts.

Exit codes: 0 success, 1 validation error (bad flags, config, or
inputs), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .features import (
    FeaturizedTrial,
    FeatureTensor,
    NoContactError,
    featurize_trial,
    filter_dataset,
    load_tensor,
    save_tensor,
)
from .filters import FilterConfig
from .fusion import (
    FINETUNE_FRACTION_PRESETS,
    FileReplayProvider,
    FusionConfig,
    FusionParams,
    MockVisionProvider,
    UNCERTAINTY_PRESETS,
    VisionPrior,
    finetune_fusion,
    load_priors,
    make_mock_prior_table,
    pretrain_fusion,
    priors_for_objects,
    save_priors,
    tiny_fusion_config,
    uncertainty_filter,
)
from .ingest import SessionFormatError, align_streams, load_session
from .materials import EMBODIMENTS, TRAIN_LABELS, TRAIN_LABEL_INDEX
from .models.encoder import (
    ArrayDataset,
    encoder_hash,
    fit_compliance_head,
    full_config,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
    save_dense_stack,
    stratified_object_split,
    tiny_config,
    train_encoder,
    write_history_csv,
)
from .models.forest import ForestConfig, RandomForest, summary_matrix
from .models.metrics import evaluate_predictions
from .models.nn import softmax
from .synth import ARCHETYPE_PRESETS, generate_session, make_benchmark_specs

PROFILES = ("tiny", "full")
DATA_ROOT_ENV = "CLAMP_DATA_ROOT"


class ValidationError(ValueError):
    """Bad flags, config, or input files; maps to exit code 1."""


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class PipelineConfig:
    """One document controlling every subcommand; flags override fields."""

    data_root: str = ""
    seed: int | None = None
    profile: str = "tiny"
    embodiment: str = "clamp_device"
    uncertainty: str = "eval"
    finetune_fraction: float = 0.07
    filter: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.seed is None:
            raise ValidationError("a seed is mandatory: pass --seed or set "
                                  "`seed` in the config file")
        if self.profile not in PROFILES:
            raise ValidationError(f"profile must be one of {PROFILES}")
        if self.embodiment not in EMBODIMENTS:
            raise ValidationError(f"embodiment must be one of {EMBODIMENTS}")
        if self.uncertainty not in UNCERTAINTY_PRESETS:
            raise ValidationError(
                f"unknown uncertainty preset {self.uncertainty!r}; expected "
                f"one of {sorted(UNCERTAINTY_PRESETS)}"
            )
        if self.finetune_fraction not in FINETUNE_FRACTION_PRESETS:
            raise ValidationError(
                f"finetune_fraction must be one of {FINETUNE_FRACTION_PRESETS}"
            )
        for name in ("filter", "encoder", "forest", "fusion"):
            if not isinstance(getattr(self, name), dict):
                raise ValidationError(f"config section {name!r} must be a map")


def load_pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    doc: dict = {}
    path = getattr(args, "config", None)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse {p}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{p}: config must be a key-value document")
        doc = loaded
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(
            f"unknown config keys: {sorted(unknown)}; expected {sorted(known)}"
        )
    for flag in ("seed", "profile", "embodiment"):
        value = getattr(args, flag, None)
        if value is not None:
            doc[flag] = value
    if not doc.get("data_root"):
        doc["data_root"] = os.environ.get(DATA_ROOT_ENV, ".")
    try:
        cfg = PipelineConfig(**doc)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc
    cfg.validate()
    return cfg


def config_sha256(cfg: PipelineConfig) -> str:
    doc = asdict(cfg)
    doc.pop("data_root")  # a mount point, not an experimental knob
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def resolve_path(raw: str, cfg: PipelineConfig) -> Path:
    p = Path(raw)
    return p if p.is_absolute() else Path(cfg.data_root) / p


def prepare_out_dir(raw: str, cfg: PipelineConfig, overwrite: bool) -> Path:
    path = resolve_path(raw, cfg)
    if path.exists() and not path.is_dir():
        raise ValidationError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not overwrite:
        raise ValidationError(
            f"{path} is not empty; pass --overwrite to replace its contents"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def prepare_out_file(raw: str, cfg: PipelineConfig, overwrite: bool) -> Path:
    path = resolve_path(raw, cfg)
    if path.exists() and not overwrite:
        raise ValidationError(f"{path} exists; pass --overwrite to replace it")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def require_dir(raw: str, cfg: PipelineConfig) -> Path:
    path = resolve_path(raw, cfg)
    if not path.is_dir():
        raise ValidationError(f"input directory not found: {path}")
    return path


def require_file(raw: str, cfg: PipelineConfig) -> Path:
    path = resolve_path(raw, cfg)
    if not path.is_file():
        raise ValidationError(f"input file not found: {path}")
    return path


def write_manifest(
    out_dir: Path, command: str, cfg: PipelineConfig, parameters: dict
) -> None:
    """Reproducibility record; deliberately free of timestamps and paths."""
    doc = {
        "command": command,
        "config_sha256": config_sha256(cfg),
        "seed": cfg.seed,
        "profile": cfg.profile,
        "embodiment": cfg.embodiment,
        "versions": {
            "clamp": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "parameters": parameters,
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )


# --------------------------------------------------------------------------
# Shared loading helpers


def _filter_config(cfg: PipelineConfig) -> FilterConfig:
    try:
        return FilterConfig(**cfg.filter)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad filter config: {exc}") from exc


def _encoder_config(cfg: PipelineConfig, epochs: int | None):
    overrides = dict(cfg.encoder)
    overrides["seed"] = cfg.seed
    if epochs is not None:
        overrides["epochs"] = epochs
    build = tiny_config if cfg.profile == "tiny" else full_config
    try:
        return build(**overrides)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad encoder config: {exc}") from exc


def _fusion_config(cfg: PipelineConfig, epochs: int | None) -> FusionConfig:
    overrides = dict(cfg.fusion)
    overrides["seed"] = cfg.seed
    if epochs is not None:
        overrides["epochs"] = epochs
    try:
        if cfg.profile == "tiny":
            return tiny_fusion_config(**overrides)
        fus = FusionConfig(**overrides)
        fus.validate()
        return fus
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad fusion config: {exc}") from exc


def _iter_sessions(in_dir: Path):
    found = False
    for session_dir in sorted(p for p in in_dir.iterdir() if p.is_dir()):
        if not (session_dir / "labels.json").is_file():
            continue
        found = True
        yield load_session(session_dir)
    if not found:
        raise ValidationError(f"no session directories under {in_dir}")


@dataclass
class FeaturizedStore:
    """A featurize output directory loaded back into memory."""

    dataset: ArrayDataset  # y indexes TRAIN_LABELS
    tensors: list[FeatureTensor]
    materials: tuple[str, ...]
    compliance: np.ndarray  # 0 = hard, 1 = soft
    trials: tuple[int, ...]


def load_featurized(in_dir: Path) -> FeaturizedStore:
    labels_path = in_dir / "labels.csv"
    if not labels_path.is_file():
        raise ValidationError(f"{in_dir} has no labels.csv (not a featurize "
                              "output directory?)")
    xs: list[np.ndarray] = []
    tensors: list[FeatureTensor] = []
    ys: list[int] = []
    comp: list[int] = []
    oids: list[str] = []
    trials: list[int] = []
    materials: list[str] = []
    with open(labels_path, newline="") as fh:
        for row in csv.DictReader(fh):
            material = row["material"]
            if material not in TRAIN_LABEL_INDEX:
                raise ValidationError(
                    f"{labels_path}: material {material!r} is not trainable"
                )
            tensor = load_tensor(in_dir / row["tensor_file"])
            tensors.append(tensor)
            xs.append(tensor.channels)
            ys.append(TRAIN_LABEL_INDEX[material])
            comp.append(1 if row["compliance"] == "soft" else 0)
            oids.append(row["object_id"])
            trials.append(int(row["trial"]))
            materials.append(material)
    if not xs:
        raise ValidationError(f"{labels_path} lists no trials")
    dataset = ArrayDataset(np.stack(xs), np.array(ys), tuple(oids))
    return FeaturizedStore(
        dataset=dataset,
        tensors=tensors,
        materials=tuple(materials),
        compliance=np.array(comp, dtype=np.int64),
        trials=tuple(trials),
    )


def _featurize_sessions(
    in_dir: Path, cfg: PipelineConfig
) -> tuple[list[FeaturizedTrial], list[tuple[str, int]], int]:
    """Featurize every trial under in_dir; returns (featurized, no-contact
    trials, session count)."""
    filter_cfg = _filter_config(cfg)
    featurized: list[FeaturizedTrial] = []
    no_contact: list[tuple[str, int]] = []
    n_sessions = 0
    for records, labels in _iter_sessions(in_dir):
        n_sessions += 1
        for rec in records:
            aligned = align_streams(rec)
            try:
                trial = featurize_trial(aligned, filter_cfg,
                                        embodiment=labels.embodiment)
            except NoContactError:
                no_contact.append((rec.object_id, rec.trial_index))
                continue
            trial.labels = labels
            featurized.append(trial)
    return featurized, no_contact, n_sessions


def _write_exclusions(path: Path, reports, no_contact) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["object_id", "trial", "retained", "rules"])
        rows = [
            (r.object_id, r.trial_index, r.retained,
             ";".join(sorted(r.rules_fired)))
            for r in reports
        ] + [(oid, k, False, "no_contact") for oid, k in no_contact]
        for oid, k, kept, rules in sorted(rows, key=lambda r: (r[0], r[1])):
            writer.writerow([oid, k, "yes" if kept else "no", rules])


def _load_encoder(path: Path):
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"cannot load checkpoint {path}: {exc}") from exc


def _provider_for(spec: str, store: FeaturizedStore, cfg: PipelineConfig):
    if spec in ("mock-informative", "mock-uniform"):
        by_object = {
            oid: mat
            for oid, mat in zip(store.dataset.object_ids, store.materials)
        }
        table = make_mock_prior_table(
            by_object, mode=spec.removeprefix("mock-"), seed=cfg.seed or 0
        )
        return MockVisionProvider(table)
    return FileReplayProvider(require_file(spec, cfg))


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    if args.objects < 1:
        raise ValidationError("--objects must be >= 1")
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    materials = None
    if args.materials:
        materials = [m.strip() for m in args.materials.split(",") if m.strip()]
    specs = make_benchmark_specs(
        args.objects,
        cfg.seed,
        materials=materials,
        embodiment=cfg.embodiment,
        heterogeneous_fraction=args.heterogeneous_fraction,
        n_trials=args.trials,
    )
    for spec in specs:
        generate_session(spec, out)
    write_manifest(
        out, "synth", cfg,
        {
            "objects": args.objects,
            "trials": args.trials,
            "materials": materials or sorted(ARCHETYPE_PRESETS),
            "heterogeneous_fraction": args.heterogeneous_fraction,
        },
    )
    print(f"wrote {len(specs)} sessions to {out}")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    in_dir = require_dir(args.in_dir, cfg)
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    rows = []
    for records, labels in _iter_sessions(in_dir):
        labels.validate()
        for rec in records:
            aligned = align_streams(rec)
            rows.append(
                [
                    rec.object_id,
                    rec.trial_index,
                    aligned.t_ms.size,
                    aligned.mic_t_ms.size,
                    format(aligned.gap_fraction.get("sensors", 0.0), ".9g"),
                    format(aligned.gap_fraction.get("mic", 0.0), ".9g"),
                ]
            )
    with open(out / "alignment.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["object_id", "trial", "samples", "mic_samples",
             "gap_sensors", "gap_mic"]
        )
        writer.writerows(rows)
    write_manifest(out, "ingest", cfg, {"trials": len(rows)})
    print(f"aligned {len(rows)} trials; report in {out / 'alignment.csv'}")
    return 0


def cmd_featurize(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    in_dir = require_dir(args.in_dir, cfg)
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    featurized, no_contact, n_sessions = _featurize_sessions(in_dir, cfg)
    retained, reports = filter_dataset(featurized)
    for trial in retained:
        save_tensor(
            out / f"{trial.object_id}_t{trial.trial_index:02d}.bin",
            trial.tensor,
        )
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["object_id", "trial", "material", "compliance", "embodiment",
             "valid_len", "tensor_file"]
        )
        for trial in retained:
            writer.writerow(
                [
                    trial.object_id,
                    trial.trial_index,
                    trial.labels.material,
                    trial.labels.compliance,
                    trial.tensor.embodiment,
                    trial.tensor.valid_len,
                    f"{trial.object_id}_t{trial.trial_index:02d}.bin",
                ]
            )
    _write_exclusions(out / "exclusions.csv", reports, no_contact)
    write_manifest(
        out, "featurize", cfg,
        {
            "sessions": n_sessions,
            "trials": len(featurized) + len(no_contact),
            "retained": len(retained),
            "no_contact": len(no_contact),
        },
    )
    print(
        f"featurized {len(featurized) + len(no_contact)} trials from "
        f"{n_sessions} sessions; retained {len(retained)}"
    )
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    in_dir = require_dir(args.in_dir, cfg)
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    featurized, no_contact, n_sessions = _featurize_sessions(in_dir, cfg)
    _, reports = filter_dataset(featurized)
    _write_exclusions(out / "exclusions.csv", reports, no_contact)
    counts: dict[str, int] = {}
    for report in reports:
        for rule in report.rules_fired:
            counts[rule] = counts.get(rule, 0) + 1
    if no_contact:
        counts["no_contact"] = len(no_contact)
    kept = sum(1 for r in reports if r.retained)
    write_manifest(
        out, "filter", cfg,
        {"sessions": n_sessions, "retained": kept, "rule_counts": counts},
    )
    print(f"retained {kept}/{len(reports) + len(no_contact)} trials")
    for rule in sorted(counts):
        print(f"  {rule}: {counts[rule]}")
    return 0


def cmd_train_haptic(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    store = load_featurized(require_dir(args.in_dir, cfg))
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    ds = store.dataset
    tr, va, _ = stratified_object_split(ds.object_ids, ds.y, seed=cfg.seed)
    enc_cfg = _encoder_config(cfg, args.epochs)
    result = train_encoder(ds.subset(tr), ds.subset(va), enc_cfg)
    digest = encoder_hash(result.model)
    save_checkpoint(
        out / "encoder.bin",
        result.model,
        extra={
            "classes": list(TRAIN_LABELS),
            "val_accuracy": result.val_accuracy,
            "val_nmcc": result.val_nmcc,
            "encoder_hash": digest,
        },
    )
    write_history_csv(out / "history.csv", result.history)
    write_manifest(
        out, "train-haptic", cfg,
        {
            "epochs": enc_cfg.epochs,
            "train_trials": int(tr.size),
            "val_trials": int(va.size),
            "encoder_hash": digest,
        },
    )
    print(f"val accuracy {result.val_accuracy:.3f}")
    print(f"val nmcc {result.val_nmcc:.3f}")
    return 0


def cmd_train_forest(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    store = load_featurized(require_dir(args.in_dir, cfg))
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    ds = store.dataset
    tr, va, _ = stratified_object_split(ds.object_ids, ds.y, seed=cfg.seed)
    overrides = dict(cfg.forest)
    overrides["seed"] = cfg.seed
    if args.trees is not None:
        overrides["n_trees"] = args.trees
    try:
        forest_cfg = ForestConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad forest config: {exc}") from exc
    x = summary_matrix(store.tensors)
    forest = RandomForest(forest_cfg).fit(x[tr], ds.y[tr])
    val_acc = 0.0
    if va.size:
        res = evaluate_predictions(
            ds.y[va], forest.predict(x[va]), len(TRAIN_LABELS)
        )
        val_acc = res.accuracy
    forest.save(out / "forest.json")
    write_manifest(
        out, "train-forest", cfg,
        {
            "n_trees": forest_cfg.n_trees,
            "train_trials": int(tr.size),
            "val_trials": int(va.size),
        },
    )
    print(f"val accuracy {val_acc:.3f}")
    return 0


def cmd_train_fusion(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    store = load_featurized(require_dir(args.in_dir, cfg))
    model, _ = _load_encoder(require_file(args.encoder, cfg))
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    provider = _provider_for(args.priors, store, cfg)
    priors = priors_for_objects(store.dataset.object_ids, provider)
    save_priors(out / "priors.json", priors)
    ds = store.dataset
    tr, va, _ = stratified_object_split(ds.object_ids, ds.y, seed=cfg.seed)
    fus_cfg = _fusion_config(cfg, args.epochs)
    before = encoder_hash(model)
    result = pretrain_fusion(
        ds.subset(tr), model, priors, fus_cfg, val_set=ds.subset(va)
    )
    after = encoder_hash(model)
    if after != before:
        raise RuntimeError("fusion pretraining must not alter the encoder")
    result.params.save(out / "fusion.json")
    write_history_csv(out / "history.csv", result.history)
    write_manifest(
        out, "train-fusion", cfg,
        {
            "epochs": fus_cfg.epochs,
            "priors": args.priors,
            "train_trials": int(tr.size),
            "val_trials": int(va.size),
            "encoder_hash": after,
        },
    )
    print(f"val accuracy {result.val_accuracy:.3f}")
    print(f"val nmcc {result.val_nmcc:.3f}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    store = load_featurized(require_dir(args.in_dir, cfg))
    model, extra = _load_encoder(require_file(args.encoder, cfg))
    fusion = FusionParams.load(require_file(args.fusion, cfg))
    priors = load_priors(require_file(args.priors, cfg))
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    fraction = args.fraction if args.fraction is not None else cfg.finetune_fraction
    if fraction not in FINETUNE_FRACTION_PRESETS:
        raise ValidationError(
            f"--fraction must be one of {FINETUNE_FRACTION_PRESETS}"
        )
    history, idx = finetune_fusion(
        store.dataset,
        model,
        fusion,
        priors,
        fraction,
        epochs=args.epochs,
        lr=args.lr,
        seed=cfg.seed,
    )
    save_checkpoint(
        out / "encoder.bin", model,
        extra={"classes": list(TRAIN_LABELS),
               "finetuned_from": extra.get("encoder_hash", ""),
               "encoder_hash": encoder_hash(model)},
    )
    fusion.save(out / "fusion.json")
    write_history_csv(out / "history.csv", history)
    write_manifest(
        out, "finetune", cfg,
        {
            "fraction": fraction,
            "epochs": args.epochs,
            "lr": args.lr,
            "subset_trials": int(idx.size),
        },
    )
    print(f"finetuned on {idx.size}/{store.dataset.n} trials "
          f"(fraction {fraction})")
    return 0


def _read_csv_values(path: Path, value_columns: Sequence[str]):
    """Returns ({key: value} or [values], keyed) for a prediction/label CSV.

    Keyed mode joins on (object_id, trial) when both columns exist;
    otherwise values pair up by row order. A header row is required.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path} is empty")
        column = next(
            (c for c in value_columns if c in reader.fieldnames), None
        )
        if column is None:
            raise ValidationError(
                f"{path} has none of the columns {list(value_columns)}"
            )
        keyed = "object_id" in reader.fieldnames and "trial" in reader.fieldnames
        if keyed:
            out: dict = {}
            for row in reader:
                key = (row["object_id"], row["trial"])
                if key in out:
                    raise ValidationError(f"{path}: duplicate row for {key}")
                out[key] = row[column]
            return out, True
        return [row[column] for row in reader], False


def _eval_from_files(preds_path: Path, labels_path: Path) -> None:
    preds, preds_keyed = _read_csv_values(
        preds_path, ("prediction", "pred", "label")
    )
    labels, labels_keyed = _read_csv_values(
        labels_path, ("material", "label", "truth")
    )
    if preds_keyed and labels_keyed:
        missing = set(labels) ^ set(preds)
        if missing:
            raise ValidationError(
                f"prediction and label rows disagree on {len(missing)} keys"
            )
        keys = sorted(labels)
        y_true = [labels[k] for k in keys]
        y_pred = [preds[k] for k in keys]
    else:
        if preds_keyed:
            preds = list(preds.values())
        if labels_keyed:
            labels = list(labels.values())
        if len(preds) != len(labels):
            raise ValidationError(
                f"{len(preds)} predictions vs {len(labels)} labels"
            )
        y_true, y_pred = list(labels), list(preds)
    if not y_true:
        raise ValidationError("no rows to score")
    classes = sorted(set(y_true) | set(y_pred))
    index = {name: i for i, name in enumerate(classes)}
    res = evaluate_predictions(
        np.array([index[v] for v in y_true]),
        np.array([index[v] for v in y_pred]),
        len(classes),
    )
    print(f"accuracy {res.accuracy:.3f}")
    print(f"nmcc {res.nmcc:.3f}")


def _fused_probs(
    model, fusion: FusionParams | None, priors: dict[str, VisionPrior] | None,
    ds: ArrayDataset,
) -> np.ndarray:
    logits = predict_logits(model, ds.x)
    if fusion is None:
        return softmax(logits.astype(np.float64))
    assert priors is not None
    std = np.empty((ds.n, fusion.config.n_classes))
    for i, oid in enumerate(ds.object_ids):
        if oid not in priors:
            raise ValidationError(f"no prior recorded for object {oid!r}")
        std[i] = priors[oid].std_logits
    fused = fusion.forward_logits(logits, std, train=False)
    return softmax(fused.astype(np.float64))


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    file_mode = bool(args.preds or args.labels)
    if file_mode:
        if not (args.preds and args.labels):
            raise ValidationError("--preds and --labels go together")
        if args.in_dir or args.checkpoint:
            raise ValidationError(
                "use either --preds/--labels or --in/--checkpoint, not both"
            )
        _eval_from_files(require_file(args.preds, cfg),
                         require_file(args.labels, cfg))
        return 0
    if not (args.in_dir and args.checkpoint):
        raise ValidationError(
            "eval needs --preds/--labels or --in/--checkpoint"
        )
    store = load_featurized(require_dir(args.in_dir, cfg))
    model, _ = _load_encoder(require_file(args.checkpoint, cfg))
    fusion = priors = None
    if args.fusion:
        fusion = FusionParams.load(require_file(args.fusion, cfg))
        if not args.priors:
            raise ValidationError("--fusion needs --priors")
        priors = load_priors(require_file(args.priors, cfg))
    probs = _fused_probs(model, fusion, priors, store.dataset)
    res = evaluate_predictions(
        store.dataset.y, probs.argmax(axis=1), len(TRAIN_LABELS)
    )
    print(f"accuracy {res.accuracy:.3f}")
    print(f"nmcc {res.nmcc:.3f}")
    if args.uncertainty:
        if args.uncertainty not in UNCERTAINTY_PRESETS:
            raise ValidationError(
                f"unknown uncertainty preset {args.uncertainty!r}"
            )
        thresholds = UNCERTAINTY_PRESETS[args.uncertainty]
        decisions = [uncertainty_filter(p, thresholds) for p in probs]
        kept = [i for i, d in enumerate(decisions) if d.accepted]
        retention = len(kept) / store.dataset.n
        print(f"retention {retention:.3f}")
        if kept:
            sub = evaluate_predictions(
                store.dataset.y[kept], probs[kept].argmax(axis=1),
                len(TRAIN_LABELS),
            )
            print(f"retained-accuracy {sub.accuracy:.3f}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    if bool(args.tensor) == bool(args.in_dir):
        raise ValidationError("pass exactly one of --tensor or --in")
    model, _ = _load_encoder(require_file(args.checkpoint, cfg))
    fusion = priors = None
    if args.fusion:
        fusion = FusionParams.load(require_file(args.fusion, cfg))
        if not args.priors:
            raise ValidationError("--fusion needs --priors")
        priors = load_priors(require_file(args.priors, cfg))
    preset = args.uncertainty or cfg.uncertainty
    if preset not in UNCERTAINTY_PRESETS:
        raise ValidationError(f"unknown uncertainty preset {preset!r}")
    thresholds = UNCERTAINTY_PRESETS[preset]

    if args.tensor:
        tensor = load_tensor(require_file(args.tensor, cfg))
        ds = ArrayDataset(
            tensor.channels[None], np.zeros(1, dtype=np.int64),
            (args.object_id,) if args.object_id else ("trial",),
        )
        if fusion is not None and not args.object_id:
            raise ValidationError("--fusion needs --object-id to find the prior")
        probs = _fused_probs(model, fusion, priors, ds)[0]
        decision = uncertainty_filter(probs, thresholds)
        print(TRAIN_LABELS[decision.label] if decision.accepted else "UNCERTAIN")
        return 0

    if not args.out:
        raise ValidationError("directory mode needs --out for the CSV")
    store = load_featurized(require_dir(args.in_dir, cfg))
    out = prepare_out_file(args.out, cfg, args.overwrite)
    probs = _fused_probs(model, fusion, priors, store.dataset)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["object_id", "trial", "prediction", "max_prob", "margin",
             "decision"]
        )
        for i in range(store.dataset.n):
            decision = uncertainty_filter(probs[i], thresholds)
            writer.writerow(
                [
                    store.dataset.object_ids[i],
                    store.trials[i],
                    TRAIN_LABELS[int(probs[i].argmax())],
                    format(decision.max_prob, ".9g"),
                    format(decision.margin, ".9g"),
                    "accept" if decision.accepted else "reject",
                ]
            )
    print(f"wrote {store.dataset.n} predictions to {out}")
    return 0


def cmd_compliance_head(args: argparse.Namespace) -> int:
    cfg = load_pipeline_config(args)
    store = load_featurized(require_dir(args.in_dir, cfg))
    model, _ = _load_encoder(require_file(args.checkpoint, cfg))
    out = prepare_out_dir(args.out, cfg, args.overwrite)
    ds = ArrayDataset(store.dataset.x, store.compliance,
                      store.dataset.object_ids)
    tr, va, _ = stratified_object_split(ds.object_ids, ds.y, seed=cfg.seed)
    before = encoder_hash(model)
    head, result = fit_compliance_head(
        model, ds.subset(tr), ds.subset(va), epochs=args.epochs, seed=cfg.seed
    )
    after = encoder_hash(model)
    if after != before:
        raise RuntimeError("compliance-head training must not alter the "
                           "encoder")
    save_dense_stack(out / "compliance_head.json", head)
    write_history_csv(out / "history.csv", result.history)
    write_manifest(
        out, "compliance-head", cfg,
        {
            "epochs": args.epochs,
            "train_trials": int(tr.size),
            "val_trials": int(va.size),
            "encoder_hash": after,
        },
    )
    print(f"val accuracy {result.val_accuracy:.3f}")
    print("encoder hash unchanged")
    return 0


# --------------------------------------------------------------------------
# Parser and dispatch


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML pipeline config")
    p.add_argument("--seed", type=int, help="run seed (mandatory here or in "
                   "the config)")
    p.add_argument("--profile", choices=PROFILES)
    p.add_argument("--embodiment", choices=EMBODIMENTS)
    p.add_argument("--overwrite", action="store_true",
                   help="replace existing output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clamp",
        description="Haptic perception pipeline: synthesize grasp sessions, "
        "featurize them, train classifiers, and evaluate predictions.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate synthetic grasp sessions")
    _add_common(p)
    p.add_argument("--objects", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--materials", help="comma-separated material names")
    p.add_argument("--heterogeneous-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="align raw sessions and report gaps")
    _add_common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser(
        "featurize", help="featurize sessions into filtered tensors"
    )
    _add_common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("filter", help="report exclusion rules per trial")
    _add_common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train-haptic", help="train the material encoder")
    _add_common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_haptic)

    p = sub.add_parser("train-forest", help="train the summary-stat forest")
    _add_common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trees", type=int)
    p.set_defaults(func=cmd_train_forest)

    p = sub.add_parser(
        "train-fusion", help="train the visual-prior fusion head"
    )
    _add_common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--encoder", required=True, help="encoder checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--priors", default="mock-informative",
        help="mock-informative | mock-uniform | recorded-responses JSON",
    )
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser(
        "finetune", help="jointly adapt encoder + fusion on a data fraction"
    )
    _add_common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--fusion", required=True)
    p.add_argument("--priors", required=True, help="priors JSON from "
                   "train-fusion")
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score predictions or a checkpoint")
    _add_common(p)
    p.add_argument("--preds", help="prediction CSV")
    p.add_argument("--labels", help="label CSV")
    p.add_argument("--in", dest="in_dir", help="featurized directory")
    p.add_argument("--checkpoint", help="encoder checkpoint")
    p.add_argument("--fusion")
    p.add_argument("--priors")
    p.add_argument("--uncertainty", help="also report filtered retention")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify tensors")
    _add_common(p)
    p.add_argument("--tensor", help="single feature-tensor file")
    p.add_argument("--in", dest="in_dir", help="featurized directory")
    p.add_argument("--out", help="prediction CSV (directory mode)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fusion")
    p.add_argument("--priors")
    p.add_argument("--object-id", help="prior lookup key for --tensor mode")
    p.add_argument("--uncertainty", help="acceptance preset")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser(
        "compliance-head", help="train a binary head on frozen embeddings"
    )
    _add_common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.set_defaults(func=cmd_compliance_head)

    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValidationError, SessionFormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
