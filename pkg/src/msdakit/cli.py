"""Command-line entry point.

Three commands driven by one declarative JSON config file:

  synth    write a synthetic multi-domain dataset (CSVs + manifest)
  run      execute a full protocol and write all metrics artifacts
  analyze  mutual-information topography + embedding export from a
           trained checkpoint

Unknown config keys are rejected so a typo cannot silently change a
hyperparameter. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric error, 5 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .data import (
    DomainDataset,
    SynthSpec,
    generate_synth,
    load_de_features,
    make_protocol,
    write_dataset_files,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DataFileError,
    MsdaError,
    NumericError,
)
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, MetricsReport, evaluate, export_embeddings, mi_topography, run_protocol

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

_SYNTH_KEYS = {
    "num_domains",
    "classes",
    "feature_dim",
    "class_separation",
    "domain_shift",
    "samples_per_class_per_domain",
    "noise_sigma",
    "seed",
}
_TRAIN_KEYS = set(TrainConfig().to_dict())
_TOP_KEYS = {
    "synth": {"synth", "output_dir"},
    "run": {"data", "protocol", "train", "output_dir", "audit", "save_checkpoints"},
    "analyze": {"checkpoint", "data", "target", "channels", "bands", "mi_bins", "output_dir"},
}


def _check_keys(mapping: dict, allowed: set, context: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}' in {context}")


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"missing required key '{key}' in {context}")
    return mapping[key]


def load_config(path: str, command: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cfg, _TOP_KEYS[command], "config root")
    return cfg


def _parse_synth_spec(mapping: dict) -> SynthSpec:
    if not isinstance(mapping, dict):
        raise ConfigError("'synth' must be an object")
    _check_keys(mapping, _SYNTH_KEYS, "'synth'")
    for key in _SYNTH_KEYS:
        _require(mapping, key, "'synth'")
    try:
        return SynthSpec(**mapping)
    except TypeError as e:
        raise ConfigError(f"bad synth spec: {e}") from e


def _parse_train(mapping: dict) -> TrainConfig:
    if not isinstance(mapping, dict):
        raise ConfigError("'train' must be an object")
    _check_keys(mapping, _TRAIN_KEYS, "'train'")
    try:
        return TrainConfig(**mapping)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from e


def _load_datasets(data_cfg: dict) -> tuple[list[DomainDataset], dict]:
    if not isinstance(data_cfg, dict):
        raise ConfigError("'data' must be an object")
    _check_keys(data_cfg, {"manifest", "synth"}, "'data'")
    if ("manifest" in data_cfg) == ("synth" in data_cfg):
        raise ConfigError("'data' needs exactly one of 'manifest' or 'synth'")
    if "manifest" in data_cfg:
        return load_de_features(data_cfg["manifest"]), {"manifest": str(data_cfg["manifest"])}
    spec = _parse_synth_spec(data_cfg["synth"])
    return generate_synth(spec), {"synth": spec.__dict__.copy()}


# -- commands -------------------------------------------------------------------


def cmd_synth(cfg: dict, out_override: str | None) -> int:
    spec = _parse_synth_spec(_require(cfg, "synth", "config root"))
    out_dir = Path(out_override or _require(cfg, "output_dir", "config root"))
    datasets = generate_synth(spec)
    manifest = write_dataset_files(datasets, out_dir)
    print(f"wrote {len(datasets)} domains to {out_dir}")
    for ds in datasets:
        print(
            f"  subject {ds.domain_key[0]} session {ds.domain_key[1]}: "
            f"N={ds.n} D={ds.feature_dim} C={ds.class_count}"
        )
    print(f"manifest: {manifest}")
    return EXIT_OK


def _write_weight_history(fold_report, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "branch_id", "raw_mmd", "normalized", "final"])
        for entry in fold_report.weight_history:
            for b, (raw, norm, fin) in enumerate(
                zip(entry["raw_mmd"], entry["normalized"], entry["final"])
            ):
                writer.writerow(
                    [entry["epoch"], b, format(raw, ".17g"), format(norm, ".17g"), format(fin, ".17g")]
                )


def _write_confusion(report: MetricsReport, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold_index", "true_class", "pred_class", "count", "normalized"])
        for fold in report.folds:
            if fold.confusion_raw is None:
                continue
            for i, row in enumerate(fold.confusion_raw):
                for j, count in enumerate(row):
                    writer.writerow(
                        [
                            fold.fold_index,
                            i,
                            j,
                            count,
                            format(fold.confusion_normalized[i][j], ".17g"),
                        ]
                    )


class _AuditWriter:
    """Streams per-epoch pseudo-label records of one fold into a CSV."""

    def __init__(self, path: Path, labels):
        self._fh = path.open("w", newline="")
        self._writer = csv.writer(self._fh)
        self._labels = labels
        self._writer.writerow(
            [
                "epoch",
                "sample_id",
                "y_disc",
                "y_struct",
                "consistent",
                "confidence",
                "selected",
                "fused_y",
                "true_label",
            ]
        )

    def __call__(self, epoch: int, info: dict) -> None:
        records = info.get("records")
        if not records:
            return
        for r in records:
            true = int(self._labels[r.sample_id]) if self._labels is not None else ""
            self._writer.writerow(
                [
                    epoch,
                    r.sample_id,
                    r.y_disc,
                    r.y_struct,
                    int(r.consistent),
                    format(r.confidence, ".17g"),
                    int(r.selected),
                    r.fused_y,
                    true,
                ]
            )

    def close(self) -> None:
        self._fh.close()


def cmd_run(cfg: dict, out_override: str | None, seed_override: int | None, ablate: list[str]) -> int:
    datasets, data_echo = _load_datasets(_require(cfg, "data", "config root"))
    protocol_kind = _require(cfg, "protocol", "config root")
    train_cfg = _parse_train(cfg.get("train", {}))
    if seed_override is not None:
        train_cfg.seed = seed_override
    for name in ablate:
        if name == "dplc_single":
            train_cfg.dplc_single = True
        elif name in ("ada", "pcc", "dasw", "cda"):
            setattr(train_cfg, name, False)
        else:
            raise ConfigError(f"unknown ablation '{name}' (use ada, pcc, dasw, cda, dplc_single)")
    out_dir = Path(out_override or _require(cfg, "output_dir", "config root"))
    out_dir.mkdir(parents=True, exist_ok=True)
    audit = bool(cfg.get("audit", False))
    save_checkpoints = bool(cfg.get("save_checkpoints", True))

    plan = make_protocol(datasets, protocol_kind)
    auditors: dict[int, _AuditWriter] = {}
    by_key = {ds.domain_key: ds for ds in datasets}

    def epoch_callback_factory(fold_index: int):
        if not audit:
            return None
        target = by_key[plan.folds[fold_index][1]]
        writer = _AuditWriter(out_dir / f"audit_fold{fold_index:03d}.csv", target.labels)
        auditors[fold_index] = writer
        return writer

    def fold_callback(fold_index: int, model, fold_report) -> None:
        if save_checkpoints:
            save_checkpoint(model, out_dir / f"model_fold{fold_index:03d}.npz")
        _write_weight_history(fold_report, out_dir / f"weights_fold{fold_index:03d}.csv")
        if fold_index in auditors:
            auditors[fold_index].close()

    try:
        report = run_protocol(
            plan,
            datasets,
            train_cfg,
            fold_callback=fold_callback,
            epoch_callback_factory=epoch_callback_factory,
        )
    finally:
        for writer in auditors.values():
            writer.close()
    report.config = {
        "version": __version__,
        "data": data_echo,
        "protocol": protocol_kind,
        "train": train_cfg.to_dict(),
    }
    (out_dir / "metrics.json").write_text(report.to_json() + "\n")
    _write_confusion(report, out_dir / "confusion.csv")
    if report.mean_accuracy is not None:
        print(
            f"{len(report.folds)} folds: mean accuracy "
            f"{report.mean_accuracy:.4f} +/- {report.std_accuracy:.4f}"
        )
    else:
        print(f"{len(report.folds)} folds: unlabeled target, predictions only")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_analyze(cfg: dict, out_override: str | None) -> int:
    checkpoint_path = Path(_require(cfg, "checkpoint", "config root"))
    if not checkpoint_path.is_file():
        raise DataFileError(f"checkpoint not found: {checkpoint_path}")
    model = load_checkpoint(checkpoint_path)
    datasets, _ = _load_datasets(_require(cfg, "data", "config root"))
    channels = int(_require(cfg, "channels", "config root"))
    bands = int(_require(cfg, "bands", "config root"))
    target_key = cfg.get("target")
    if target_key is not None:
        target_key = (int(target_key[0]), int(target_key[1]))
        matches = [ds for ds in datasets if ds.domain_key == target_key]
        if not matches:
            raise DataError(f"target domain {target_key} not in manifest")
        target = matches[0]
    else:
        target = datasets[-1]
    if target.feature_dim != model.config.input_dim:
        raise CheckpointError(
            f"checkpoint expects {model.config.input_dim} features, data has {target.feature_dim}"
        )
    out_dir = Path(out_override or _require(cfg, "output_dir", "config root"))
    out_dir.mkdir(parents=True, exist_ok=True)

    result = evaluate(model, target)
    matrix = mi_topography(
        target.features, result.probabilities, channels, bands, bins=int(cfg.get("mi_bins", 16))
    )
    with (out_dir / "mi_topography.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "channel", "band", "mi"])
        for cls in range(matrix.shape[0]):
            grid = matrix[cls].reshape(channels, bands)
            for ch in range(channels):
                for b in range(bands):
                    writer.writerow([cls, ch, b, format(grid[ch, b], ".17g")])
    export_embeddings(model, datasets, out_dir / "embeddings.csv")
    print(f"MI topography ({matrix.shape[0]} classes x {channels}x{bands}) and embeddings in {out_dir}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msdakit", description="Multi-source domain adaptation toolkit"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("synth", "generate a synthetic multi-domain dataset"),
        ("run", "train and evaluate a full protocol"),
        ("analyze", "MI topography and embedding export from a checkpoint"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="path to the JSON config file")
        p.add_argument("--out", help="override the config's output_dir")
        if name == "run":
            p.add_argument("--seed", type=int, help="override the training seed")
            p.add_argument(
                "--ablate",
                default="",
                help="comma-separated mechanisms to disable (ada,pcc,dasw,cda,dplc_single)",
            )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "run":
            ablate = [s.strip() for s in args.ablate.split(",") if s.strip()]
            return cmd_run(cfg, args.out, args.seed, ablate)
        return cmd_analyze(cfg, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFileError,) as e:
        print(f"file error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, MsdaError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
