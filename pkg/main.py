import os
import sys
import json
import time
import logging
import argparse
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)
logger = logging.getLogger(__name__)

# Enable debug logging if requested
if os.environ.get('DEBUG', '0') == '1':
    logging.getLogger().setLevel(logging.DEBUG)
    logger.debug("Debug logging enabled")

import numpy as np
import pandas as pd
from omegaconf import OmegaConf

from config import ConfigValidationError, RunConfig, default_run_config, get_config, load_run_config
from encoder.checkpoint import CheckpointError, checkpoint_paths
from encoder.model import PhenoEncoder, build_encoder, embed_dataset, load_encoder, save_encoder
from encoder.normalization import NormalizationSpec
from encoder.pretrain import PretrainConfig, mae_pretrain, write_loss_trace
from encoder.tokens import TokenizationError
from evaluation import (
    EvaluationError, MultiSeedReport, SeedResult, confusion, metrics, stratified_indices,
)
from experiment import (
    PIPELINES, ablation_grid, ablation_table, corpus_pretraining, guard_pretraining_leak, run_experiment,
)
from features import (
    FEATURE_SETS, FeatureImputer, HarmonicFitError, feature_matrix, read_feature_matrix,
    write_feature_matrix,
)
from forest import ForestConfig, ForestError, rf_fit, rf_predict, save_forest
from head import TrainConfig, TrainingError, finetune, mlp_predict, save_head, train_mlp, write_trace
from ingest import (
    AssemblyError, IngestError, ingest_csv, load_dataset, read_labels, read_static, write_labels,
    write_observations, write_static,
)
from models import Dataset, class_index
from preprocess import IndexCoefficients, cloud_filter, monthly_median_frame, read_composites, write_composites
from report import load_reports, write_reports
from synthetic import SynthConfigError, dataset_labels, dataset_statics, dataset_to_observations, preset, synth_generate

# Get the configuration
config = get_config()

OBSERVATIONS_FILE = "observations.csv"
STATIC_FILE = "static.csv"
LABELS_FILE = "labels.csv"
COMPOSITES_FILE = "composites.csv"

# Runtime failures reported with exit status 1
DOMAIN_ERRORS = {
    IngestError: "ingest_error",
    AssemblyError: "assembly_error",
    SynthConfigError: "synth_config_error",
    HarmonicFitError: "harmonic_fit_error",
    TokenizationError: "tokenization_error",
    CheckpointError: "checkpoint_error",
    TrainingError: "training_error",
    ForestError: "forest_error",
    EvaluationError: "evaluation_error",
}


class CliError(Exception):
    def __init__(self, code: str, message: str, details: Optional[List] = None, status: int = 1):
        super().__init__(message)
        self.code = code
        self.details = details or []
        self.status = status


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors come out as one JSON line"""

    def error(self, message):
        raise CliError("usage_error", message, status=2)


def emit_error(error: CliError):
    payload = {"error": error.code, "message": str(error), "details": error.details}
    sys.stderr.write(json.dumps(payload, default=str) + "\n")


# ---------------------------------------------------------------------------
# Run context and manifests
# ---------------------------------------------------------------------------

class RunContext:
    """Resolved config, output directory and the file ledger of one command"""

    def __init__(self, command: str, run_config: RunConfig, out_dir: Path):
        self.command = command
        self.run_config = run_config
        self.out_dir = out_dir
        self.inputs: List[str] = []
        self.outputs: List[str] = []
        self.started = time.perf_counter()

    @property
    def seed(self) -> int:
        return self.run_config.seed

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise CliError("missing_input", f"input not found: {path}")
        self.inputs.append(str(path))
        return path

    def wrote(self, *paths):
        self.outputs.extend(str(p) for p in paths)

    def write_manifest(self) -> Path:
        config_path = self.out_dir / "config.yaml"
        OmegaConf.save(OmegaConf.create(self.run_config.model_dump(mode="json")), config_path)
        manifest = {
            "command": self.command,
            "inputs": self.inputs,
            "config": str(config_path),
            "config_hash": self.run_config.config_hash(),
            "seed": self.seed,
            "outputs": self.outputs + [str(config_path)],
            "wall_time_s": round(time.perf_counter() - self.started, 3),
            "environment": config.as_dict(),
        }
        path = self.out_dir / f"manifest_{self.command}.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        logger.info(f"Wrote run manifest {path}")
        return path


def load_dataset_dir(ctx: RunContext, data_dir) -> Dataset:
    """
    Dataset from a directory holding static.csv, labels.csv and either
    composites.csv or raw observations.csv
    """
    data_dir = Path(data_dir)
    run_config = ctx.run_config
    composites_path = data_dir / COMPOSITES_FILE
    if composites_path.exists():
        composite = read_composites(ctx.read(composites_path))
    else:
        result = ingest_csv(ctx.read(data_dir / OBSERVATIONS_FILE))
        filtered = cloud_filter(result.frame, run_config.preprocess.cloud_threshold)
        composite = monthly_median_frame(filtered)
    statics = read_static(ctx.read(data_dir / STATIC_FILE))
    labels = read_labels(ctx.read(data_dir / LABELS_FILE))
    return load_dataset(composite, statics, labels, schema_tag=run_config.dataset.tag,
                        coefficients=IndexCoefficients.from_config(run_config))


def _aligned_labels(ctx: RunContext, data_dir, plot_ids: List[str]) -> Tuple[np.ndarray, List[str]]:
    labels = read_labels(ctx.read(Path(data_dir) / LABELS_FILE))
    missing = [p for p in plot_ids if p not in labels]
    if missing:
        raise CliError("missing_labels", f"{len(missing)} feature rows have no label", details=missing[:20])
    names = [labels[p] for p in plot_ids]
    ids = class_index(names)
    return np.array([ids[n] for n in names], dtype=np.int64), sorted(ids)


def _single_seed_report(pipeline: str, seed: int, y_true, y_pred, class_names: List[str]) -> Dict[str, MultiSeedReport]:
    conf = confusion(y_true, y_pred, len(class_names), class_names)
    report = MultiSeedReport(pipeline=pipeline, seeds=[seed])
    report.results[seed] = SeedResult(seed=seed, confusion=conf, report=metrics(conf))
    logger.info(f"{pipeline} seed {seed}: OA {report.results[seed].report.overall_accuracy:.4f}, "
                f"macro-F1 {report.results[seed].report.macro_f1:.4f}")
    return {pipeline: report}


def _checkpoint_files(path) -> List[Path]:
    return list(checkpoint_paths(path))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(ctx: RunContext, args):
    result = ingest_csv(ctx.read(args.input))
    observations = write_observations(result.frame, ctx.out_dir / OBSERVATIONS_FILE)
    rejections = ctx.out_dir / "rejections.csv"
    pd.DataFrame(
        [(r.row, r.plot_id, "; ".join(r.reasons)) for r in result.rejections],
        columns=["row", "plot_id", "reasons"],
    ).to_csv(rejections, index=False)
    logger.info(f"Kept {len(result)} rows, rejected {len(result.rejections)}")
    ctx.wrote(observations, rejections)


def cmd_composite(ctx: RunContext, args):
    result = ingest_csv(ctx.read(Path(args.data) / OBSERVATIONS_FILE))
    if result.rejections:
        raise CliError("invalid_observations", f"{len(result.rejections)} invalid observation rows; run ingest first",
                       details=[r.model_dump() for r in result.rejections[:20]])
    filtered = cloud_filter(result.frame, ctx.run_config.preprocess.cloud_threshold)
    ctx.wrote(write_composites(monthly_median_frame(filtered), ctx.out_dir / COMPOSITES_FILE))


def cmd_synth(ctx: RunContext, args):
    run_config = ctx.run_config
    dataset = synth_generate(preset(run_config.dataset.preset), ctx.seed)
    observations = dataset_to_observations(dataset, ctx.seed, run_config.preprocess.cloud_threshold)
    ctx.wrote(
        write_observations(observations, ctx.out_dir / OBSERVATIONS_FILE),
        write_static(dataset_statics(dataset), ctx.out_dir / STATIC_FILE),
        write_labels(dataset_labels(dataset), ctx.out_dir / LABELS_FILE),
    )
    logger.info(f"Synthetic '{run_config.dataset.preset}' dataset: {len(dataset)} samples, "
                f"{dataset.class_count} classes")


def cmd_features(ctx: RunContext, args):
    section = ctx.run_config.features
    dataset = load_dataset_dir(ctx, args.data)
    matrix, names = feature_matrix(dataset.series, section.subset, section.feature_set,
                                   iterative=section.iterative_fit)
    path = ctx.out_dir / f"features_{section.subset}_{section.feature_set}.csv"
    ctx.wrote(write_feature_matrix(dataset.plot_ids, matrix, names, path))
    logger.info(f"Feature vectors of width {len(names)} ({section.subset}, {section.feature_set})")


def _train_split(ctx: RunContext, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return stratified_indices(labels, ctx.run_config.split.train_fraction, ctx.seed)


def cmd_pretrain(ctx: RunContext, args):
    run_config = ctx.run_config
    spec = NormalizationSpec.from_config(run_config)
    if run_config.pretrain.corpus == "synthetic":
        result, seen = corpus_pretraining(run_config)
        seed = run_config.pretrain.corpus_seed
    else:
        dataset = load_dataset_dir(ctx, args.data)
        train, _ = _train_split(ctx, dataset.labels)
        encoder = build_encoder(run_config, ctx.seed)
        result = mae_pretrain([dataset.series[i] for i in train], encoder,
                              PretrainConfig.from_config(run_config, ctx.seed), spec)
        seen = [dataset.plot_ids[i] for i in train]
        seed = ctx.seed
    base = save_encoder(result.encoder, ctx.out_dir / "encoder", seed, spec.version,
                        run_config.encoder.deep_inputs, seen_plots=seen)
    ctx.wrote(*_checkpoint_files(base), write_loss_trace(result.losses, ctx.out_dir / "mae_trace.csv"))


def _encoder_for(ctx: RunContext, checkpoint: Optional[str]) -> Tuple[PhenoEncoder, Dict]:
    if checkpoint:
        ctx.read(checkpoint_paths(checkpoint)[1])
        encoder, meta = load_encoder(checkpoint)
        if int(meta.get("normalization_version", 1)) != ctx.run_config.normalization.version:
            raise CheckpointError(f"{checkpoint} was trained with normalization version "
                                  f"{meta.get('normalization_version')}, config has "
                                  f"{ctx.run_config.normalization.version}")
        return encoder, meta
    logger.info("No encoder checkpoint given; starting from a freshly initialized encoder")
    return build_encoder(ctx.run_config, ctx.seed), {"seen_plots": []}


def cmd_finetune(ctx: RunContext, args):
    run_config = ctx.run_config
    dataset = load_dataset_dir(ctx, args.data)
    train, test = _train_split(ctx, dataset.labels)
    spec = NormalizationSpec.from_config(run_config)
    deep_inputs = run_config.encoder.deep_inputs
    encoder, meta = _encoder_for(ctx, args.checkpoint or run_config.pretrain.checkpoint)
    plot_ids = dataset.plot_ids
    guard_pretraining_leak(meta, [plot_ids[i] for i in test])

    series = dataset.series
    tuned = finetune(encoder, None, [series[i] for i in train], dataset.labels[train],
                     TrainConfig.from_config(run_config, ctx.seed), n_classes=dataset.class_count,
                     freeze_encoder=args.freeze_encoder, spec=spec, deep_inputs=deep_inputs)
    seen = list(meta["seen_plots"]) + [plot_ids[i] for i in train]
    encoder_base = save_encoder(tuned.encoder, ctx.out_dir / "encoder_finetuned", ctx.seed, spec.version, deep_inputs,
                                seen_plots=seen)
    head_base = save_head(tuned.head, ctx.out_dir / "head", dataset.class_names, provenance="finetune")
    ctx.wrote(*_checkpoint_files(encoder_base), *_checkpoint_files(head_base),
              write_trace(tuned.trace, ctx.out_dir / "trace.csv"))

    predicted, _ = mlp_predict(embed_dataset([series[i] for i in test], tuned.encoder, spec, deep_inputs), tuned.head)
    reports = _single_seed_report("mlp-deep", ctx.seed, dataset.labels[test], predicted, dataset.class_names)
    ctx.wrote(*write_reports(reports, ctx.out_dir, heatmaps=not args.no_heatmaps))


def cmd_embed(ctx: RunContext, args):
    run_config = ctx.run_config
    dataset = load_dataset_dir(ctx, args.data)
    checkpoint = args.checkpoint or run_config.pretrain.checkpoint
    if not checkpoint:
        raise CliError("missing_input", "embed needs --checkpoint (or pretrain.checkpoint in the config)", status=2)
    encoder, _ = _encoder_for(ctx, checkpoint)
    features = embed_dataset(dataset.series, encoder, NormalizationSpec.from_config(run_config),
                             run_config.encoder.deep_inputs)
    names = [f"deep_{i:03d}" for i in range(features.shape[1])]
    ctx.wrote(write_feature_matrix(dataset.plot_ids, features, names, ctx.out_dir / "deep_features.csv"))


def _feature_inputs(ctx: RunContext, args):
    plot_ids, matrix, names = read_feature_matrix(ctx.read(args.features))
    labels, class_names = _aligned_labels(ctx, args.data, plot_ids)
    kind = "deep" if names and all(n.startswith("deep_") for n in names) else "hand"
    train, test = _train_split(ctx, labels)
    imputer = FeatureImputer().fit(matrix[train])
    return imputer.transform(matrix[train]), imputer.transform(matrix[test]), labels, train, test, class_names, kind


def cmd_train_rf(ctx: RunContext, args):
    x_train, x_test, labels, train, test, class_names, kind = _feature_inputs(ctx, args)
    model = rf_fit(x_train, labels[train], ForestConfig.from_config(ctx.run_config, ctx.seed),
                   n_classes=len(class_names))
    ctx.wrote(save_forest(model, ctx.out_dir / "forest.txt"))
    predicted, _ = rf_predict(model, x_test)
    reports = _single_seed_report(f"rf-{kind}", ctx.seed, labels[test], predicted, class_names)
    ctx.wrote(*write_reports(reports, ctx.out_dir, heatmaps=not args.no_heatmaps))


def cmd_train_mlp(ctx: RunContext, args):
    x_train, x_test, labels, train, test, class_names, kind = _feature_inputs(ctx, args)
    result = train_mlp(x_train, labels[train], TrainConfig.from_config(ctx.run_config, ctx.seed),
                       n_classes=len(class_names))
    base = save_head(result.head, ctx.out_dir / "head", class_names, provenance=f"train-mlp:{kind}")
    ctx.wrote(*_checkpoint_files(base), write_trace(result.trace, ctx.out_dir / "trace.csv"))
    predicted, _ = mlp_predict(x_test, result.head)
    reports = _single_seed_report(f"mlp-{kind}", ctx.seed, labels[test], predicted, class_names)
    ctx.wrote(*write_reports(reports, ctx.out_dir, heatmaps=not args.no_heatmaps))


def cmd_evaluate(ctx: RunContext, args):
    run_config = ctx.run_config
    dataset = load_dataset_dir(ctx, args.data)
    checkpoint = args.checkpoint or run_config.pretrain.checkpoint
    if checkpoint:
        ctx.read(checkpoint_paths(checkpoint)[1])
    reports = run_experiment(dataset, run_config.experiment.pipelines, run_config.experiment.seeds,
                             run_config, checkpoint=checkpoint)
    ctx.wrote(*write_reports(reports, ctx.out_dir, heatmaps=not args.no_heatmaps))
    incomplete = [name for name, report in reports.items() if not report.complete]
    if incomplete:
        logger.warning(f"Incomplete pipelines (failed seeds are listed in the log): {incomplete}")


def cmd_ablation(ctx: RunContext, args):
    dataset = load_dataset_dir(ctx, args.data)
    table = ablation_table(dataset, ctx.run_config.experiment.seeds, ctx.run_config)
    table_path = ctx.out_dir / "ablation.csv"
    table.to_csv(table_path, index=False)
    grid_path = ctx.out_dir / "ablation_grid.csv"
    ablation_grid(table, args.metric).to_csv(grid_path)
    ctx.wrote(table_path, grid_path)


def cmd_report(ctx: RunContext, args):
    source = Path(args.runs) if args.runs else ctx.out_dir
    reports = load_reports(source)
    ctx.inputs.extend(str(p) for p in sorted(source.glob("confusion_*.csv")))
    ctx.wrote(*write_reports(reports, ctx.out_dir, heatmaps=not args.no_heatmaps))


COMMANDS: Dict[str, Tuple[Callable, str]] = {
    "ingest": (cmd_ingest, "Validate a raw observation CSV"),
    "composite": (cmd_composite, "Cloud-filter observations and build monthly median composites"),
    "features": (cmd_features, "Extract hand-crafted seasonal/harmonic feature vectors"),
    "synth": (cmd_synth, "Generate a synthetic labelled dataset"),
    "pretrain": (cmd_pretrain, "Masked-autoencoder pre-training of the encoder"),
    "finetune": (cmd_finetune, "Fine-tune encoder and MLP head on labelled pixels"),
    "embed": (cmd_embed, "Export deep features from an encoder checkpoint"),
    "train-rf": (cmd_train_rf, "Train and score a random forest on a feature CSV"),
    "train-mlp": (cmd_train_mlp, "Train and score an MLP head on a feature CSV"),
    "evaluate": (cmd_evaluate, "Multi-seed evaluation of the classification pipelines"),
    "ablation": (cmd_ablation, "Feature-set x sensor-subset ablation of the hand-crafted RF"),
    "report": (cmd_report, "Rebuild report tables and heatmaps from confusion CSVs"),
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, defaults: RunConfig):
    parser.add_argument("--config", default=None,
                        help=f"YAML run config merged over {config.config_path} (default: %(default)s)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Dotted config override, repeatable, e.g. train.epochs=10 (default: %(default)s)")
    parser.add_argument("--seed", type=int, help=f"Run seed (default: {defaults.seed})")
    parser.add_argument("--out", help=f"Output directory (default: {defaults.paths.out_dir})")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")


def _add_data(parser: argparse.ArgumentParser, defaults: RunConfig):
    parser.add_argument("--data", default=defaults.paths.data_dir,
                        help=f"Dataset directory with {STATIC_FILE}, {LABELS_FILE} and "
                             f"{COMPOSITES_FILE} or {OBSERVATIONS_FILE} (default: {defaults.paths.data_dir})")


def _add_heatmaps(parser: argparse.ArgumentParser):
    parser.add_argument("--no-heatmaps", action="store_true", help="Skip the SVG confusion heatmaps")


def build_parser(defaults: Optional[RunConfig] = None) -> CliParser:
    """CLI parser; flag defaults shown in --help come from the default config"""
    defaults = defaults or default_run_config()
    parser = CliParser(prog="phenoclass", description="Phenology-based tree species classification")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CliParser)
    subparsers.required = True
    sub = {}
    for name, (_, help_text) in COMMANDS.items():
        sub[name] = subparsers.add_parser(name, help=help_text, description=help_text)
        _add_common(sub[name], defaults)

    sub["ingest"].add_argument("--input", required=True, help="Observation CSV (plot_id,date,band,value,cloud_prob)")
    sub["synth"].add_argument("--preset", choices=["comb", "simb", "siba"],
                              help=f"Class preset (default: {defaults.dataset.preset})")
    for name in ("composite", "features", "pretrain", "finetune", "embed", "evaluate", "ablation"):
        _add_data(sub[name], defaults)
    for name in ("train-rf", "train-mlp"):
        _add_data(sub[name], defaults)
        sub[name].add_argument("--features", required=True, help="Feature CSV written by features or embed")
    sub["features"].add_argument("--subset", choices=["s1", "s2", "s1s2"],
                                 help=f"Sensor subset (default: {defaults.features.subset})")
    sub["features"].add_argument("--feature-set", choices=list(FEATURE_SETS),
                                 help=f"Feature set (default: {defaults.features.feature_set})")
    for name in ("finetune", "embed", "evaluate"):
        sub[name].add_argument("--checkpoint", help=f"Encoder checkpoint base path "
                                                    f"(default: {defaults.pretrain.checkpoint})")
    sub["finetune"].add_argument("--freeze-encoder", action="store_true", help="Train the head only")
    sub["evaluate"].add_argument("--pipeline", action="append", choices=list(PIPELINES),
                                 help=f"Pipeline, repeatable (default: {','.join(defaults.experiment.pipelines)})")
    for name in ("evaluate", "ablation"):
        sub[name].add_argument("--seeds", help=f"Comma-separated seeds "
                                               f"(default: {','.join(str(s) for s in defaults.experiment.seeds)})")
    sub["ablation"].add_argument("--metric", default="overall_accuracy",
                                 choices=["overall_accuracy", "macro_f1", "weighted_f1"],
                                 help="Metric shown in ablation_grid.csv (default: overall_accuracy)")
    sub["report"].add_argument("--runs", help="Directory holding confusion_<pipeline>_<seed>.csv (default: --out)")
    for name in ("finetune", "train-rf", "train-mlp", "evaluate", "report"):
        _add_heatmaps(sub[name])
    return parser


def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliError("usage_error", f"--seeds expects comma-separated integers, got '{text}'", status=2)


def config_overrides(args) -> List[str]:
    """Dotted overrides from explicit flags; flags win over --set and the config file"""
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "preset", None):
        overrides.append(f"dataset.preset={args.preset}")
    if getattr(args, "subset", None):
        overrides.append(f"features.subset={args.subset}")
    if getattr(args, "feature_set", None):
        overrides.append(f"features.feature_set={args.feature_set}")
    if getattr(args, "seeds", None):
        overrides.append(f"experiment.seeds=[{','.join(str(s) for s in _parse_seeds(args.seeds))}]")
    if getattr(args, "pipeline", None):
        overrides.append(f"experiment.pipelines=[{','.join(args.pipeline)}]")
    if args.out:
        overrides.append(f"paths.out_dir={args.out}")
    return overrides


def run(argv: Optional[List[str]] = None) -> int:
    """Parse, configure and dispatch one subcommand; returns the exit status"""
    try:
        try:
            parser = build_parser()
        except FileNotFoundError as e:
            raise CliError("config_missing", str(e), status=2)
        args = parser.parse_args(argv)
        if args.debug:
            logging.getLogger().setLevel(logging.DEBUG)
        try:
            run_config = load_run_config(args.config, config_overrides(args))
        except ConfigValidationError as e:
            raise CliError("config_invalid", "run configuration failed validation", details=e.errors, status=2)
        except FileNotFoundError as e:
            raise CliError("config_missing", str(e), status=2)

        out_dir = Path(args.out or run_config.paths.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ctx = RunContext(args.command, run_config, out_dir)
        handler, _ = COMMANDS[args.command]
        logger.info(f"Running {args.command} (seed {run_config.seed}, config {run_config.config_hash()[:12]})")
        handler(ctx, args)
        ctx.write_manifest()
        return 0
    except CliError as e:
        emit_error(e)
        return e.status
    except tuple(DOMAIN_ERRORS) as e:
        code = next(c for cls, c in DOMAIN_ERRORS.items() if isinstance(e, cls))
        emit_error(CliError(code, str(e)))
        return 1
    except (FileNotFoundError, ValueError) as e:
        emit_error(CliError("runtime_error", f"{type(e).__name__}: {e}"))
        return 1


if __name__ == "__main__":
    sys.exit(run())
