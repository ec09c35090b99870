# Multi-seed experiment runner and the hand-crafted feature ablation
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from config import RunConfig, get_config
from encoder.checkpoint import CheckpointError, load_checkpoint
from encoder.model import build_encoder, embed_dataset, encoder_from_state, encoder_meta
from encoder.normalization import NormalizationSpec
from encoder.pretrain import PretrainConfig, PretrainResult, mae_pretrain
from evaluation import (
    EvaluationError, MultiSeedReport, SeedResult, SplitSpec, confusion, metrics, stratified_split,
)
from features import FeatureImputer, feature_matrix
from forest import ForestConfig, ForestModel, rf_fit, rf_predict
from head import TrainConfig, TrainResult, finetune, mlp_predict
from models import Dataset
from synthetic import unlabeled_corpus

logger = logging.getLogger(__name__)

PIPELINES = ("mlp-deep", "rf-deep", "rf-hand")
DEEP_PIPELINES = ("mlp-deep", "rf-deep")
ABLATION_FEATURE_SETS = ("seasonal", "harmonic", "all")
ABLATION_SUBSETS = ("s1", "s2", "s1s2")

# (checkpoint meta, state dict) of the encoder every seed starts from
PretrainedState = Tuple[Dict, Dict[str, torch.Tensor]]


def _seed_result(seed: int, y_true, y_pred, dataset: Dataset) -> SeedResult:
    conf = confusion(y_true, y_pred, dataset.class_count, dataset.class_names)
    return SeedResult(seed=seed, confusion=conf, report=metrics(conf))


def corpus_pretraining(run_config: RunConfig) -> Tuple[PretrainResult, List[str]]:
    """
    MAE pre-training on the unlabelled synthetic corpus

    Returns:
        (pre-training result, plot ids of the corpus)
    """
    section = run_config.pretrain
    corpus = unlabeled_corpus(run_config.dataset.preset, section.corpus_size, section.corpus_seed,
                              section.corpus_prefix)
    encoder = build_encoder(run_config, section.corpus_seed)
    result = mae_pretrain(corpus, encoder, PretrainConfig.from_config(run_config, section.corpus_seed),
                          NormalizationSpec.from_config(run_config))
    return result, [s.plot_id for s in corpus]


def shared_pretraining(pipelines: Sequence[str], run_config: RunConfig,
                       checkpoint: Optional[str] = None) -> Optional[PretrainedState]:
    """
    Encoder state shared by all seeds: the checkpoint, or one pre-training
    run on the synthetic corpus. None means each seed starts fresh (and
    pre-trains on its own train split when pretrain.corpus is "train").
    """
    if not any(p in DEEP_PIPELINES for p in pipelines):
        return None
    if checkpoint:
        return load_checkpoint(checkpoint)
    if run_config.pretrain.epochs == 0 or run_config.pretrain.corpus != "synthetic":
        return None
    result, seen = corpus_pretraining(run_config)
    meta = encoder_meta(result.encoder, run_config.pretrain.corpus_seed, run_config.normalization.version,
                        run_config.encoder.deep_inputs, seen)
    return meta, {name: tensor.detach().clone() for name, tensor in result.encoder.state_dict().items()}


def guard_pretraining_leak(meta: Dict, test_plots: Sequence[str]):
    """
    Raise when an encoder has seen any test plot

    Raises:
        CheckpointError: The meta does not record the plots the encoder was trained on
        EvaluationError: The recorded plots overlap the test rows
    """
    seen = meta.get("seen_plots")
    if seen is None:
        raise CheckpointError("encoder checkpoint does not record the plots it was trained on (seen_plots)")
    overlap = sorted(set(seen).intersection(test_plots))
    if overlap:
        raise EvaluationError(f"encoder was trained on {len(overlap)} plots of this test split, "
                              f"e.g. {overlap[:5]}")


def fit_handcrafted(dataset: Dataset, train: np.ndarray, subset: str, feature_set: str, forest: ForestConfig,
                    iterative: bool = False, n_jobs: int = 1) -> Tuple[FeatureImputer, ForestModel]:
    """Imputer and RF fitted on hand-crafted features of the train rows only"""
    matrix, _ = feature_matrix([dataset.series[i] for i in train], subset, feature_set, iterative=iterative)
    imputer = FeatureImputer().fit(matrix)
    model = rf_fit(imputer.transform(matrix), dataset.labels[train], forest,
                   n_classes=dataset.class_count, n_jobs=n_jobs)
    return imputer, model


def handcrafted_predictions(dataset: Dataset, train: np.ndarray, test: np.ndarray, subset: str,
                            feature_set: str, forest: ForestConfig, iterative: bool = False,
                            n_jobs: int = 1) -> np.ndarray:
    """RF on hand-crafted features; imputation statistics come from the train rows only"""
    imputer, model = fit_handcrafted(dataset, train, subset, feature_set, forest, iterative, n_jobs)
    matrix, _ = feature_matrix([dataset.series[i] for i in test], subset, feature_set, iterative=iterative)
    predicted, _ = rf_predict(model, imputer.transform(matrix))
    return predicted


def fit_deep(dataset: Dataset, train: np.ndarray, run_config: RunConfig, seed: int,
             pretrained: Optional[PretrainedState] = None, with_forest: bool = True,
             n_jobs: int = 1) -> Tuple[TrainResult, Optional[ForestModel]]:
    """
    Fine-tune encoder + MLP on the train rows; optionally fit rf-deep on the
    fine-tuned encoder's features of the same rows

    The encoder starts from the pretrained state when given; otherwise it is
    built from the seed and, with pretrain.epochs > 0, pre-trained on the
    train pixels only.
    """
    spec = NormalizationSpec.from_config(run_config)
    deep_inputs = run_config.encoder.deep_inputs
    train_series = [dataset.series[i] for i in train]
    labels = dataset.labels[train]

    if pretrained is not None:
        encoder = encoder_from_state(*pretrained, source="pretrained state")
    else:
        encoder = build_encoder(run_config, seed)
        if run_config.pretrain.epochs > 0:
            mae_pretrain(train_series, encoder, PretrainConfig.from_config(run_config, seed), spec)

    tuned = finetune(encoder, None, train_series, labels, TrainConfig.from_config(run_config, seed),
                     n_classes=dataset.class_count, spec=spec, deep_inputs=deep_inputs)
    model = None
    if with_forest:
        train_features = embed_dataset(train_series, tuned.encoder, spec, deep_inputs)
        model = rf_fit(train_features, labels, ForestConfig.from_config(run_config, seed),
                       n_classes=dataset.class_count, n_jobs=n_jobs)
    return tuned, model


def deep_predictions(dataset: Dataset, train: np.ndarray, test: np.ndarray, pipelines: Sequence[str],
                     run_config: RunConfig, seed: int, pretrained: Optional[PretrainedState] = None,
                     n_jobs: int = 1) -> Dict[str, np.ndarray]:
    """Fit on the train rows (see fit_deep), then predict the test rows; rf-deep reuses the fine-tuned encoder"""
    tuned, model = fit_deep(dataset, train, run_config, seed, pretrained, "rf-deep" in pipelines, n_jobs)
    spec = NormalizationSpec.from_config(run_config)
    test_features = embed_dataset([dataset.series[i] for i in test], tuned.encoder, spec,
                                  run_config.encoder.deep_inputs)
    out = {}
    if "mlp-deep" in pipelines:
        out["mlp-deep"], _ = mlp_predict(test_features, tuned.head)
    if model is not None:
        out["rf-deep"], _ = rf_predict(model, test_features)
    return out


def run_seed(dataset: Dataset, pipelines: Sequence[str], seed: int, run_config: RunConfig,
             pretrained: Optional[PretrainedState] = None,
             n_jobs: int = 1) -> Tuple[Dict[str, SeedResult], Dict[str, str]]:
    """
    One seed of every pipeline: split, extract, fit, score

    Raises:
        EvaluationError: The pretrained encoder has seen a test plot of this seed's split

    Returns:
        (pipeline -> SeedResult, pipeline -> failure message)
    """
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    train, test = stratified_split(dataset, SplitSpec(train_fraction=run_config.split.train_fraction, seed=seed))
    labels = dataset.labels
    results: Dict[str, SeedResult] = {}
    failures: Dict[str, str] = {}

    deep = [p for p in pipelines if p in DEEP_PIPELINES]
    if deep and pretrained is None:
        pretrained = shared_pretraining(deep, run_config)
    if deep and pretrained is not None:
        plot_ids = dataset.plot_ids
        guard_pretraining_leak(pretrained[0], [plot_ids[i] for i in test])
    if deep:
        try:
            predicted = deep_predictions(dataset, train, test, deep, run_config, seed, pretrained, n_jobs)
            for name, y_pred in predicted.items():
                results[name] = _seed_result(seed, labels[test], y_pred, dataset)
        except Exception as e:
            logger.error(f"Seed {seed}: deep pipelines failed: {e}")
            failures.update({name: f"{type(e).__name__}: {e}" for name in deep})

    if "rf-hand" in pipelines:
        try:
            y_pred = handcrafted_predictions(
                dataset, train, test, run_config.features.subset, run_config.features.feature_set,
                ForestConfig.from_config(run_config, seed), run_config.features.iterative_fit, n_jobs)
            results["rf-hand"] = _seed_result(seed, labels[test], y_pred, dataset)
        except Exception as e:
            logger.error(f"Seed {seed}: rf-hand failed: {e}")
            failures["rf-hand"] = f"{type(e).__name__}: {e}"

    for name, result in results.items():
        logger.info(f"Seed {seed} {name}: OA {result.report.overall_accuracy:.4f}, "
                    f"macro-F1 {result.report.macro_f1:.4f}")
    return results, failures


def _run_seed_task(args):
    return run_seed(*args)


def _map_seeds(tasks: List[tuple], workers: int) -> List:
    if workers <= 1 or len(tasks) <= 1:
        return [_run_seed_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed_task, tasks))


def run_experiment(dataset: Dataset, pipelines: Sequence[str], seeds: Sequence[int], run_config: RunConfig,
                   checkpoint: Optional[str] = None, workers: Optional[int] = None) -> Dict[str, MultiSeedReport]:
    """
    Evaluate each pipeline over several seeds

    Seeds run in separate processes (capped by PHENOCLASS_THREADS); results
    are merged by seed, so they do not depend on scheduling. A seed whose
    test plots the shared encoder has seen raises EvaluationError.

    Args:
        dataset: Labelled pixels
        pipelines: Subset of mlp-deep, rf-deep, rf-hand
        seeds: Distinct seeds, one split and one training run each
        run_config: Resolved configuration
        checkpoint: Optional pre-trained encoder checkpoint; without one, deep
            pipelines pre-train once on the synthetic corpus (pretrain.corpus)

    Returns:
        pipeline -> MultiSeedReport
    """
    unknown = [p for p in pipelines if p not in PIPELINES]
    if unknown:
        raise ValueError(f"unknown pipeline(s) {unknown} (expected {list(PIPELINES)})")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"seeds must be distinct, got {list(seeds)}")
    workers = workers or min(get_config().threads, len(seeds))

    pretrained = shared_pretraining(pipelines, run_config, checkpoint)
    tasks = [(dataset, list(pipelines), seed, run_config, pretrained, 1) for seed in seeds]
    outcomes = _map_seeds(tasks, workers)

    reports = {p: MultiSeedReport(pipeline=p, seeds=list(seeds)) for p in pipelines}
    for seed, (results, failures) in zip(seeds, outcomes):
        for name, result in results.items():
            reports[name].results[seed] = result
        for name, message in failures.items():
            reports[name].failures[seed] = message
    for name, report in reports.items():
        mean, std = report.summary()["macro_f1"]
        state = "complete" if report.complete else f"incomplete ({len(report.failures)} failed seeds)"
        logger.info(f"{name}: macro-F1 {mean:.4f} +/- {std:.4f} over {len(report.results)} seeds, {state}")
    return reports


def _ablation_seed(args) -> Dict[Tuple[str, str], SeedResult]:
    dataset, seed, run_config = args
    torch.set_num_threads(1)
    train, test = stratified_split(dataset, SplitSpec(train_fraction=run_config.split.train_fraction, seed=seed))
    forest = ForestConfig.from_config(run_config, seed)
    cells = {}
    for feature_set in ABLATION_FEATURE_SETS:
        for subset in ABLATION_SUBSETS:
            y_pred = handcrafted_predictions(dataset, train, test, subset, feature_set, forest,
                                             run_config.features.iterative_fit)
            cells[(feature_set, subset)] = _seed_result(seed, dataset.labels[test], y_pred, dataset)
    return cells


def ablation_table(dataset: Dataset, seeds: Sequence[int], run_config: RunConfig,
                   workers: Optional[int] = None) -> pd.DataFrame:
    """
    RF accuracy over {seasonal, harmonic, all} x {s1, s2, s1s2}

    Returns:
        Long frame (feature_set, subset, metric, mean, std), nine cells per metric
    """
    workers = workers or min(get_config().threads, len(seeds))
    tasks = [(dataset, seed, run_config) for seed in seeds]
    if workers <= 1 or len(tasks) <= 1:
        per_seed = [_ablation_seed(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_ablation_seed, tasks))

    rows = []
    for feature_set in ABLATION_FEATURE_SETS:
        for subset in ABLATION_SUBSETS:
            report = MultiSeedReport(pipeline=f"rf-hand:{feature_set}:{subset}", seeds=list(seeds))
            for seed, cells in zip(seeds, per_seed):
                report.results[seed] = cells[(feature_set, subset)]
            for metric, (mean, std) in report.summary().items():
                rows.append({"feature_set": feature_set, "subset": subset, "metric": metric,
                             "mean": mean, "std": std})
    return pd.DataFrame(rows, columns=["feature_set", "subset", "metric", "mean", "std"])


def ablation_grid(table: pd.DataFrame, metric: str = "overall_accuracy") -> pd.DataFrame:
    """3x3 grid of mean values, feature sets as rows and subsets as columns"""
    grid = table[table["metric"] == metric].pivot(index="feature_set", columns="subset", values="mean")
    return grid.reindex(index=list(ABLATION_FEATURE_SETS), columns=list(ABLATION_SUBSETS))
