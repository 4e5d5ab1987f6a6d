"""Parsing metrics, generalization and transfer matrices, confusion matrices.

Accuracies are fractions in ``[0, 1]`` everywhere; exports turn them into
percentages rounded to two decimals for the CSV files only.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from cachetools import LRUCache
from loguru import logger
from sklearn.metrics import confusion_matrix

from .attacks import AttackSpec, WhiteBoxVictim, attack_batch
from .datasets import LabeledImages
from .diffnet import infer
from .errors import ConfigurationError, ShapeMismatchError, TestbedError
from .parser_net import MpnModel, PenModel, Prediction, predict
from .redset import AttributeSchema, ParsingDataset, concat_datasets
from .utils import write_json
from .victim_zoo import TrainedVictim

METRICS = ("weighted", "combined")


# =============================================================================
# ACCURACIES
# =============================================================================

@dataclass
class AttributeAccuracies:
    names: Tuple[str, ...]
    per_attribute: np.ndarray
    counts: Tuple[int, ...]
    samples: int

    def __post_init__(self) -> None:
        self.per_attribute = np.asarray(self.per_attribute, dtype=np.float64)
        if np.any(self.per_attribute < 0) or np.any(self.per_attribute > 1):
            raise ConfigurationError("Attribute accuracies must lie in [0, 1]")

    def to_dict(self) -> Dict[str, float]:
        return {name: float(v) for name, v in zip(self.names, self.per_attribute)}


def _labels_of(predictions: Union[Prediction, np.ndarray]) -> np.ndarray:
    labels = predictions.labels if isinstance(predictions, Prediction) else predictions
    return np.atleast_2d(np.asarray(labels, dtype=np.int64))


def attribute_accuracy(predictions: Union[Prediction, np.ndarray], labels: np.ndarray,
                       schema: AttributeSchema) -> AttributeAccuracies:
    """Per-head fraction of samples whose argmax equals the true label."""

    pred = _labels_of(predictions)
    true = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if pred.shape != true.shape:
        raise ShapeMismatchError(f"Predictions {pred.shape} vs labels {true.shape}")
    if len(true) == 0:
        raise ConfigurationError("Cannot score an empty set")
    if true.shape[1] != schema.heads:
        raise ShapeMismatchError(f"{true.shape[1]} label columns for a {schema.heads}-attribute schema")
    return AttributeAccuracies(schema.names, (pred == true).mean(axis=0), schema.counts, len(true))


def weighted_accuracy(acc: AttributeAccuracies) -> float:
    """``sum_i N_i TA(i) / sum_i N_i``."""

    counts = np.asarray(acc.counts, dtype=np.float64)
    return float((counts * acc.per_attribute).sum() / counts.sum())


def combined_accuracy(predictions: Union[Prediction, np.ndarray], labels: np.ndarray) -> float:
    """Fraction of samples with every head correct."""

    pred = _labels_of(predictions)
    true = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if pred.shape != true.shape:
        raise ShapeMismatchError(f"Predictions {pred.shape} vs labels {true.shape}")
    if len(true) == 0:
        raise ConfigurationError("Cannot score an empty set")
    return float(np.all(pred == true, axis=1).mean())


def chance_baselines(schema: AttributeSchema) -> Dict[str, Any]:
    counts = np.asarray(schema.counts, dtype=np.float64)
    return {
        "per_attribute": {name: 1.0 / n for name, n in zip(schema.names, schema.counts)},
        "weighted": float(len(counts) / counts.sum()),
        "combined": 1.0 / schema.combinations,
    }


@dataclass
class EvaluationReport:
    accuracies: AttributeAccuracies
    weighted: float
    combined: float
    chance: Dict[str, Any]
    input_format: str
    provenance: Dict[str, Any] = field(default_factory=dict)

    def metric(self, name: str) -> float:
        if name not in METRICS:
            raise ConfigurationError(f"Unknown metric {name!r}; expected one of {list(METRICS)}")
        return self.weighted if name == "weighted" else self.combined

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_attribute": self.accuracies.to_dict(),
            "weighted": self.weighted,
            "combined": self.combined,
            "samples": self.accuracies.samples,
            "chance": self.chance,
            "input_format": self.input_format,
            "provenance": self.provenance,
        }


def evaluate_mpn(mpn: MpnModel, dataset: ParsingDataset, pen: Optional[PenModel] = None) -> EvaluationReport:
    """Score ``mpn`` (optionally behind ``pen``) on a parsing dataset."""

    if not dataset.schema.same_heads(mpn.schema):
        raise ConfigurationError(f"Dataset parses {dataset.schema.names}, the MPN parses {mpn.schema.names}")
    prediction = predict(mpn, dataset.z, dataset.input_format, pen=pen)
    acc = attribute_accuracy(prediction, dataset.y, dataset.schema)
    fmt = "pen-perturbation" if pen is not None else dataset.input_format
    return EvaluationReport(acc, weighted_accuracy(acc), combined_accuracy(prediction, dataset.y),
                            chance_baselines(dataset.schema), fmt,
                            {"dataset": dataset.content_hash(), "samples": len(dataset)})


# =============================================================================
# MATRICES
# =============================================================================

@dataclass
class GeneralizationMatrix:
    """Rows are training conditions, columns test conditions.

    Failed cells hold NaN and an entry in ``errors`` keyed ``"row|col"``.
    """

    rows: List[str]
    cols: List[str]
    values: np.ndarray
    metric: str
    provenance: Dict[str, Any] = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)
    chance: Optional[Dict[str, Any]] = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise ShapeMismatchError(f"Matrix of shape {self.values.shape} for {len(self.rows)}x{len(self.cols)} labels")

    def cell(self, row: str, col: str) -> float:
        return float(self.values[self.rows.index(row), self.cols.index(col)])

    def diagonal(self) -> Dict[str, float]:
        return {r: self.cell(r, r) for r in self.rows if r in self.cols}

    def to_frame(self) -> pd.DataFrame:
        """Percentages rounded to two decimals."""

        return pd.DataFrame((self.values * 100).round(2), index=self.rows, columns=self.cols)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "values": [[None if math.isnan(v) else float(v) for v in row] for row in self.values],
            "metric": self.metric,
            "provenance": self.provenance,
            "errors": self.errors,
            "chance": self.chance,
        }


# Trained row models keyed by (training-data hash, seed).
MODEL_CACHE: LRUCache = LRUCache(maxsize=64)


def dataset_key(ds: ParsingDataset) -> str:
    return ds.content_hash()


def cached_fit(ds: ParsingDataset, fit: Callable[[ParsingDataset, int], MpnModel], seed: int,
               cache: Optional[LRUCache] = None) -> MpnModel:
    """Train through ``fit`` unless a model for ``(dataset, seed)`` is cached."""

    cache = MODEL_CACHE if cache is None else cache
    key = (dataset_key(ds), seed)
    if key not in cache:
        cache[key] = fit(ds, seed)
    else:
        logger.debug("Reusing cached MPN for {}", key[0][:12])
    return cache[key]


def generalization_matrix(
    rows: Sequence[str],
    cols: Sequence[str],
    train_data: Callable[[str], ParsingDataset],
    test_data: Callable[[str], ParsingDataset],
    fit: Callable[[ParsingDataset, int], MpnModel],
    seed: int = 0,
    metric: str = "weighted",
    combined: Optional[Mapping[str, Sequence[str]]] = None,
    evaluate: Callable[[MpnModel, ParsingDataset], EvaluationReport] = evaluate_mpn,
    cache: Optional[LRUCache] = None,
) -> GeneralizationMatrix:
    """Train one MPN per row condition and score it on every column condition.

    Row names listed in ``combined`` pool the training data of their member
    conditions. Rows and columns can be attack types, strengths or
    architectures; the callbacks decide what a condition means.
    """

    if metric not in METRICS:
        raise ConfigurationError(f"Unknown metric {metric!r}; expected one of {list(METRICS)}")
    combined = dict(combined or {})
    values = np.full((len(rows), len(cols)), np.nan)
    errors: Dict[str, str] = {}
    row_hashes: Dict[str, str] = {}
    col_hashes: Dict[str, str] = {}
    chance = None
    test_sets: Dict[str, ParsingDataset] = {}
    for c in cols:
        try:
            test_sets[c] = test_data(c)
            col_hashes[c] = dataset_key(test_sets[c])
        except TestbedError as exc:
            for r in rows:
                errors[f"{r}|{c}"] = f"{type(exc).__name__}: {exc}"

    for i, r in enumerate(rows):
        try:
            members = combined.get(r)
            ds = concat_datasets([train_data(m) for m in members]) if members else train_data(r)
            row_hashes[r] = dataset_key(ds)
            model = cached_fit(ds, fit, seed, cache)
        except TestbedError as exc:
            logger.warning("Row {} failed: {}", r, exc)
            for c in cols:
                errors[f"{r}|{c}"] = f"{type(exc).__name__}: {exc}"
            continue
        for j, c in enumerate(cols):
            if c not in test_sets:
                continue
            try:
                report = evaluate(model, test_sets[c])
            except TestbedError as exc:
                logger.warning("Cell {}|{} failed: {}", r, c, exc)
                errors[f"{r}|{c}"] = f"{type(exc).__name__}: {exc}"
                continue
            values[i, j] = report.metric(metric)
            chance = chance or report.chance
    provenance = {"seed": seed, "rows": row_hashes, "cols": col_hashes, "combined": combined}
    return GeneralizationMatrix(list(rows), list(cols), values, metric, provenance, errors, chance)


def transfer_asr_matrix(
    victims: Sequence[TrainedVictim],
    spec: AttackSpec,
    images: LabeledImages,
    threads: int = 1,
) -> GeneralizationMatrix:
    """Entry ``(s, t)``: fraction of images misclassified by ``t`` on attacks crafted on ``s``."""

    if not victims:
        raise ConfigurationError("Transfer matrix needs at least one victim")
    shapes = {v.network.input_shape for v in victims}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"Victims disagree on input shape: {sorted(shapes)}")
    names = [v.attributes.vm_id if v.attributes else f"victim{i}" for i, v in enumerate(victims)]
    values = np.full((len(victims), len(victims)), np.nan)
    errors: Dict[str, str] = {}
    for s, source in enumerate(victims):
        try:
            handle = WhiteBoxVictim(source.network.eval(), source.attributes)
            records = attack_batch(handle, images.images, images.labels, spec, threads=threads, image_ids=images.ids)
        except TestbedError as exc:
            logger.warning("Transfer source {} failed: {}", names[s], exc)
            for t in names:
                errors[f"{names[s]}|{t}"] = f"{type(exc).__name__}: {exc}"
            continue
        x_adv = np.stack([r.x_adv for r in records])
        for t, target in enumerate(victims):
            predicted = infer(target.network.eval(), x_adv).argmax(axis=1)
            values[s, t] = float((predicted != images.labels).mean())
    provenance = {"spec": spec.to_dict(), "spec_hash": spec.spec_hash(), "images": len(images)}
    return GeneralizationMatrix(names, names, values, "asr", provenance, errors)


# =============================================================================
# CONFUSION
# =============================================================================

@dataclass
class ConfusionMatrix:
    """Row-stochastic matrix over attribute combinations (true -> predicted).

    Combinations with no test samples have no distribution: their rows are
    NaN (empty in the CSV, ``null`` in the JSON).
    """

    matrix: np.ndarray
    labels: List[str]
    support: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame((self.matrix * 100).round(2), index=self.labels, columns=self.labels)

    def diagonal_accuracy(self) -> float:
        """Support-weighted diagonal, i.e. combined accuracy of the pooled set."""

        total = self.support.sum()
        seen = self.support > 0
        return float((np.diag(self.matrix)[seen] * self.support[seen]).sum() / total) if total else 0.0

    def to_dict(self) -> Dict[str, Any]:
        matrix = [[None if math.isnan(v) else float(v) for v in row] for row in self.matrix]
        return {"labels": self.labels, "matrix": matrix, "support": self.support.tolist()}


def confusion_from_labels(true: np.ndarray, pred: np.ndarray, schema: AttributeSchema) -> ConfusionMatrix:
    k = schema.combinations
    t = schema.combination_index(true)
    p = schema.combination_index(pred)
    counts = confusion_matrix(t, p, labels=np.arange(k)).astype(np.float64)
    support = counts.sum(axis=1)
    matrix = np.divide(counts, support[:, None], out=np.full_like(counts, np.nan), where=support[:, None] > 0)
    return ConfusionMatrix(matrix, [schema.combination_label(i) for i in range(k)], support.astype(np.int64))


def parsing_confusion(
    mpn: MpnModel,
    test_sets: Union[ParsingDataset, Mapping[str, ParsingDataset]],
    pen: Optional[PenModel] = None,
) -> ConfusionMatrix:
    """Empirical distribution of predicted combinations for each true victim configuration."""

    sets = [test_sets] if isinstance(test_sets, ParsingDataset) else list(test_sets.values())
    if not sets:
        raise ConfigurationError("No test sets given")
    for ds in sets:
        if not ds.schema.same_heads(mpn.schema):
            raise ConfigurationError("Test set victims are not covered by the MPN schema")
    pooled = concat_datasets(sets) if len(sets) > 1 else sets[0]
    prediction = predict(mpn, pooled.z, pooled.input_format, pen=pen)
    return confusion_from_labels(pooled.y, prediction.labels, mpn.schema)


# =============================================================================
# EXPORT
# =============================================================================

def export_matrix(matrix: Union[GeneralizationMatrix, ConfusionMatrix], directory: Union[str, Path],
                  name: str) -> Dict[str, str]:
    """Write ``<name>.csv`` (percent, 2 decimals) and ``<name>.json`` (full precision)."""

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{name}.csv"
    matrix.to_frame().to_csv(csv_path, float_format="%.2f", lineterminator="\n")
    json_path = write_json(directory / f"{name}.json", matrix.to_dict())
    logger.info("Matrix {} exported to {}", name, directory)
    return {"csv": str(csv_path), "json": str(json_path)}
