import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from psychocal.errors import CoverageError, DegenerateItemError, DomainError
from psychocal.irt_core import FitConfig, FitResult, ScoredResponse, fit

logger = logging.getLogger(__name__)


class DifficultyPrediction(BaseModel):
    item_id: str
    raw_difficulty: float
    normalized_difficulty: float

    @field_validator("raw_difficulty", "normalized_difficulty")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("difficulties must be finite")
        return value


class EmbeddingRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    item_id: str
    vector: Tuple[float, ...]


def normalize_predictions(
    preds: Sequence[float], train_difficulties: Sequence[float]
) -> List[float]:
    """
    Give predicted difficulties the mean and (population) standard deviation of the
    train difficulties: (s2 / s1) * (b - m1) + m2.

    Args:
        preds (list of float): Predicted difficulties (moments m1, s1).
        train_difficulties (list of float): Train-set difficulties (moments m2, s2).

    Returns:
        list of float: The transformed predictions.

    Raises:
        DomainError: If either list has fewer than 2 distinct values.
    """
    preds = np.asarray(preds, dtype=np.float64)
    train = np.asarray(train_difficulties, dtype=np.float64)
    if len(np.unique(preds)) < 2 or len(np.unique(train)) < 2:
        raise DomainError("normalization needs at least 2 distinct values in each list")

    mu1, sigma1 = preds.mean(), preds.std()
    mu2, sigma2 = train.mean(), train.std()
    if sigma1 == 0.0:
        raise DomainError("normalization is undefined for zero predicted spread")
    return ((sigma2 / sigma1) * (preds - mu1) + mu2).tolist()


def predict_difficulties(
    train_responses: Sequence[ScoredResponse],
    sim_responses: Sequence[ScoredResponse],
    calibrated: FitResult,
    config: FitConfig,
    num_categories_per_item: Mapping[str, int],
    test_item_ids: Optional[Sequence[str]] = None,
) -> List[DifficultyPrediction]:
    """
    Predict difficulties of unseen items by refitting the IRT model on real train
    responses together with simulated responses, warm-started from the calibrated
    model. Predictions are normalized to the calibrated train-item moments.

    Args:
        train_responses (list of ScoredResponse): Real responses to the train items.
        sim_responses (list of ScoredResponse): Scored simulated responses.
        calibrated (FitResult): Fit on the train responses.
        config (FitConfig): Refit settings.
        num_categories_per_item (dict): Number of score categories per item id.
        test_item_ids (list of str, optional): Items to predict; each must have simulated responses. Defaults to the items only present in sim_responses.

    Returns:
        list of DifficultyPrediction: One prediction per test item, sorted by item id.

    Raises:
        CoverageError: If there are no simulated responses or a test item lacks them.
        DegenerateItemError: If a test item's simulated scores fall into one category.
    """
    if not sim_responses:
        raise CoverageError("no simulated responses: there are no unseen items to fit")

    train_items = {response.item_id for response in train_responses}
    sim_items = {response.item_id for response in sim_responses}
    if test_item_ids is None:
        test_items = sorted(sim_items - train_items)
    else:
        test_items = sorted(set(test_item_ids))
        missing = [item_id for item_id in test_items if item_id not in sim_items]
        if missing:
            raise CoverageError("no simulated responses for test items: " + ", ".join(missing))
    if not test_items:
        raise CoverageError("simulated responses cover no unseen item")

    observed: Dict[str, set] = {}
    for response in sim_responses:
        observed.setdefault(response.item_id, set()).add(response.score)
    degenerate = [item_id for item_id in test_items if len(observed[item_id]) < 2]
    if degenerate:
        raise DegenerateItemError(degenerate)

    refit = fit(
        list(train_responses) + list(sim_responses),
        num_categories_per_item,
        config,
        warm_start=calibrated,
    )

    raw = [refit.item_params[item_id].difficulty for item_id in test_items]
    train_difficulties = [
        params.difficulty
        for item_id, params in sorted(calibrated.item_params.items())
        if item_id not in test_items
    ]
    normalized = normalize_predictions(raw, train_difficulties)
    logger.info("Predicted difficulties for %d unseen items", len(test_items))
    return [
        DifficultyPrediction(item_id=item_id, raw_difficulty=r, normalized_difficulty=n)
        for item_id, r, n in zip(test_items, raw, normalized)
    ]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        raise DomainError("cosine similarity is undefined for zero-norm vectors")
    return float(np.dot(a, b)) / norm


def knn_mean_difficulty(
    test_embedding: EmbeddingRecord,
    train: Sequence[Tuple[EmbeddingRecord, float]],
    k: int = 1,
) -> float:
    """
    Mean difficulty of the k train items most cosine-similar to the test item
    (ties broken by item id). k = 1 copies the nearest item's difficulty.

    Args:
        test_embedding (EmbeddingRecord): Embedding of the test item.
        train (list of (EmbeddingRecord, float)): Train item embeddings with their difficulties.
        k (int, optional): Number of neighbours. Defaults to 1.

    Returns:
        float: The predicted difficulty.
    """
    if not train:
        raise DomainError("kNN needs a non-empty train set")
    if k < 1:
        raise DomainError("k must be at least 1")
    query = np.asarray(test_embedding.vector, dtype=np.float64)

    scored = []
    for record, difficulty in train:
        vector = np.asarray(record.vector, dtype=np.float64)
        if vector.shape != query.shape:
            raise DomainError(
                f"embedding of {record.item_id} has dimension {vector.shape}, expected {query.shape}"
            )
        scored.append((-_cosine(query, vector), record.item_id, float(difficulty)))
    scored.sort(key=lambda entry: (entry[0], entry[1]))
    neighbours = scored[: min(k, len(scored))]
    return float(np.mean([difficulty for _, _, difficulty in neighbours]))


def knn_baseline(
    test_embeddings: Sequence[EmbeddingRecord],
    train_embeddings: Sequence[EmbeddingRecord],
    train_difficulties: Mapping[str, float],
    k: int = 1,
) -> List[DifficultyPrediction]:
    """
    Embedding kNN-mean difficulty baseline with the train-moment normalization applied.
    """
    train = [
        (record, train_difficulties[record.item_id])
        for record in train_embeddings
        if record.item_id in train_difficulties
    ]
    tests = sorted(test_embeddings, key=lambda record: record.item_id)
    raw = [knn_mean_difficulty(record, train, k) for record in tests]
    normalized = normalize_predictions(raw, [difficulty for _, difficulty in train])
    return [
        DifficultyPrediction(item_id=record.item_id, raw_difficulty=r, normalized_difficulty=n)
        for record, r, n in zip(tests, raw, normalized)
    ]


def write_predictions_csv(
    predictions: Sequence[DifficultyPrediction], path: Union[str, Path]
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as csv_file:
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(["item_id", "raw", "normalized"])
        for prediction in predictions:
            writer.writerow(
                [
                    prediction.item_id,
                    f"{prediction.raw_difficulty:.9f}",
                    f"{prediction.normalized_difficulty:.9f}",
                ]
            )


def read_predictions_csv(path: Union[str, Path]) -> List[DifficultyPrediction]:
    with open(path, "r", encoding="utf-8", newline="") as csv_file:
        return [
            DifficultyPrediction(
                item_id=row["item_id"],
                raw_difficulty=float(row["raw"]),
                normalized_difficulty=float(row["normalized"]),
            )
            for row in csv.DictReader(csv_file)
        ]
