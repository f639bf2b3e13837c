import json
import logging
import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel
from scipy.stats import rankdata

from psychocal.errors import DomainError, UndefinedMetricError

logger = logging.getLogger(__name__)

DIVERSITY_BINS = 100
DIVERSITY_SMOOTHING = 1e-10


class MetricReport(BaseModel):
    name: str
    value: Optional[float]
    n: int


def _paired(x: Sequence[float], y: Sequence[float], minimum: int) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError(f"expected two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < minimum:
        raise UndefinedMetricError(f"need at least {minimum} pairs, got {len(x)}")
    return x, y


def pcc(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Pearson correlation coefficient.

    Raises:
        UndefinedMetricError: If there are fewer than 2 pairs or either input is constant.
    """
    x, y = _paired(x, y, 2)
    dx = x - x.mean()
    dy = y - y.mean()
    norm = math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    if norm == 0.0:
        raise UndefinedMetricError("correlation is undefined for constant input")
    return float(np.clip(np.dot(dx, dy) / norm, -1.0, 1.0))


def scc(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Spearman rank correlation: Pearson correlation of average ranks.
    """
    x, y = _paired(x, y, 2)
    return pcc(rankdata(x, method="average"), rankdata(y, method="average"))


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    pred, truth = _paired(pred, truth, 1)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def qwk(a: Sequence[int], b: Sequence[int], num_categories: int) -> float:
    """
    Quadratic weighted kappa between two integer ratings in 0..C-1.

    Args:
        a (sequence of int): First ratings.
        b (sequence of int): Second ratings.
        num_categories (int): Number of categories C (>= 2).

    Returns:
        float: 1 - sum(w * O) / sum(w * E).

    Raises:
        UndefinedMetricError: If the expected disagreement is zero.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise DomainError("qwk needs two non-empty, equal-length rating vectors")
    if num_categories < 2:
        raise DomainError("qwk needs at least 2 categories")
    if a.min() < 0 or b.min() < 0 or a.max() >= num_categories or b.max() >= num_categories:
        raise DomainError(f"ratings must lie in 0..{num_categories - 1}")

    observed = np.zeros((num_categories, num_categories))
    np.add.at(observed, (a, b), 1.0)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()
    categories = np.arange(num_categories)
    weights = (categories[:, None] - categories[None, :]) ** 2 / (num_categories - 1) ** 2

    denominator = float((weights * expected).sum())
    if denominator == 0.0:
        raise UndefinedMetricError("qwk is undefined: expected disagreement is zero")
    return 1.0 - float((weights * observed).sum()) / denominator


def theta_align(abilities: Sequence[float], scores: Sequence[int]) -> float:
    """
    Spearman correlation between prompted abilities and the scores their responses received.
    """
    return scc(abilities, scores)


def _as_matrix(vectors: Sequence[Sequence[float]]) -> np.ndarray:
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if matrix.ndim != 2:
        raise DomainError("expected a list of vectors")
    return matrix


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, eigenvectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T


def sqrtm_product(sigma1: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """
    Square root of the product of two covariance matrices, (S1 S2)^(1/2), computed as
    S1^(1/2) (S1^(1/2) S2 S1^(1/2))^(1/2) S1^(-1/2). Negative eigenvalues from
    numerical noise are clamped to 0.

    Args:
        sigma1 (np.ndarray): First symmetric positive semi-definite matrix.
        sigma2 (np.ndarray): Second symmetric positive semi-definite matrix.

    Returns:
        np.ndarray: A matrix R with R @ R == S1 @ S2.
    """
    root1 = _sqrtm_psd(np.atleast_2d(sigma1))
    inner = _sqrtm_psd(root1 @ np.atleast_2d(sigma2) @ root1)
    return root1 @ inner @ np.linalg.pinv(root1)


def fid(set_a: Sequence[Sequence[float]], set_b: Sequence[Sequence[float]]) -> float:
    """
    Frechet distance between Gaussians fitted to two sets of embedding vectors.

    Args:
        set_a (list of vectors): First set (at least 2 vectors).
        set_b (list of vectors): Second set (at least 2 vectors).

    Returns:
        float: ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped at 0.

    Raises:
        DomainError: If the dimensions differ or a set has fewer than 2 vectors.
    """
    a = _as_matrix(set_a)
    b = _as_matrix(set_b)
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise DomainError("fid needs at least 2 vectors per set")

    diff = a.mean(axis=0) - b.mean(axis=0)
    sigma_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    sigma_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))

    tr_covmean = float(np.trace(sqrtm_product(sigma_a, sigma_b)))

    distance = float(diff.dot(diff) + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_covmean)
    return max(distance, 0.0)


def _pairwise_cosines(vectors: Sequence[Sequence[float]]) -> np.ndarray:
    matrix = _as_matrix(vectors)
    if len(matrix) < 2:
        raise DomainError("need at least 2 vectors for pairwise similarities")
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise DomainError("cosine similarity is undefined for zero-norm vectors")
    unit = matrix / norms[:, None]
    similarities = unit @ unit.T
    upper = np.triu_indices(len(matrix), k=1)
    return np.clip(similarities[upper], -1.0, 1.0)


def _similarity_histogram(vectors: Sequence[Sequence[float]], bins: int, smoothing: float) -> np.ndarray:
    counts, _ = np.histogram(_pairwise_cosines(vectors), bins=bins, range=(-1.0, 1.0))
    probabilities = counts / counts.sum() + smoothing
    return probabilities / probabilities.sum()


def diversity_kl(
    set_a: Sequence[Sequence[float]],
    set_b: Sequence[Sequence[float]],
    bins: int = DIVERSITY_BINS,
    smoothing: float = DIVERSITY_SMOOTHING,
) -> float:
    """
    KL divergence KL(A || B) between the histograms of within-set pairwise cosine
    similarities. Histograms span [-1, 1] with equal-width buckets; every bucket gets
    the additive smoothing before renormalising. Pass ground truth as A and the
    simulated set as B.

    Args:
        set_a (list of vectors): Reference set (at least 2 vectors).
        set_b (list of vectors): Compared set (at least 2 vectors).
        bins (int, optional): Number of histogram buckets. Defaults to 100.
        smoothing (float, optional): Additive smoothing per bucket. Defaults to 1e-10.

    Returns:
        float: KL(A || B) >= 0.

    Raises:
        DomainError: If a set has a zero-norm vector or fewer than 2 vectors.
    """
    if bins < 1:
        raise DomainError("bins must be positive")
    p = _similarity_histogram(set_a, bins, smoothing)
    q = _similarity_histogram(set_b, bins, smoothing)
    return max(float(np.sum(p * np.log(p / q))), 0.0)


def _report(name: str, n: int, compute) -> MetricReport:
    try:
        value = compute()
    except UndefinedMetricError as e:
        logger.warning("Metric %s is undefined: %s", name, e)
        value = None
    return MetricReport(name=name, value=value, n=n)


def evaluate(
    pred: Optional[Sequence[float]] = None,
    truth: Optional[Sequence[float]] = None,
    sim_abilities: Optional[Sequence[float]] = None,
    sim_scores: Optional[Sequence[int]] = None,
    real_vectors: Optional[Sequence[Sequence[float]]] = None,
    sim_vectors: Optional[Sequence[Sequence[float]]] = None,
    diversity_bins: int = DIVERSITY_BINS,
) -> Dict[str, MetricReport]:
    """
    Compute every metric the supplied inputs allow.

    Args:
        pred (list of float, optional): Predicted difficulties.
        truth (list of float, optional): True difficulties aligned with pred.
        sim_abilities (list of float, optional): Prompted abilities of simulated responses.
        sim_scores (list of int, optional): Scores of the simulated responses.
        real_vectors (list of vectors, optional): Embeddings of ground-truth responses.
        sim_vectors (list of vectors, optional): Embeddings of simulated responses.
        diversity_bins (int, optional): Buckets for Diversity KL. Defaults to 100.

    Returns:
        dict: MetricReport by metric name.
    """
    reports: Dict[str, MetricReport] = {}
    if pred is not None and truth is not None:
        n = len(pred)
        reports["pcc"] = _report("pcc", n, lambda: pcc(pred, truth))
        reports["scc"] = _report("scc", n, lambda: scc(pred, truth))
        reports["rmse"] = _report("rmse", n, lambda: rmse(pred, truth))
    if sim_abilities is not None and sim_scores is not None:
        reports["theta_align"] = _report(
            "theta_align", len(sim_scores), lambda: theta_align(sim_abilities, sim_scores)
        )
    if real_vectors is not None and sim_vectors is not None:
        n = min(len(real_vectors), len(sim_vectors))
        reports["fid"] = _report("fid", n, lambda: fid(real_vectors, sim_vectors))
        reports["diversity_kl"] = _report(
            "diversity_kl", n, lambda: diversity_kl(real_vectors, sim_vectors, diversity_bins)
        )
    return reports


def save_report(reports: Dict[str, MetricReport], path: Union[str, Path]) -> None:
    document = {
        name: {"value": report.value, "n": report.n} for name, report in sorted(reports.items())
    }
    with open(path, "w", encoding="utf-8") as report_file:
        json.dump(document, report_file, indent=2, sort_keys=True)
        report_file.write("\n")


def load_report(path: Union[str, Path]) -> Dict[str, MetricReport]:
    with open(path, "r", encoding="utf-8") as report_file:
        document = json.load(report_file)
    return {
        name: MetricReport(name=name, value=entry["value"], n=entry["n"])
        for name, entry in document.items()
    }
