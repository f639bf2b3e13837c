import logging

import pytest

from psychocal.irt_core import AbilityRecord, FitResult, ItemParams, score_probabilities
from psychocal.sim_engine import Item, sample_calibration_data


@pytest.fixture
def derived_params() -> ItemParams:
    # theta = 1 gives cumulative exponents (1.0, 2.5, 3.0)
    return ItemParams(item_id="q1", discrimination=1.0, difficulty=0.0, steps=(0.0, 0.5, -0.5))


@pytest.fixture
def derived_item() -> Item:
    return Item(
        item_id="q1",
        passage="The fox jumped.",
        question="What did the fox do?",
        rubric="2: jumped",
        num_categories=3,
    )


@pytest.fixture(scope="session")
def small_corpus():
    """100 students x 5 items, C = 3."""
    return sample_calibration_data(100, 5, num_categories=3, rng_seed=7)


@pytest.fixture(scope="session")
def small_truth_fit(small_corpus) -> FitResult:
    _, truth, abilities, _ = small_corpus
    return FitResult(
        item_params=truth,
        abilities={record.student_id: record for record in abilities},
        final_loss=0.0,
    )


def make_fit(params, abilities) -> FitResult:
    return FitResult(
        item_params={p.item_id: p for p in params},
        abilities={
            student_id: AbilityRecord(student_id=student_id, theta=theta)
            for student_id, theta in abilities.items()
        },
        final_loss=0.0,
    )


def brute_force_count(dataset, fit, epsilon, m) -> int:
    """Expected number of mined pairs: min(m, candidates) per (item, student)."""
    available = {}
    for target in dataset:
        params = fit.item_params[target.item_id]
        probabilities = score_probabilities(fit.abilities[target.student_id].theta, params)
        candidates = [
            other
            for other in dataset
            if other.item_id == target.item_id
            and probabilities[target.score] - probabilities[other.score] > epsilon
        ]
        key = (target.item_id, target.student_id)
        available[key] = available.get(key, 0) + len(candidates)
    return sum(min(m, count) for count in available.values())


@pytest.fixture(autouse=True)
def reset_psychocal_logger():
    yield
    logger = logging.getLogger("psychocal")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.setLevel(logging.NOTSET)
