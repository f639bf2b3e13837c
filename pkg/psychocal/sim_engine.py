import hashlib
import logging
import math
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from psychocal.errors import (
    BackendError,
    DomainError,
    EnvelopeParseError,
    SimulationAbortedError,
    UnknownIdError,
)
from psychocal.irt_core import AbilityRecord, ItemParams, ScoredResponse, sample_scores

logger = logging.getLogger(__name__)

ENVELOPE_PREFIX = "SYNTH"
FEATURE_DIM = 8

T = TypeVar("T")


class Item(BaseModel):
    model_config = ConfigDict(frozen=True)

    item_id: str
    passage: str = ""
    question: str
    rubric: str = ""
    num_categories: int = Field(ge=2)

    @field_validator("question")
    @classmethod
    def _question_not_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("question must not be empty")
        return value


class DecodingConfig(BaseModel):
    max_tokens: int = Field(default=500, ge=1)
    temperature: float = Field(default=0.7, ge=0)
    top_p: float = Field(default=0.95, gt=0, le=1)


class BackendBinding(BaseModel):
    """
    Which backend serves generation or scoring, and how to reach it.
    """

    kind: Literal["synthetic", "subprocess", "http", "chat"] = "synthetic"
    command: Optional[List[str]] = None
    url: Optional[str] = None
    model: Optional[str] = None
    base_url: Optional[str] = None
    timeout_seconds: float = Field(default=60.0, gt=0)
    flip_prob: float = Field(default=0.0, ge=0, le=1)
    ability_blind: bool = False


class SimulationPlan(BaseModel):
    population_size: int = Field(default=1000, ge=1)
    histogram_bins: int = Field(default=50, ge=1)
    rng_seed: int = 0
    generator: BackendBinding = Field(default_factory=BackendBinding)
    scorer: BackendBinding = Field(default_factory=BackendBinding)
    decoding: DecodingConfig = Field(default_factory=DecodingConfig)
    max_workers: int = Field(default=8, ge=1)
    max_attempts: int = Field(default=3, ge=1)
    backoff_seconds: float = Field(default=0.5, ge=0)


class GeneratorBackend(ABC):
    """Produces the response of a simulated student of a given ability."""

    @abstractmethod
    def generate(
        self, item: Item, theta: float, decoding: DecodingConfig, rng: np.random.Generator
    ) -> str:
        """
        Args:
            item (Item): The item to respond to.
            theta (float): The prompted ability.
            decoding (DecodingConfig): Sampling settings.
            rng (np.random.Generator): The random stream of this simulation cell.

        Returns:
            str: The response text.
        """


class ScorerBackend(ABC):
    """Assigns a score in 0..C-1 to a response."""

    @abstractmethod
    def score(self, item: Item, response_text: str, rng: np.random.Generator) -> int:
        """
        Args:
            item (Item): The item the response belongs to.
            response_text (str): The response.
            rng (np.random.Generator): The random stream of this simulation cell.

        Returns:
            int: The score.
        """


def stable_hash(*keys: object) -> int:
    """
    Platform-independent 64-bit hash of the given keys.
    """
    digest = hashlib.sha256("\x1f".join(repr(key) for key in keys).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *keys: object) -> np.random.Generator:
    """
    Independent random stream for (seed, keys), identical however the work is scheduled.
    """
    return np.random.default_rng([seed, stable_hash(*keys)])


def sample_population(
    train_thetas: Sequence[float], n: int, bins: int = 50, rng_seed: int = 0
) -> List[float]:
    """
    Draw a population of abilities matching the training distribution: build an
    equal-width histogram over [min, max] of the training abilities (last bin
    right-closed), draw buckets proportionally to their counts, and draw uniformly
    within each drawn bucket.

    Args:
        train_thetas (list of float): Abilities of the training students.
        n (int): Population size.
        bins (int, optional): Number of histogram buckets. Defaults to 50.
        rng_seed (int, optional): Random seed. Defaults to 0.

    Returns:
        list of float: The sampled abilities.

    Raises:
        DomainError: If there are no (finite) training abilities or n/bins are not positive.
    """
    thetas = np.asarray(train_thetas, dtype=np.float64)
    if thetas.size == 0:
        raise DomainError("cannot sample a population from no abilities")
    if not np.all(np.isfinite(thetas)):
        raise DomainError("training abilities must be finite")
    if n < 1 or bins < 1:
        raise DomainError("population size and bin count must be positive")

    counts, edges = np.histogram(thetas, bins=bins)
    rng = np.random.default_rng(rng_seed)
    buckets = rng.choice(bins, size=n, p=counts / counts.sum())
    return rng.uniform(edges[buckets], edges[buckets + 1]).tolist()


def assign_student_id(theta: float, prefix: str = "sim") -> str:
    """
    Student id of an ability rounded to one decimal place (round-half-to-even on the
    binary value), so that nearby abilities share one id. -0.0 is written as 0.0.

    Args:
        theta (float): The ability.
        prefix (str, optional): Id prefix. Defaults to "sim".

    Returns:
        str: e.g. "sim_0.7".
    """
    if not math.isfinite(theta):
        raise DomainError("theta must be finite")
    rounded = round(float(theta), 1) + 0.0
    return f"{prefix}_{rounded:.1f}"


def pseudo_embedding(item_id: str, theta: float, score: int, dim: int = FEATURE_DIM) -> np.ndarray:
    """
    Deterministic feature vector of a synthetic response: a per-(item, score) centre
    plus per-(item, theta, score) noise.
    """
    centre = np.random.default_rng(stable_hash("centre", item_id, score)).normal(size=dim)
    noise = np.random.default_rng(stable_hash("noise", item_id, float(theta), score)).normal(
        size=dim
    )
    return centre + 0.5 * noise


def format_envelope(item_id: str, score: int, features: Sequence[float]) -> str:
    encoded = ",".join(f"{value:.6f}" for value in features)
    return f"{ENVELOPE_PREFIX}|item={item_id}|y={score}|f={encoded}"


def parse_envelope(text: str) -> Tuple[str, int, List[float]]:
    """
    Parse a synthetic response envelope "SYNTH|item=<id>|y=<y>|f=<v1,v2,...>".

    Returns:
        tuple: (item_id, score, features).

    Raises:
        EnvelopeParseError: If the text is not a well-formed envelope.
    """
    prefix = ENVELOPE_PREFIX + "|"
    if not text.startswith(prefix):
        raise EnvelopeParseError(f"not a synthetic envelope: {text[:40]!r}")
    try:
        item_part, score_part, feature_part = text[len(prefix) :].rsplit("|", 2)
    except ValueError:
        raise EnvelopeParseError(f"malformed envelope: {text[:40]!r}") from None
    if not (
        item_part.startswith("item=")
        and score_part.startswith("y=")
        and feature_part.startswith("f=")
    ):
        raise EnvelopeParseError(f"malformed envelope: {text[:40]!r}")
    try:
        score = int(score_part[2:])
        features = [float(value) for value in feature_part[2:].split(",") if value]
    except ValueError:
        raise EnvelopeParseError(f"malformed envelope values: {text[:40]!r}") from None
    return item_part[5:], score, features


def synthetic_oracle_generate(
    item: Item,
    theta: float,
    truth: ItemParams,
    rng: np.random.Generator,
    ability_blind: bool = False,
) -> str:
    """
    Stand-in for a simulated student: samples y ~ GPCM(theta, truth) and wraps it in
    an envelope together with a pseudo-embedding.

    Args:
        item (Item): The item.
        theta (float): The prompted ability.
        truth (ItemParams): Ground-truth parameters of the item.
        rng (np.random.Generator): Random source.
        ability_blind (bool, optional): Sample at theta = 0 whatever the prompted ability. Defaults to False.

    Returns:
        str: The envelope text.
    """
    if truth.item_id != item.item_id:
        raise DomainError(f"truth parameters for {truth.item_id} used for item {item.item_id}")
    sampling_theta = 0.0 if ability_blind else theta
    score = int(sample_scores([sampling_theta], truth, rng)[0])
    return format_envelope(item.item_id, score, pseudo_embedding(item.item_id, theta, score))


def synthetic_oracle_score(text: str) -> int:
    return parse_envelope(text)[1]


def noisy_score(
    base: int, flip_prob: float, rng: np.random.Generator, num_categories: int
) -> int:
    """
    With probability flip_prob move the score one category up or down; a move that
    would leave 0..C-1 goes the other way instead.

    Args:
        base (int): The original score.
        flip_prob (float): Probability of moving the score, in [0, 1].
        rng (np.random.Generator): Random source.
        num_categories (int): Number of categories C.

    Returns:
        int: The possibly moved score.
    """
    if not 0.0 <= flip_prob <= 1.0:
        raise DomainError("flip_prob must lie in [0, 1]")
    if rng.random() >= flip_prob:
        return base
    step = 1 if rng.random() < 0.5 else -1
    moved = base + step
    if moved < 0 or moved >= num_categories:
        moved = base - step
    return min(max(moved, 0), num_categories - 1)


class SyntheticOracleGenerator(GeneratorBackend):
    def __init__(self, truth: Mapping[str, ItemParams], ability_blind: bool = False) -> None:
        self.truth = dict(truth)
        self.ability_blind = ability_blind

    def generate(
        self, item: Item, theta: float, decoding: DecodingConfig, rng: np.random.Generator
    ) -> str:
        if item.item_id not in self.truth:
            raise UnknownIdError(f"no ground-truth parameters for item {item.item_id}")
        return synthetic_oracle_generate(
            item, theta, self.truth[item.item_id], rng, self.ability_blind
        )


class SyntheticOracleScorer(ScorerBackend):
    def score(self, item: Item, response_text: str, rng: np.random.Generator) -> int:
        return synthetic_oracle_score(response_text)


class NoisyScorer(ScorerBackend):
    """
    Wraps a scorer and perturbs its scores with noisy_score.
    """

    def __init__(self, base: ScorerBackend, flip_prob: float) -> None:
        if not 0.0 <= flip_prob <= 1.0:
            raise DomainError("flip_prob must lie in [0, 1]")
        self.base = base
        self.flip_prob = flip_prob

    def score(self, item: Item, response_text: str, rng: np.random.Generator) -> int:
        base = self.base.score(item, response_text, rng)
        return noisy_score(base, self.flip_prob, rng, item.num_categories)


def _with_retries(action: Callable[[], T], plan: SimulationPlan, description: str) -> T:
    for attempt in range(plan.max_attempts):
        try:
            return action()
        except BackendError as e:
            if attempt + 1 == plan.max_attempts:
                raise
            delay = plan.backoff_seconds * 2**attempt
            logger.debug("%s failed (%s), retrying in %.2fs", description, e, delay)
            time.sleep(delay)
    raise AssertionError("unreachable")


def _run_cell(
    item: Item,
    ability_index: int,
    theta: float,
    plan: SimulationPlan,
    generator: GeneratorBackend,
    scorer: ScorerBackend,
) -> Optional[ScoredResponse]:
    rng = substream(plan.rng_seed, item.item_id, ability_index)
    description = f"cell ({item.item_id}, {ability_index})"
    try:
        text = _with_retries(
            lambda: generator.generate(item, theta, plan.decoding, rng), plan, description
        )
        score = _with_retries(lambda: scorer.score(item, text, rng), plan, description)
    except (BackendError, DomainError) as e:
        logger.debug("%s failed: %s", description, e)
        return None

    if not 0 <= score < item.num_categories:
        logger.debug("%s: score %s out of range", description, score)
        return None
    return ScoredResponse(
        item_id=item.item_id,
        student_id=assign_student_id(theta),
        text=text,
        score=int(score),
        prior_ability=float(theta),
    )


def run_simulation(
    items: Sequence[Item],
    abilities: Sequence[float],
    plan: SimulationPlan,
    generator: GeneratorBackend,
    scorer: ScorerBackend,
) -> List[ScoredResponse]:
    """
    Generate and score one response for every (item, ability) cell. Cells run
    concurrently (up to plan.max_workers); each cell draws from its own random
    substream, so the output does not depend on scheduling. Failed cells are
    excluded and counted.

    Args:
        items (list of Item): Items to simulate.
        abilities (list of float): Population abilities.
        plan (SimulationPlan): Simulation settings.
        generator (GeneratorBackend): Response generator.
        scorer (ScorerBackend): Response scorer.

    Returns:
        list of ScoredResponse: Responses sorted by item id, then ability index.

    Raises:
        SimulationAbortedError: If every cell of an item failed.
    """
    cells = [
        (item, ability_index, float(theta))
        for item in sorted(items, key=lambda item: item.item_id)
        for ability_index, theta in enumerate(abilities)
    ]
    logger.info(
        "Simulating %d items x %d abilities (%d workers)",
        len(items),
        len(abilities),
        plan.max_workers,
    )

    def run(cell: Tuple[Item, int, float]) -> Optional[ScoredResponse]:
        return _run_cell(cell[0], cell[1], cell[2], plan, generator, scorer)

    if plan.max_workers == 1:
        results = [run(cell) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=plan.max_workers) as executor:
            results = list(executor.map(run, cells))

    responses: List[ScoredResponse] = []
    failures: Dict[str, int] = {}
    for (item, _, _), result in zip(cells, results):
        if result is None:
            failures[item.item_id] = failures.get(item.item_id, 0) + 1
        else:
            responses.append(result)

    if failures:
        logger.warning(
            "%d of %d simulation cells failed and were excluded", sum(failures.values()), len(cells)
        )
    if abilities:
        aborted = [item_id for item_id, count in failures.items() if count == len(abilities)]
        if aborted:
            raise SimulationAbortedError(
                "every simulation cell failed for items: " + ", ".join(sorted(aborted))
            )
    return responses


def sample_calibration_data(
    n_students: int,
    n_items: int,
    num_categories: int = 3,
    rng_seed: int = 0,
    with_text: bool = True,
) -> Tuple[List[Item], Dict[str, ItemParams], List[AbilityRecord], List[ScoredResponse]]:
    """
    Synthetic calibration corpus drawn from a known GPCM: every student answers every
    item. Discriminations are uniform on [1, 2], difficulties and abilities standard
    normal, free steps normal with scale 0.5.

    Args:
        n_students (int): Number of students.
        n_items (int): Number of items.
        num_categories (int, optional): Score categories per item. Defaults to 3.
        rng_seed (int, optional): Random seed. Defaults to 0.
        with_text (bool, optional): Fill response texts with synthetic envelopes. Defaults to True.

    Returns:
        tuple: (items, truth params by item id, abilities, responses)
    """
    rng = np.random.default_rng(rng_seed)
    items = [
        Item(
            item_id=f"item_{index:03d}",
            question=f"Synthetic question {index}",
            num_categories=num_categories,
        )
        for index in range(n_items)
    ]
    truth = {
        item.item_id: ItemParams.from_free_steps(
            item.item_id,
            rng.uniform(1.0, 2.0),
            rng.normal(),
            rng.normal(scale=0.5, size=num_categories - 2),
        )
        for item in items
    }
    abilities = [
        AbilityRecord(student_id=f"stu_{index:05d}", theta=float(theta))
        for index, theta in enumerate(rng.normal(size=n_students))
    ]
    thetas = [record.theta for record in abilities]

    responses = []
    for item in items:
        scores = sample_scores(thetas, truth[item.item_id], rng)
        for record, score in zip(abilities, scores):
            text = ""
            if with_text:
                features = pseudo_embedding(item.item_id, record.theta, int(score))
                text = format_envelope(item.item_id, int(score), features)
            responses.append(
                ScoredResponse(
                    item_id=item.item_id,
                    student_id=record.student_id,
                    text=text,
                    score=int(score),
                    prior_ability=record.theta,
                )
            )
    return items, truth, abilities, responses
