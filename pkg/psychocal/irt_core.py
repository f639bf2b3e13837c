import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from torch import nn

from psychocal.errors import DegenerateItemError, DomainError, UndefinedMetricError, UnknownIdError
from psychocal.metrics import qwk

logger = logging.getLogger(__name__)

STEP_SUM_TOLERANCE = 1e-9
PERSISTENCE_DECIMALS = 9


class ItemParams(BaseModel):
    """
    GPCM parameters of one item. Step parameters are stored in full (d_0..d_{C-1});
    d_0 is always 0 and the steps sum to 0.
    """

    model_config = ConfigDict(frozen=True)

    item_id: str
    discrimination: float = 1.0
    difficulty: float = 0.0
    steps: Tuple[float, ...]
    num_categories: int

    @model_validator(mode="before")
    @classmethod
    def _default_num_categories(cls, data: Any) -> Any:
        if isinstance(data, dict) and "num_categories" not in data and "steps" in data:
            data = dict(data)
            data["num_categories"] = len(data["steps"])
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "ItemParams":
        if self.num_categories < 2:
            raise ValueError("an item needs at least 2 score categories")
        if len(self.steps) != self.num_categories:
            raise ValueError(
                f"expected {self.num_categories} step parameters, got {len(self.steps)}"
            )
        if self.steps[0] != 0.0:
            raise ValueError("the first step parameter must be exactly 0")
        if abs(math.fsum(self.steps)) > STEP_SUM_TOLERANCE:
            raise ValueError("step parameters must sum to 0")
        if not self.discrimination > 0:
            raise ValueError("discrimination must be positive")
        return self

    @classmethod
    def from_free_steps(
        cls,
        item_id: str,
        discrimination: float,
        difficulty: float,
        free_steps: Sequence[float],
    ) -> "ItemParams":
        """
        Build item parameters from the C-2 free step values. The first step is fixed
        to 0 and the last one absorbs the negative sum of the free steps.

        Args:
            item_id (str): The item identifier.
            discrimination (float): The discrimination a (> 0).
            difficulty (float): The difficulty b.
            free_steps (sequence of float): The free steps d_1..d_{C-2}.

        Returns:
            ItemParams: The item parameters.
        """
        free = [float(value) for value in free_steps]
        last = -math.fsum(free) + 0.0
        return cls(
            item_id=item_id,
            discrimination=float(discrimination),
            difficulty=float(difficulty),
            steps=tuple([0.0] + free + [last]),
        )

    @property
    def free_steps(self) -> Tuple[float, ...]:
        return self.steps[1 : self.num_categories - 1]


class AbilityRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    student_id: str
    theta: float

    @field_validator("theta")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("theta must be finite")
        return value


class ScoredResponse(BaseModel):
    """
    One scored response of a student to an item. prior_ability holds the ability
    the row was derived from, when there is one (prior estimates of real students,
    prompted abilities of simulated ones).
    """

    model_config = ConfigDict(frozen=True)

    item_id: str
    student_id: str
    text: str = ""
    score: int = Field(ge=0)
    prior_ability: Optional[float] = None


class FitConfig(BaseModel):
    epochs: int = Field(default=50, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    batch_size: int = Field(default=256, ge=1)
    holdout_fraction: float = Field(default=0.2, ge=0, lt=1)
    rng_seed: int = 0


class FitResult(BaseModel):
    item_params: Dict[str, ItemParams]
    abilities: Dict[str, AbilityRecord]
    holdout_qwk: Optional[float] = None
    final_loss: float
    loss_history: List[float] = Field(default_factory=list)

    def difficulties(self) -> Dict[str, float]:
        return {item_id: params.difficulty for item_id, params in self.item_params.items()}


AbilityMap = Mapping[str, Union[AbilityRecord, float]]


def _check_params(params: ItemParams) -> None:
    values = (params.discrimination, params.difficulty) + tuple(params.steps)
    if not all(math.isfinite(value) for value in values):
        raise DomainError(f"non-finite parameters for item {params.item_id}")


def _log_probability_matrix(thetas: np.ndarray, params: ItemParams) -> np.ndarray:
    """
    Log GPCM probabilities for a vector of abilities.

    Args:
        thetas (np.ndarray): Abilities, shape (n,).
        params (ItemParams): The item parameters.

    Returns:
        np.ndarray: Log probabilities, shape (n, C).
    """
    steps = np.asarray(params.steps, dtype=np.float64)
    cumulative = np.cumsum(thetas[:, None] - params.difficulty + steps[None, :], axis=1)
    logits = params.discrimination * cumulative
    logits = logits - logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def _probability_matrix(thetas: np.ndarray, params: ItemParams) -> np.ndarray:
    logits = np.asarray(thetas, dtype=np.float64)[:, None] - params.difficulty
    cumulative = np.cumsum(logits + np.asarray(params.steps)[None, :], axis=1)
    exponents = params.discrimination * cumulative
    exponents = exponents - exponents.max(axis=1, keepdims=True)
    weights = np.exp(exponents)
    return weights / weights.sum(axis=1, keepdims=True)


def score_probabilities(theta: float, params: ItemParams) -> np.ndarray:
    """
    Probability of every score category under the GPCM.

    Args:
        theta (float): The student ability.
        params (ItemParams): The item parameters.

    Returns:
        np.ndarray: P(y | theta) for y = 0..C-1.

    Raises:
        DomainError: If theta or any parameter is not finite.
    """
    if not math.isfinite(theta):
        raise DomainError("theta must be finite")
    _check_params(params)
    return _probability_matrix(np.array([float(theta)]), params)[0]


def expected_score(theta: float, params: ItemParams) -> float:
    probabilities = score_probabilities(theta, params)
    return float(np.dot(np.arange(params.num_categories), probabilities))


def predict_score(theta: float, params: ItemParams) -> int:
    """
    Most likely score category; ties go to the lowest category.
    """
    return int(np.argmax(score_probabilities(theta, params)))


def sample_scores(
    thetas: Sequence[float], params: ItemParams, rng: np.random.Generator
) -> np.ndarray:
    """
    Draw one score per ability from the GPCM.

    Args:
        thetas (sequence of float): The abilities.
        params (ItemParams): The item parameters.
        rng (np.random.Generator): Random source.

    Returns:
        np.ndarray: Integer scores in 0..C-1.
    """
    _check_params(params)
    probabilities = _probability_matrix(np.asarray(thetas, dtype=np.float64), params)
    cumulative = np.cumsum(probabilities, axis=1)
    draws = rng.random(len(probabilities))
    scores = (draws[:, None] >= cumulative).sum(axis=1)
    return np.minimum(scores, params.num_categories - 1)


def _theta_of(abilities: AbilityMap, student_id: str) -> float:
    if student_id not in abilities:
        raise UnknownIdError(f"unknown student id: {student_id}")
    value = abilities[student_id]
    return value.theta if isinstance(value, AbilityRecord) else float(value)


def _group_by_item(
    responses: Iterable[ScoredResponse],
    item_params: Mapping[str, ItemParams],
    abilities: AbilityMap,
) -> List[Tuple[ItemParams, List[str], np.ndarray, np.ndarray]]:
    grouped: Dict[str, Tuple[List[str], List[float], List[int]]] = {}
    for response in responses:
        if response.item_id not in item_params:
            raise UnknownIdError(f"unknown item id: {response.item_id}")
        params = item_params[response.item_id]
        if response.score >= params.num_categories:
            raise DomainError(
                f"score {response.score} out of range for item {response.item_id} "
                f"with {params.num_categories} categories"
            )
        students, thetas, scores = grouped.setdefault(response.item_id, ([], [], []))
        students.append(response.student_id)
        thetas.append(_theta_of(abilities, response.student_id))
        scores.append(response.score)

    groups = []
    for item_id, (students, thetas, scores) in grouped.items():
        params = item_params[item_id]
        _check_params(params)
        groups.append(
            (params, students, np.asarray(thetas, dtype=np.float64), np.asarray(scores))
        )
    return groups


def log_likelihood(
    responses: Sequence[ScoredResponse],
    item_params: Mapping[str, ItemParams],
    abilities: AbilityMap,
) -> float:
    """
    Log-likelihood of scored responses under the GPCM (the negated, summed cross-entropy).

    Args:
        responses (list of ScoredResponse): The scored responses.
        item_params (dict): Item parameters by item id.
        abilities (dict): AbilityRecords (or plain thetas) by student id.

    Returns:
        float: The summed log-likelihood (<= 0).

    Raises:
        UnknownIdError: If a response references an unknown item or student.
    """
    total = 0.0
    for params, _, thetas, scores in _group_by_item(responses, item_params, abilities):
        log_probabilities = _log_probability_matrix(thetas, params)
        total += float(log_probabilities[np.arange(len(scores)), scores].sum())
    return total


def log_likelihood_gradients(
    responses: Sequence[ScoredResponse],
    item_params: Mapping[str, ItemParams],
    abilities: AbilityMap,
) -> Dict[str, Dict[str, Any]]:
    """
    Closed-form gradients of log_likelihood with respect to the discrimination,
    the difficulty, the free step parameters (d_1..d_{C-2}, with d_{C-1} = -sum)
    and the abilities.

    Args:
        responses (list of ScoredResponse): The scored responses.
        item_params (dict): Item parameters by item id.
        abilities (dict): AbilityRecords (or plain thetas) by student id.

    Returns:
        dict: {"a": {item: float}, "b": {item: float}, "steps": {item: np.ndarray}, "theta": {student: float}}
    """
    gradients: Dict[str, Dict[str, Any]] = {"a": {}, "b": {}, "steps": {}, "theta": {}}
    theta_gradients: Dict[str, float] = defaultdict(float)

    for params, students, thetas, scores in _group_by_item(responses, item_params, abilities):
        num_categories = params.num_categories
        a = params.discrimination
        steps = np.asarray(params.steps, dtype=np.float64)
        cumulative = np.cumsum(thetas[:, None] - params.difficulty + steps[None, :], axis=1)
        probabilities = _probability_matrix(thetas, params)

        # d log P_y / d z_k = [k == y] - P_k
        residual = np.eye(num_categories)[scores] - probabilities
        slopes = np.arange(1, num_categories + 1, dtype=np.float64)
        per_response_theta = a * (residual @ slopes)
        tail = np.cumsum(residual[:, ::-1], axis=1)[:, ::-1]
        free = tail[:, 1 : num_categories - 1] - residual[:, [num_categories - 1]]

        gradients["a"][params.item_id] = float((residual * cumulative).sum())
        gradients["b"][params.item_id] = float(-per_response_theta.sum())
        gradients["steps"][params.item_id] = a * free.sum(axis=0)
        for student_id, value in zip(students, per_response_theta):
            theta_gradients[student_id] += float(value)

    gradients["theta"] = dict(theta_gradients)
    return gradients


class GPCMModule(nn.Module):
    """
    Torch GPCM over a fixed set of items and students. Discriminations are stored as
    log a; every item keeps C-2 free steps, with d_0 = 0 and d_{C-1} = -sum(free).
    Items with fewer categories than the widest item are masked.

    Args:
        num_categories (sequence of int): Number of score categories per item.
        num_students (int): Number of students.
    """

    def __init__(self, num_categories: Sequence[int], num_students: int) -> None:
        super().__init__()
        categories = torch.tensor(list(num_categories), dtype=torch.long)
        self.max_categories = int(categories.max())
        num_items = len(categories)
        num_free = max(self.max_categories - 2, 0)

        self.log_discrimination = nn.Parameter(torch.zeros(num_items, dtype=torch.float64))
        self.difficulty = nn.Parameter(torch.zeros(num_items, dtype=torch.float64))
        self.free_steps = nn.Parameter(torch.zeros(num_items, num_free, dtype=torch.float64))
        self.theta = nn.Parameter(torch.zeros(num_students, dtype=torch.float64))

        self.register_buffer(
            "free_mask",
            (torch.arange(num_free)[None, :] < (categories[:, None] - 2)).to(torch.float64),
        )
        self.register_buffer(
            "last_step", F.one_hot(categories - 1, self.max_categories).to(torch.float64)
        )
        self.register_buffer(
            "category_mask", torch.arange(self.max_categories)[None, :] < categories[:, None]
        )

    def steps(self) -> torch.Tensor:
        free = self.free_steps * self.free_mask
        zeros = free.new_zeros(free.shape[0], 1)
        steps = torch.cat([zeros, free, zeros], dim=1)
        return steps - self.last_step * free.sum(dim=1, keepdim=True)

    def forward(self, item_index: torch.Tensor, student_index: torch.Tensor) -> torch.Tensor:
        discrimination = self.log_discrimination[item_index].exp()
        cumulative = torch.cumsum(
            self.theta[student_index, None]
            - self.difficulty[item_index, None]
            + self.steps()[item_index],
            dim=1,
        )
        logits = discrimination[:, None] * cumulative
        return logits.masked_fill(~self.category_mask[item_index], float("-inf"))


def _validate_fit_input(
    responses: Sequence[ScoredResponse], num_categories_per_item: Mapping[str, int]
) -> None:
    observed: Dict[str, set] = defaultdict(set)
    for response in responses:
        if response.item_id not in num_categories_per_item:
            raise UnknownIdError(f"no category count for item {response.item_id}")
        if response.score >= num_categories_per_item[response.item_id]:
            raise DomainError(
                f"score {response.score} out of range for item {response.item_id}"
            )
        observed[response.item_id].add(response.score)

    degenerate = [item_id for item_id, scores in observed.items() if len(scores) < 2]
    if degenerate:
        raise DegenerateItemError(degenerate)


def _apply_warm_start(
    model: GPCMModule,
    warm_start: FitResult,
    item_ids: Sequence[str],
    student_ids: Sequence[str],
    num_categories: Sequence[int],
) -> None:
    with torch.no_grad():
        for index, item_id in enumerate(item_ids):
            params = warm_start.item_params.get(item_id)
            if params is None:
                continue
            if params.num_categories != num_categories[index]:
                raise DomainError(
                    f"warm start for item {item_id} has {params.num_categories} categories, "
                    f"expected {num_categories[index]}"
                )
            model.log_discrimination[index] = math.log(params.discrimination)
            model.difficulty[index] = params.difficulty
            free = params.free_steps
            if free:
                model.free_steps[index, : len(free)] = torch.tensor(free, dtype=torch.float64)
        for index, student_id in enumerate(student_ids):
            record = warm_start.abilities.get(student_id)
            if record is not None:
                model.theta[index] = record.theta


def _extract_result(
    model: GPCMModule,
    item_ids: Sequence[str],
    student_ids: Sequence[str],
    num_categories: Sequence[int],
    holdout_qwk: Optional[float],
    final_loss: float,
    loss_history: List[float],
) -> FitResult:
    with torch.no_grad():
        discrimination = model.log_discrimination.exp().tolist()
        difficulty = model.difficulty.tolist()
        free_steps = model.free_steps.tolist()
        thetas = model.theta.tolist()

    item_params = {
        item_id: ItemParams.from_free_steps(
            item_id,
            discrimination[index],
            difficulty[index],
            free_steps[index][: num_categories[index] - 2],
        )
        for index, item_id in enumerate(item_ids)
    }
    abilities = {
        student_id: AbilityRecord(student_id=student_id, theta=thetas[index])
        for index, student_id in enumerate(student_ids)
    }
    return FitResult(
        item_params=item_params,
        abilities=abilities,
        holdout_qwk=holdout_qwk,
        final_loss=final_loss,
        loss_history=loss_history,
    )


def fit(
    responses: Sequence[ScoredResponse],
    num_categories_per_item: Mapping[str, int],
    config: Optional[FitConfig] = None,
    warm_start: Optional[FitResult] = None,
) -> FitResult:
    """
    Fit GPCM item parameters and student abilities by mini-batch AdamW on the mean
    cross-entropy of the observed scores. No priors are placed on any parameter.
    A random holdout fraction of the responses is kept out of training and used to
    report the QWK between the most likely predicted and the observed scores.

    Args:
        responses (list of ScoredResponse): The scored responses.
        num_categories_per_item (dict): Number of score categories C per item id.
        config (FitConfig, optional): Optimisation settings. Defaults to FitConfig().
        warm_start (FitResult, optional): Initial values for known items and students; unknown ones start at a=1, b=0, d=0, theta=0. Defaults to None.

    Returns:
        FitResult: Fitted parameters, holdout QWK and loss curve.

    Raises:
        DegenerateItemError: If an item has a single observed score category.
        DomainError: If there is nothing to fit or a score is out of range.
    """
    config = config or FitConfig()
    responses = list(responses)
    if not responses:
        raise DomainError("no responses to fit")
    _validate_fit_input(responses, num_categories_per_item)

    item_ids = sorted({response.item_id for response in responses})
    student_ids = sorted({response.student_id for response in responses})
    item_lookup = {item_id: index for index, item_id in enumerate(item_ids)}
    student_lookup = {student_id: index for index, student_id in enumerate(student_ids)}
    num_categories = [int(num_categories_per_item[item_id]) for item_id in item_ids]

    item_index = torch.tensor([item_lookup[r.item_id] for r in responses], dtype=torch.long)
    student_index = torch.tensor(
        [student_lookup[r.student_id] for r in responses], dtype=torch.long
    )
    scores = torch.tensor([r.score for r in responses], dtype=torch.long)

    generator = torch.Generator().manual_seed(config.rng_seed)
    order = torch.randperm(len(responses), generator=generator)
    num_holdout = int(len(responses) * config.holdout_fraction)
    holdout, train = order[:num_holdout], order[num_holdout:]

    model = GPCMModule(num_categories, len(student_ids))
    if warm_start is not None:
        _apply_warm_start(model, warm_start, item_ids, student_ids, num_categories)

    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
        foreach=False,
    )

    logger.info(
        "Fitting GPCM: %d responses (%d held out), %d items, %d students, %d epochs",
        len(responses),
        num_holdout,
        len(item_ids),
        len(student_ids),
        config.epochs,
    )

    loss_history: List[float] = []
    for epoch in range(config.epochs):
        permutation = train[torch.randperm(len(train), generator=generator)]
        epoch_loss = 0.0
        for start in range(0, len(permutation), config.batch_size):
            batch = permutation[start : start + config.batch_size]
            optimizer.zero_grad()
            logits = model(item_index[batch], student_index[batch])
            loss = F.cross_entropy(logits, scores[batch])
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
        loss_history.append(epoch_loss / len(permutation))
        logger.debug("epoch %d: loss %.6f", epoch + 1, loss_history[-1])

    with torch.no_grad():
        final_loss = F.cross_entropy(
            model(item_index[train], student_index[train]), scores[train]
        ).item()

        holdout_qwk = None
        if num_holdout > 0:
            predicted = model(item_index[holdout], student_index[holdout]).argmax(dim=1)
            try:
                holdout_qwk = qwk(
                    scores[holdout].tolist(), predicted.tolist(), max(num_categories)
                )
            except UndefinedMetricError:
                logger.warning("Holdout QWK is undefined for this split")

    logger.info(
        "Fit finished: final loss %.6f, holdout QWK %s",
        final_loss,
        "n/a" if holdout_qwk is None else f"{holdout_qwk:.4f}",
    )
    return _extract_result(
        model, item_ids, student_ids, num_categories, holdout_qwk, final_loss, loss_history
    )


def _fixed(value: float) -> float:
    # + 0.0 turns -0.0 into 0.0
    return round(float(value), PERSISTENCE_DECIMALS) + 0.0


def fit_result_to_dict(result: FitResult, meta: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    items = [
        {
            "item_id": item_id,
            "a": _fixed(params.discrimination),
            "b": _fixed(params.difficulty),
            "d": [_fixed(step) for step in params.steps],
        }
        for item_id, params in sorted(result.item_params.items())
    ]
    students = [
        {"student_id": student_id, "theta": _fixed(record.theta)}
        for student_id, record in sorted(result.abilities.items())
    ]
    document_meta = dict(meta or {})
    document_meta["final_loss"] = _fixed(result.final_loss)
    document_meta["holdout_qwk"] = (
        None if result.holdout_qwk is None else _fixed(result.holdout_qwk)
    )
    return {"items": items, "students": students, "meta": document_meta}


def save_fit_result(
    result: FitResult, path: Union[str, Path], meta: Optional[Mapping[str, Any]] = None
) -> None:
    """
    Write fitted parameters as a JSON document with sorted keys and values rounded
    to 9 decimals, so reruns produce identical files.

    Args:
        result (FitResult): The fit to persist.
        path (str | Path): Destination file.
        meta (dict, optional): Extra metadata (seed, epochs, ...). Defaults to None.

    Returns:
        None
    """
    with open(path, "w", encoding="utf-8") as params_file:
        json.dump(fit_result_to_dict(result, meta), params_file, indent=2, sort_keys=True)
        params_file.write("\n")


def fit_result_from_dict(document: Mapping[str, Any]) -> FitResult:
    item_params = {}
    for item in document["items"]:
        steps = item["d"]
        item_params[item["item_id"]] = ItemParams.from_free_steps(
            item["item_id"], item["a"], item["b"], steps[1 : len(steps) - 1]
        )
    abilities = {
        student["student_id"]: AbilityRecord(
            student_id=student["student_id"], theta=student["theta"]
        )
        for student in document.get("students", [])
    }
    meta = document.get("meta", {})
    return FitResult(
        item_params=item_params,
        abilities=abilities,
        holdout_qwk=meta.get("holdout_qwk"),
        final_loss=meta.get("final_loss", float("nan")),
    )


def load_fit_result(path: Union[str, Path]) -> FitResult:
    with open(path, "r", encoding="utf-8") as params_file:
        return fit_result_from_dict(json.load(params_file))
