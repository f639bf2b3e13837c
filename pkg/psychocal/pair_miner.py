import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from psychocal.dataio import read_jsonl, write_jsonl
from psychocal.errors import DomainError, UnknownIdError
from psychocal.irt_core import FitResult, ItemParams, ScoredResponse, score_probabilities
from psychocal.prompts import PromptTemplate, format_ability
from psychocal.sim_engine import Item, substream

logger = logging.getLogger(__name__)

PROMPT_FIELDS = {"passage", "question", "ability"}


class PreferencePair(BaseModel):
    item_id: str
    student_id: str
    theta: float
    winner_text: str
    loser_text: str
    winner_prob: float
    loser_prob: float


class MiningConfig(BaseModel):
    epsilon: float = Field(default=0.1, ge=0, lt=1)
    negatives_per_response: int = Field(default=3, ge=1)
    rng_seed: int = 0
    train_fraction: float = Field(default=0.2, gt=0, le=1)


def negative_candidates(
    target: ScoredResponse,
    pool: Sequence[ScoredResponse],
    params: ItemParams,
    theta: float,
    epsilon: float,
) -> List[ScoredResponse]:
    """
    Responses of the pool whose score is less likely than the target's score, for
    the target student's ability, by strictly more than epsilon.

    Args:
        target (ScoredResponse): The ground-truth response of the student.
        pool (list of ScoredResponse): Responses to the same item.
        params (ItemParams): Parameters of the item.
        theta (float): Ability of the target student.
        epsilon (float): Probability margin.

    Returns:
        list of ScoredResponse: Candidates in pool order (possibly empty).

    Raises:
        DomainError: If the pool or the parameters belong to another item.
    """
    if params.item_id != target.item_id:
        raise DomainError(
            f"parameters of item {params.item_id} used for a response to {target.item_id}"
        )
    for response in pool:
        if response.item_id != target.item_id:
            raise DomainError(
                f"pool response to {response.item_id} mixed into pool of {target.item_id}"
            )
        if response.score >= params.num_categories:
            raise DomainError(f"score {response.score} out of range for item {params.item_id}")

    probabilities = score_probabilities(theta, params)
    target_prob = probabilities[target.score]
    return [
        response for response in pool if target_prob - probabilities[response.score] > epsilon
    ]


def _mine_item(
    item_id: str,
    targets: Sequence[ScoredResponse],
    pool: Sequence[ScoredResponse],
    fit: FitResult,
    config: MiningConfig,
) -> List[PreferencePair]:
    if item_id not in fit.item_params:
        raise UnknownIdError(f"unknown item id: {item_id}")
    params = fit.item_params[item_id]
    rng = substream(config.rng_seed, "mine", item_id)

    pairs = []
    # merged student ids share one budget of m pairs per item
    budget: Dict[str, int] = {}
    for target in targets:
        if target.student_id not in fit.abilities:
            raise UnknownIdError(f"unknown student id: {target.student_id}")
        remaining = budget.get(target.student_id, config.negatives_per_response)
        if remaining == 0:
            continue
        theta = fit.abilities[target.student_id].theta
        candidates = negative_candidates(target, pool, params, theta, config.epsilon)
        count = min(remaining, len(candidates))
        if count == 0:
            continue
        budget[target.student_id] = remaining - count

        probabilities = score_probabilities(theta, params)
        chosen = rng.choice(len(candidates), size=count, replace=False)
        for index in chosen:
            loser = candidates[int(index)]
            pairs.append(
                PreferencePair(
                    item_id=item_id,
                    student_id=target.student_id,
                    theta=theta,
                    winner_text=target.text,
                    loser_text=loser.text,
                    winner_prob=float(probabilities[target.score]),
                    loser_prob=float(probabilities[loser.score]),
                )
            )
    return pairs


def mine(
    dataset: Sequence[ScoredResponse], fit: FitResult, config: MiningConfig
) -> List[PreferencePair]:
    """
    Build preference pairs from real scored responses. A seeded random train_fraction
    of the responses is selected; for each, up to m negatives are sampled without
    replacement from the responses to the same item that the fitted model finds
    less likely by more than epsilon, and every sampled negative yields one pair
    preferring the student's own response. Responses sharing a student id share one
    budget of m pairs per item.

    Args:
        dataset (list of ScoredResponse): Ground-truth scored responses.
        fit (FitResult): Fitted IRT model covering all items and students.
        config (MiningConfig): Mining settings.

    Returns:
        list of PreferencePair: Pairs grouped by item id (sorted), then by dataset order.
    """
    responses = list(dataset)
    num_selected = int(round(config.train_fraction * len(responses)))
    selection_rng = np.random.default_rng(config.rng_seed)
    selected = sorted(selection_rng.permutation(len(responses))[:num_selected].tolist())

    pools: Dict[str, List[ScoredResponse]] = {}
    for response in responses:
        pools.setdefault(response.item_id, []).append(response)
    targets: Dict[str, List[ScoredResponse]] = {}
    for index in selected:
        targets.setdefault(responses[index].item_id, []).append(responses[index])

    pairs: List[PreferencePair] = []
    for item_id in sorted(targets):
        pairs.extend(_mine_item(item_id, targets[item_id], pools[item_id], fit, config))

    logger.info(
        "Mined %d preference pairs from %d of %d responses",
        len(pairs),
        num_selected,
        len(responses),
    )
    return pairs


def export_pairs(
    pairs: Sequence[PreferencePair],
    template: PromptTemplate,
    path: Union[str, Path],
    items: Mapping[str, Item],
) -> int:
    """
    Write pairs as DPO-ready JSONL rows {"prompt", "chosen", "rejected"}, plus the
    pair metadata (item_id, student_id, theta, chosen_prob, rejected_prob). The
    prompt renders {passage}, {question} and {ability} (4 decimal places).

    Args:
        pairs (list of PreferencePair): Pairs to export.
        template (PromptTemplate): Simulated-student prompt.
        path (str | Path): Output JSONL file.
        items (dict): Items by id, for passage and question text.

    Returns:
        int: Number of rows written.
    """
    template.check_placeholders(PROMPT_FIELDS)
    rows = []
    for pair in pairs:
        if pair.item_id not in items:
            raise UnknownIdError(f"unknown item id: {pair.item_id}")
        item = items[pair.item_id]
        rows.append(
            {
                "prompt": template.format(
                    passage=item.passage,
                    question=item.question,
                    ability=format_ability(pair.theta),
                ),
                "chosen": pair.winner_text,
                "rejected": pair.loser_text,
                "item_id": pair.item_id,
                "student_id": pair.student_id,
                "theta": pair.theta,
                "chosen_prob": pair.winner_prob,
                "rejected_prob": pair.loser_prob,
            }
        )
    return write_jsonl(path, rows)


def read_pairs(path: Union[str, Path]) -> List[PreferencePair]:
    return [
        PreferencePair(
            item_id=row["item_id"],
            student_id=row["student_id"],
            theta=row["theta"],
            winner_text=row["chosen"],
            loser_text=row["rejected"],
            winner_prob=row["chosen_prob"],
            loser_prob=row["rejected_prob"],
        )
        for _, row in read_jsonl(path)
    ]
