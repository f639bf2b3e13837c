import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from psychocal.difficulty_pipeline import EmbeddingRecord
from psychocal.errors import DomainError, SchemaError
from psychocal.irt_core import ScoredResponse
from psychocal.sim_engine import Item, assign_student_id

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Dataset(BaseModel):
    items: List[Item]
    responses: List[ScoredResponse] = Field(default_factory=list)
    embeddings: Optional[List[EmbeddingRecord]] = None

    @model_validator(mode="after")
    def _check_references(self) -> "Dataset":
        categories = {item.item_id: item.num_categories for item in self.items}
        if len(categories) != len(self.items):
            raise ValueError("item ids must be unique")
        for response in self.responses:
            if response.item_id not in categories:
                raise ValueError(f"response references unknown item {response.item_id}")
            if response.score >= categories[response.item_id]:
                raise ValueError(
                    f"score {response.score} out of range for item {response.item_id}"
                )
        return self

    def num_categories(self) -> Dict[str, int]:
        return {item.item_id: item.num_categories for item in self.items}


class FoldSpec(BaseModel):
    fold_index: int = Field(ge=0)
    train_ids: List[str]
    val_ids: List[str]
    test_ids: List[str]

    @model_validator(mode="after")
    def _check_disjoint(self) -> "FoldSpec":
        seen = set()
        for ids in (self.train_ids, self.val_ids, self.test_ids):
            overlap = seen.intersection(ids)
            if overlap or len(set(ids)) != len(ids):
                raise ValueError(f"fold {self.fold_index} splits overlap: {sorted(overlap)}")
            seen.update(ids)
        return self


class FoldConfig(BaseModel):
    n_folds: int = Field(default=5, ge=1)
    n_buckets: int = Field(default=10, ge=1)
    sizes: Tuple[int, int, int] = (29, 10, 10)
    rng_seed: int = 0


def read_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """
    Iterate over the objects of a UTF-8 JSON-lines file, skipping blank lines.

    Args:
        path (str | Path): The file to read.

    Yields:
        tuple: (1-based line number, parsed object)

    Raises:
        SchemaError: If a line is not a JSON object.
    """
    with open(path, "r", encoding="utf-8") as jsonl_file:
        for line_no, line in enumerate(jsonl_file, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{line_no}: invalid JSON ({e.msg})") from None
            if not isinstance(row, dict):
                raise SchemaError(f"{path}:{line_no}: expected a JSON object")
            yield line_no, row


def write_jsonl(path: PathLike, rows: Iterable[Mapping[str, Any]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as jsonl_file:
        for row in rows:
            jsonl_file.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
            count += 1
    return count


def _schema_error(path: PathLike, line_no: int, error: ValidationError) -> SchemaError:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "<row>"
    return SchemaError(f"{path}:{line_no}: field '{field}': {first['msg']}")


def student_id_from_prior_ability(prior_theta: float) -> str:
    """
    Identifier of a student known only by a prior ability estimate: the ability
    rounded to one decimal, with the same rule as simulated students ("stu_0.7").
    """
    return assign_student_id(prior_theta, prefix="stu")


def read_items(path: PathLike) -> List[Item]:
    items = []
    for line_no, row in read_jsonl(path):
        try:
            items.append(Item(**row))
        except ValidationError as e:
            raise _schema_error(path, line_no, e) from None
    return items


def read_responses(path: PathLike, categories: Optional[Mapping[str, int]] = None) -> List[ScoredResponse]:
    """
    Read scored responses. Rows without a student_id are attributed to the student
    derived from their prior_ability.

    Args:
        path (str | Path): responses.jsonl
        categories (dict, optional): Category counts by item id; when given, rows must cite a known item and an in-range score. Defaults to None.

    Returns:
        list of ScoredResponse: The responses in file order, duplicates included.

    Raises:
        SchemaError: If a row violates the schema.
    """
    responses = []
    for line_no, row in read_jsonl(path):
        row = dict(row)
        if row.get("student_id") is None:
            prior = row.get("prior_ability")
            if prior is None:
                raise SchemaError(
                    f"{path}:{line_no}: field 'student_id': required when prior_ability is absent"
                )
            try:
                row["student_id"] = student_id_from_prior_ability(float(prior))
            except (TypeError, ValueError):
                raise SchemaError(
                    f"{path}:{line_no}: field 'prior_ability': not a finite number"
                ) from None
        try:
            response = ScoredResponse(**row)
        except ValidationError as e:
            raise _schema_error(path, line_no, e) from None

        if categories is not None:
            if response.item_id not in categories:
                raise SchemaError(
                    f"{path}:{line_no}: field 'item_id': unknown item {response.item_id}"
                )
            if response.score >= categories[response.item_id]:
                raise SchemaError(
                    f"{path}:{line_no}: field 'score': {response.score} out of range for "
                    f"{categories[response.item_id]} categories"
                )
        responses.append(response)
    return responses


def read_embeddings(path: PathLike) -> List[EmbeddingRecord]:
    """
    Read {"item_id", "vector"} rows. All vectors must share one dimension.
    """
    records = []
    for line_no, row in read_jsonl(path):
        try:
            record = EmbeddingRecord(**row)
        except ValidationError as e:
            raise _schema_error(path, line_no, e) from None
        if records and len(record.vector) != len(records[0].vector):
            raise SchemaError(
                f"{path}:{line_no}: field 'vector': dimension {len(record.vector)}, "
                f"expected {len(records[0].vector)}"
            )
        records.append(record)
    return records


def write_embeddings(path: PathLike, records: Sequence[EmbeddingRecord]) -> int:
    return write_jsonl(
        path, ({"item_id": record.item_id, "vector": list(record.vector)} for record in records)
    )


def load_dataset(
    items_path: PathLike, responses_path: PathLike, embeddings_path: Optional[PathLike] = None
) -> Dataset:
    """
    Load and validate a dataset.

    Args:
        items_path (str | Path): items.jsonl
        responses_path (str | Path): responses.jsonl
        embeddings_path (str | Path, optional): embeddings.jsonl. Defaults to None.

    Returns:
        Dataset: The validated dataset.

    Raises:
        SchemaError: If a file violates its schema; the message names file, line and field.
    """
    items = read_items(items_path)
    categories = {item.item_id: item.num_categories for item in items}
    if len(categories) != len(items):
        raise SchemaError(f"{items_path}: field 'item_id': duplicate item ids")
    responses = read_responses(responses_path, categories)
    embeddings = read_embeddings(embeddings_path) if embeddings_path is not None else None

    logger.info(
        "Loaded %d items and %d responses from %s", len(items), len(responses), responses_path
    )
    return Dataset(items=items, responses=responses, embeddings=embeddings)


def response_to_row(response: ScoredResponse) -> Dict[str, Any]:
    row = response.model_dump()
    if row["prior_ability"] is None:
        del row["prior_ability"]
    return row


def save_dataset(
    dataset: Dataset,
    items_path: PathLike,
    responses_path: PathLike,
    embeddings_path: Optional[PathLike] = None,
) -> None:
    write_jsonl(items_path, (item.model_dump() for item in dataset.items))
    write_jsonl(responses_path, (response_to_row(response) for response in dataset.responses))
    if embeddings_path is not None and dataset.embeddings is not None:
        write_embeddings(embeddings_path, dataset.embeddings)


def difficulty_buckets(item_difficulties: Mapping[str, float], n_buckets: int) -> List[List[str]]:
    """
    Sort items by difficulty (ties by id) and cut them into n_buckets contiguous
    buckets; when the count does not divide evenly, earlier buckets take one extra item.
    """
    if n_buckets < 1:
        raise DomainError("n_buckets must be at least 1")
    ordered = sorted(item_difficulties, key=lambda item_id: (item_difficulties[item_id], item_id))
    size, extra = divmod(len(ordered), n_buckets)
    buckets = []
    start = 0
    for index in range(n_buckets):
        end = start + size + (1 if index < extra else 0)
        buckets.append(ordered[start:end])
        start = end
    return buckets


def striped_order(
    item_difficulties: Mapping[str, float], n_buckets: int, rng_seed: int = 0
) -> List[str]:
    """
    The difficulty-striped item list: items are drawn round-robin, one seeded-random
    item per difficulty bucket per round, until every bucket is exhausted.
    """
    rng = np.random.default_rng(rng_seed)
    pools = [
        [bucket[index] for index in rng.permutation(len(bucket))]
        for bucket in difficulty_buckets(item_difficulties, n_buckets)
    ]
    order = []
    for round_index in range(max((len(pool) for pool in pools), default=0)):
        for pool in pools:
            if round_index < len(pool):
                order.append(pool[round_index])
    return order


def make_folds(
    item_difficulties: Mapping[str, float],
    n_folds: int,
    n_buckets: int,
    sizes: Tuple[int, int, int],
    rng_seed: int = 0,
) -> List[FoldSpec]:
    """
    Build cross-validation folds whose splits are balanced in difficulty. The
    striped item list is rotated by round(f * N / n_folds) for fold f and cut at
    train and train + val.

    Args:
        item_difficulties (dict): Difficulty by item id.
        n_folds (int): Number of folds.
        n_buckets (int): Number of difficulty buckets.
        sizes (tuple of int): (train, val, test) item counts.
        rng_seed (int, optional): Seed of the within-bucket shuffles. Defaults to 0.

    Returns:
        list of FoldSpec: One entry per fold.

    Raises:
        DomainError: If the sizes do not add up to the item count.
    """
    n_train, n_val, n_test = sizes
    count = len(item_difficulties)
    if min(sizes) < 0 or n_train + n_val + n_test != count:
        raise DomainError(f"split sizes {tuple(sizes)} do not add up to {count} items")
    if n_folds < 1:
        raise DomainError("n_folds must be at least 1")

    order = striped_order(item_difficulties, n_buckets, rng_seed)
    folds = []
    for fold_index in range(n_folds):
        offset = int(round(fold_index * count / n_folds)) % count if count else 0
        rotated = order[offset:] + order[:offset]
        folds.append(
            FoldSpec(
                fold_index=fold_index,
                train_ids=rotated[:n_train],
                val_ids=rotated[n_train : n_train + n_val],
                test_ids=rotated[n_train + n_val :],
            )
        )
    return folds


def save_folds(folds: Sequence[FoldSpec], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as folds_file:
        json.dump([fold.model_dump() for fold in folds], folds_file, indent=2, sort_keys=True)
        folds_file.write("\n")


def load_folds(path: PathLike) -> List[FoldSpec]:
    with open(path, "r", encoding="utf-8") as folds_file:
        document = json.load(folds_file)
    try:
        return [FoldSpec(**fold) for fold in document]
    except (TypeError, ValidationError) as e:
        raise SchemaError(f"{path}: invalid folds file ({e})") from None
