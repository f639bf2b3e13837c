import argparse
import hashlib
import json
import logging
import shlex
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import yaml
from pydantic import BaseModel, ValidationError

from psychocal.backends import build_backends
from psychocal.config import RunConfig, stage_seed
from psychocal.dataio import (
    Dataset,
    load_dataset,
    load_folds,
    make_folds,
    read_embeddings,
    read_items,
    read_responses,
    response_to_row,
    save_dataset,
    save_folds,
    write_jsonl,
)
from psychocal.difficulty_pipeline import (
    knn_baseline,
    predict_difficulties,
    read_predictions_csv,
    write_predictions_csv,
)
from psychocal.errors import BackendError, DomainError, UnknownIdError
from psychocal.irt_core import FitResult, fit, load_fit_result, save_fit_result
from psychocal.metrics import evaluate, save_report
from psychocal.pair_miner import export_pairs, mine
from psychocal.prompts import PromptTemplate
from psychocal.run_logging import configure_logging, setup_log
from psychocal.sim_engine import (
    SimulationPlan,
    parse_envelope,
    run_simulation,
    sample_calibration_data,
    sample_population,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ENVIRONMENT = 1
EXIT_DOMAIN = 2


class _UsageError(Exception):
    """Inconsistent options detected after parsing."""


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with status 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_ENVIRONMENT, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as input_file:
        for chunk in iter(lambda: input_file.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _rounded(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(float(value), 9) + 0.0


def _write_json(path: Path, document: Any) -> None:
    with open(path, "w", encoding="utf-8") as json_file:
        json.dump(document, json_file, indent=2, sort_keys=True)
        json_file.write("\n")


def _write_manifest(
    out: Path,
    command: str,
    config: RunConfig,
    inputs: Mapping[str, Optional[Path]],
    options: Mapping[str, Any],
) -> None:
    _write_json(
        out / "manifest.json",
        {
            "command": command,
            "config": config.model_dump(mode="json"),
            "options": dict(options),
            "inputs": {
                name: {"sha256": _sha256(path)}
                for name, path in sorted(inputs.items())
                if path is not None
            },
        },
    )


def _override(model: BaseModel, **updates: Any) -> BaseModel:
    """Copy of a config model with the non-None updates applied and validated."""
    values = model.model_dump()
    values.update({key: value for key, value in updates.items() if value is not None})
    return type(model)(**values)


def _split_ids(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [item_id.strip() for item_id in value.split(",") if item_id.strip()]


def _fold_test_ids(args: argparse.Namespace) -> Optional[List[str]]:
    if getattr(args, "folds", None) is None:
        return _split_ids(getattr(args, "test_items", None))
    folds = load_folds(args.folds)
    if not 0 <= args.fold < len(folds):
        raise DomainError(f"fold {args.fold} does not exist ({len(folds)} folds)")
    return list(folds[args.fold].test_ids)


def fit_irt(args: argparse.Namespace, config: RunConfig, out: Path) -> None:
    fit_config = _override(config.fit, epochs=args.epochs, learning_rate=args.learning_rate)
    config = config.model_copy(update={"fit": fit_config})

    dataset = load_dataset(args.items, args.responses)
    result = fit(dataset.responses, dataset.num_categories(), fit_config)

    save_fit_result(
        result,
        out / "params.json",
        meta={"rng_seed": fit_config.rng_seed, "epochs": fit_config.epochs},
    )
    _write_json(
        out / "fit_report.json",
        {
            "final_loss": _rounded(result.final_loss),
            "holdout_qwk": _rounded(result.holdout_qwk),
            "loss_history": [_rounded(loss) for loss in result.loss_history],
        },
    )
    _write_manifest(
        out, "fit-irt", config, {"items": args.items, "responses": args.responses}, {}
    )


def mine_pairs(args: argparse.Namespace, config: RunConfig, out: Path) -> None:
    mining = _override(
        config.mining,
        epsilon=args.epsilon,
        negatives_per_response=args.m,
        train_fraction=args.train_fraction,
    )
    config = config.model_copy(update={"mining": mining})

    fit_result = load_fit_result(args.params)
    items = read_items(args.items)
    responses = read_responses(args.responses, {item.item_id: item.num_categories for item in items})
    template = (
        PromptTemplate.from_file(args.prompt) if args.prompt else PromptTemplate.packaged("student")
    )

    pairs = mine(responses, fit_result, mining)
    export_pairs(pairs, template, out / "pairs.jsonl", {item.item_id: item for item in items})
    _write_manifest(
        out,
        "mine-pairs",
        config,
        {"items": args.items, "responses": args.responses, "params": args.params, "prompt": args.prompt},
        {},
    )


def _load_plan(args: argparse.Namespace, config: RunConfig) -> SimulationPlan:
    if args.plan is None:
        plan = config.simulation
    else:
        with open(args.plan, "r", encoding="utf-8") as plan_file:
            document = dict(yaml.safe_load(plan_file) or {})
        document.setdefault("rng_seed", stage_seed(config.rng_seed, "simulate"))
        plan = SimulationPlan(**document)

    generator = plan.generator.model_dump()
    scorer = plan.scorer.model_dump()
    if args.backend is not None:
        connection = {
            "kind": args.backend,
            "command": shlex.split(args.backend_command) if args.backend_command else None,
            "url": args.backend_url,
            "model": args.model,
            "base_url": args.base_url,
        }
        generator.update(connection)
        scorer.update(connection)
    if args.flip_prob is not None:
        scorer["flip_prob"] = args.flip_prob

    document = plan.model_dump()
    document.update(generator=generator, scorer=scorer)
    if args.population is not None:
        document["population_size"] = args.population
    if args.workers is not None:
        document["max_workers"] = args.workers
    return SimulationPlan(**document)


def simulate(args: argparse.Namespace, config: RunConfig, out: Path) -> None:
    plan = _load_plan(args, config)
    config = config.model_copy(update={"simulation": plan})

    calibrated = load_fit_result(args.params)
    items = read_items(args.items)
    selected = _fold_test_ids(args)
    if selected is not None:
        known = {item.item_id for item in items}
        unknown = [item_id for item_id in selected if item_id not in known]
        if unknown:
            raise UnknownIdError("unknown item ids: " + ", ".join(unknown))
        items = [item for item in items if item.item_id in set(selected)]

    thetas = [record.theta for _, record in sorted(calibrated.abilities.items())]
    abilities = sample_population(thetas, plan.population_size, plan.histogram_bins, plan.rng_seed)

    truth = None
    if "synthetic" in (plan.generator.kind, plan.scorer.kind):
        truth = load_fit_result(args.truth or args.params).item_params
    generator, scorer = build_backends(
        plan,
        truth,
        student_prompt=PromptTemplate.from_file(args.student_prompt) if args.student_prompt else None,
        scorer_prompt=PromptTemplate.from_file(args.scorer_prompt) if args.scorer_prompt else None,
    )
    try:
        responses = run_simulation(items, abilities, plan, generator, scorer)
    finally:
        for backend in {id(b): b for b in (generator, scorer, getattr(scorer, "base", scorer))}.values():
            close = getattr(backend, "close", None)
            if close is not None:
                close()

    write_jsonl(out / "sim_responses.jsonl", (response_to_row(response) for response in responses))
    _write_manifest(
        out,
        "simulate",
        config,
        {
            "items": args.items,
            "params": args.params,
            "truth": args.truth,
            "folds": args.folds,
            "student_prompt": args.student_prompt,
            "scorer_prompt": args.scorer_prompt,
        },
        {"fold": args.fold if args.folds else None, "test_items": args.test_items},
    )


def predict_difficulty(args: argparse.Namespace, config: RunConfig, out: Path) -> None:
    items = read_items(args.items)
    categories = {item.item_id: item.num_categories for item in items}
    train_responses = read_responses(args.train_responses, categories)
    sim_responses = read_responses(args.sim_responses, categories)
    calibrated = load_fit_result(args.calibrated)

    predictions = predict_difficulties(
        train_responses,
        sim_responses,
        calibrated,
        config.refit,
        categories,
        test_item_ids=_fold_test_ids(args),
    )
    write_predictions_csv(predictions, out / "predictions.csv")
    _write_manifest(
        out,
        "predict-difficulty",
        config,
        {
            "items": args.items,
            "train_responses": args.train_responses,
            "sim_responses": args.sim_responses,
            "calibrated": args.calibrated,
            "folds": args.folds,
        },
        {"fold": args.fold if args.folds else None, "test_items": args.test_items},
    )


def _read_difficulties(path: Path) -> Dict[str, float]:
    if path.suffix == ".csv":
        return {p.item_id: p.normalized_difficulty for p in read_predictions_csv(path)}
    return load_fit_result(path).difficulties()


def _envelope_vectors(responses: Sequence) -> List[List[float]]:
    return [parse_envelope(response.text)[2] for response in responses]


def evaluate_command(args: argparse.Namespace, config: RunConfig, out: Path) -> None:
    predicted = {p.item_id: p.normalized_difficulty for p in read_predictions_csv(args.pred)}
    truth = _read_difficulties(args.truth)
    common = sorted(set(predicted) & set(truth))
    if not common:
        raise DomainError("predictions and truth share no item ids")

    sim_responses = read_responses(args.sim_responses) if args.sim_responses else None
    sim_abilities = sim_scores = None
    if sim_responses is not None:
        aligned = [r for r in sim_responses if r.prior_ability is not None]
        sim_abilities = [r.prior_ability for r in aligned]
        sim_scores = [r.score for r in aligned]

    real_vectors = sim_vectors = None
    if args.real_embeddings and args.sim_embeddings:
        real_vectors = [list(r.vector) for r in read_embeddings(args.real_embeddings)]
        sim_vectors = [list(r.vector) for r in read_embeddings(args.sim_embeddings)]
    elif args.real_responses and sim_responses is not None:
        real_vectors = _envelope_vectors(read_responses(args.real_responses))
        sim_vectors = _envelope_vectors(sim_responses)

    reports = evaluate(
        pred=[predicted[item_id] for item_id in common],
        truth=[truth[item_id] for item_id in common],
        sim_abilities=sim_abilities,
        sim_scores=sim_scores,
        real_vectors=real_vectors,
        sim_vectors=sim_vectors,
        diversity_bins=args.bins,
    )
    save_report(reports, out / "report.json")
    _write_manifest(
        out,
        "evaluate",
        config,
        {
            "pred": args.pred,
            "truth": args.truth,
            "sim_responses": args.sim_responses,
            "real_responses": args.real_responses,
            "real_embeddings": args.real_embeddings,
            "sim_embeddings": args.sim_embeddings,
        },
        {"bins": args.bins},
    )


def split_folds(args: argparse.Namespace, config: RunConfig, out: Path) -> None:
    folds_config = _override(
        config.folds,
        n_folds=args.n_folds,
        n_buckets=args.n_buckets,
        sizes=tuple(args.sizes) if args.sizes else None,
    )
    config = config.model_copy(update={"folds": folds_config})

    item_ids = [item.item_id for item in read_items(args.items)]
    difficulties = _read_difficulties(args.difficulties)
    missing = [item_id for item_id in item_ids if item_id not in difficulties]
    if missing:
        raise UnknownIdError("no difficulty for items: " + ", ".join(missing))
    if sum(folds_config.sizes) != len(item_ids):
        raise _UsageError(
            f"split sizes {tuple(folds_config.sizes)} do not add up to {len(item_ids)} items"
        )

    folds = make_folds(
        {item_id: difficulties[item_id] for item_id in item_ids},
        folds_config.n_folds,
        folds_config.n_buckets,
        folds_config.sizes,
        folds_config.rng_seed,
    )
    save_folds(folds, out / "folds.json")
    _write_manifest(
        out, "split-folds", config, {"items": args.items, "difficulties": args.difficulties}, {}
    )


def make_synthetic(args: argparse.Namespace, config: RunConfig, out: Path) -> None:
    seed = stage_seed(config.rng_seed, "synthetic")
    items, truth, abilities, responses = sample_calibration_data(
        args.students, args.n_items, args.categories, rng_seed=seed
    )
    save_dataset(
        Dataset(items=items, responses=responses), out / "items.jsonl", out / "responses.jsonl"
    )
    save_fit_result(
        FitResult(
            item_params=truth,
            abilities={record.student_id: record for record in abilities},
            final_loss=0.0,
        ),
        out / "truth.json",
        meta={"rng_seed": seed},
    )
    _write_manifest(
        out,
        "make-synthetic",
        config,
        {},
        {"students": args.students, "items": args.n_items, "categories": args.categories},
    )


def knn_baseline_command(args: argparse.Namespace, config: RunConfig, out: Path) -> None:
    predictions = knn_baseline(
        read_embeddings(args.test_embeddings),
        read_embeddings(args.train_embeddings),
        _read_difficulties(args.difficulties),
        k=args.k,
    )
    write_predictions_csv(predictions, out / "predictions.csv")
    _write_manifest(
        out,
        "knn-baseline",
        config,
        {
            "train_embeddings": args.train_embeddings,
            "test_embeddings": args.test_embeddings,
            "difficulties": args.difficulties,
        },
        {"k": args.k},
    )


def _add_input(
    parser: argparse.ArgumentParser, flag: str, required: bool = False, **kwargs: Any
) -> None:
    """Input file flag; unset flags fall back to the paths section of the run configuration."""
    action = parser.add_argument(flag, type=Path, **kwargs)
    inputs = dict(parser.get_default("inputs") or {})
    inputs[action.dest] = required
    parser.set_defaults(inputs=inputs)


def _resolve_inputs(args: argparse.Namespace, config: RunConfig) -> None:
    for name, required in sorted(getattr(args, "inputs", {}).items()):
        path = config.path(name, getattr(args, name))
        if path is None:
            if required:
                raise _UsageError(
                    f"no {name} input: pass --{name.replace('_', '-')} or set paths.{name}"
                )
            continue
        if not path.exists():
            raise FileNotFoundError(f"{name} input not found: {path}")
        setattr(args, name, path)


def _add_fold_selection(parser: argparse.ArgumentParser) -> None:
    _add_input(parser, "--folds", help="folds.json from split-folds")
    parser.add_argument("--fold", type=int, default=0, help="Fold whose test items to use")
    parser.add_argument("--test-items", help="Comma-separated test item ids")


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="Output directory")
    common.add_argument("--config", type=Path, help="Run configuration (YAML or JSON)")
    common.add_argument("--seed", type=int, help="Root random seed")

    parser = ArgumentParser(prog="psychocal", description="IRT calibration of item difficulty")
    commands = parser.add_subparsers(dest="command", required=True)

    fit_parser = commands.add_parser("fit-irt", parents=[common], help="Calibrate a GPCM")
    _add_input(fit_parser, "--items", required=True)
    _add_input(fit_parser, "--responses", required=True)
    fit_parser.add_argument("--epochs", type=int)
    fit_parser.add_argument("--learning-rate", type=float)
    fit_parser.set_defaults(handler=fit_irt)

    mine_parser = commands.add_parser("mine-pairs", parents=[common], help="Mine preference pairs")
    _add_input(mine_parser, "--items", required=True)
    _add_input(mine_parser, "--responses", required=True)
    _add_input(mine_parser, "--params", required=True)
    mine_parser.add_argument("--epsilon", type=float)
    mine_parser.add_argument("--m", type=int)
    mine_parser.add_argument("--train-fraction", type=float)
    _add_input(mine_parser, "--prompt", help="Simulated-student prompt template")
    mine_parser.set_defaults(handler=mine_pairs)

    sim_parser = commands.add_parser("simulate", parents=[common], help="Simulate students")
    _add_input(sim_parser, "--items", required=True)
    _add_input(sim_parser, "--params", required=True)
    _add_input(sim_parser, "--plan", help="Simulation plan (YAML or JSON)")
    sim_parser.add_argument(
        "--backend", choices=["synthetic", "subprocess", "http", "chat"], default=None
    )
    sim_parser.add_argument("--backend-command", help="Worker command line (subprocess backend)")
    sim_parser.add_argument("--backend-url", help="Service URL (http backend)")
    sim_parser.add_argument("--model", help="Model name (chat backend)")
    sim_parser.add_argument("--base-url", help="OpenAI-compatible endpoint (chat backend)")
    _add_input(sim_parser, "--truth", help="Ground-truth params for the synthetic oracle")
    sim_parser.add_argument("--flip-prob", type=float)
    sim_parser.add_argument("--population", type=int)
    sim_parser.add_argument("--workers", type=int)
    _add_input(sim_parser, "--student-prompt")
    _add_input(sim_parser, "--scorer-prompt")
    _add_fold_selection(sim_parser)
    sim_parser.set_defaults(handler=simulate)

    predict_parser = commands.add_parser(
        "predict-difficulty", parents=[common], help="Predict difficulties of unseen items"
    )
    _add_input(predict_parser, "--items", required=True)
    _add_input(predict_parser, "--train-responses", required=True)
    _add_input(predict_parser, "--sim-responses", required=True)
    _add_input(predict_parser, "--calibrated", required=True)
    _add_fold_selection(predict_parser)
    predict_parser.set_defaults(handler=predict_difficulty)

    eval_parser = commands.add_parser("evaluate", parents=[common], help="Compute metrics")
    _add_input(eval_parser, "--pred", required=True)
    _add_input(eval_parser, "--truth", required=True)
    _add_input(eval_parser, "--sim-responses")
    _add_input(eval_parser, "--real-responses")
    _add_input(eval_parser, "--real-embeddings")
    _add_input(eval_parser, "--sim-embeddings")
    eval_parser.add_argument("--bins", type=int, default=100)
    eval_parser.set_defaults(handler=evaluate_command)

    folds_parser = commands.add_parser("split-folds", parents=[common], help="Build folds")
    _add_input(folds_parser, "--items", required=True)
    _add_input(folds_parser, "--difficulties", required=True)
    folds_parser.add_argument("--n-folds", type=int)
    folds_parser.add_argument("--n-buckets", type=int)
    folds_parser.add_argument("--sizes", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    folds_parser.set_defaults(handler=split_folds)

    synthetic_parser = commands.add_parser(
        "make-synthetic", parents=[common], help="Write a synthetic calibration dataset"
    )
    synthetic_parser.add_argument("--students", type=int, default=2000)
    synthetic_parser.add_argument("--items", dest="n_items", type=int, default=30)
    synthetic_parser.add_argument("--categories", type=int, default=3)
    synthetic_parser.set_defaults(handler=make_synthetic)

    knn_parser = commands.add_parser(
        "knn-baseline", parents=[common], help="Embedding kNN difficulty baseline"
    )
    _add_input(knn_parser, "--train-embeddings", required=True)
    _add_input(knn_parser, "--test-embeddings", required=True)
    _add_input(knn_parser, "--difficulties", required=True)
    knn_parser.add_argument("--k", type=int, default=1)
    knn_parser.set_defaults(handler=knn_baseline_command)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one psychocal subcommand.

    Args:
        argv (list of str, optional): Command-line arguments. Defaults to sys.argv[1:].

    Returns:
        int: 0 on success, 1 on usage or environment errors, 2 on data errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_ENVIRONMENT

    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        configure_logging(setup_log(out / "logs", args.command))
        config = RunConfig.from_file(args.config, rng_seed=args.seed)
        _resolve_inputs(args, config)
        args.handler(args, config, out)
    except _UsageError as e:
        logger.error("%s", e)
        return EXIT_ENVIRONMENT
    except BackendError as e:
        logger.error("Backend failure: %s", e)
        return EXIT_ENVIRONMENT
    except (DomainError, UnknownIdError, ValidationError, json.JSONDecodeError) as e:
        logger.error("%s", e)
        return EXIT_DOMAIN
    except (OSError, yaml.YAMLError) as e:
        logger.error("%s", e)
        return EXIT_ENVIRONMENT

    logger.info("%s finished, artifacts in %s", args.command, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
