from psychocal.backends import build_backends
from psychocal.dataio import make_folds
from psychocal.difficulty_pipeline import predict_difficulties
from psychocal.irt_core import FitConfig, fit
from psychocal.metrics import evaluate
from psychocal.run_logging import configure_logging
from psychocal.sim_engine import (
    BackendBinding,
    SimulationPlan,
    run_simulation,
    sample_calibration_data,
    sample_population,
)


def sample_pipeline(flip_prob=0.2, seed=0):
    """
    Calibrate on the train and validation items of one fold, simulate students on
    its test items and compare the predicted difficulties with the true ones.
    """
    items, truth, _, responses = sample_calibration_data(1000, 49, rng_seed=seed)
    categories = {item.item_id: item.num_categories for item in items}
    fold = make_folds(
        {item_id: params.difficulty for item_id, params in truth.items()},
        n_folds=5,
        n_buckets=10,
        sizes=(29, 10, 10),
        rng_seed=seed,
    )[0]

    known = set(fold.train_ids) | set(fold.val_ids)
    train_responses = [r for r in responses if r.item_id in known]
    calibrated = fit(train_responses, categories, FitConfig(epochs=30, learning_rate=1e-2))

    plan = SimulationPlan(
        population_size=1000,
        rng_seed=seed,
        scorer=BackendBinding(kind="synthetic", flip_prob=flip_prob),
    )
    abilities = sample_population(
        [record.theta for record in calibrated.abilities.values()],
        plan.population_size,
        plan.histogram_bins,
        plan.rng_seed,
    )
    generator, scorer = build_backends(plan, truth)
    test_items = [item for item in items if item.item_id in set(fold.test_ids)]
    sim_responses = run_simulation(test_items, abilities, plan, generator, scorer)

    predictions = predict_difficulties(
        train_responses,
        sim_responses,
        calibrated,
        FitConfig(epochs=30, learning_rate=1e-2, holdout_fraction=0.0),
        categories,
        test_item_ids=fold.test_ids,
    )
    return evaluate(
        pred=[p.normalized_difficulty for p in predictions],
        truth=[truth[p.item_id].difficulty for p in predictions],
        sim_abilities=[r.prior_ability for r in sim_responses],
        sim_scores=[r.score for r in sim_responses],
    )


if __name__ == "__main__":
    configure_logging()
    for name, report in sample_pipeline().items():
        print(f"{name}: {report.value} (n={report.n})")
