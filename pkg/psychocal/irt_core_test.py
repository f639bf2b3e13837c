import json
import math

import numpy as np
import pytest

from psychocal.difficulty_pipeline import normalize_predictions
from psychocal.errors import DegenerateItemError, DomainError, UnknownIdError
from psychocal.irt_core import (
    AbilityRecord,
    FitConfig,
    ItemParams,
    ScoredResponse,
    expected_score,
    fit,
    fit_result_to_dict,
    load_fit_result,
    log_likelihood,
    log_likelihood_gradients,
    predict_score,
    sample_scores,
    save_fit_result,
    score_probabilities,
)
from psychocal.metrics import pcc, rmse
from psychocal.sim_engine import sample_calibration_data


def random_params(rng, item_id="q", num_categories=None):
    num_categories = num_categories or int(rng.integers(2, 6))
    return ItemParams.from_free_steps(
        item_id,
        rng.uniform(0.5, 2.0),
        rng.normal(),
        rng.normal(scale=0.5, size=num_categories - 2),
    )


def test_uniform_when_theta_equals_difficulty():
    params = ItemParams(item_id="q", discrimination=1.7, difficulty=0.3, steps=(0.0, 0.0, 0.0))
    np.testing.assert_allclose(score_probabilities(0.3, params), [1 / 3] * 3, atol=1e-12)
    assert predict_score(0.3, params) == 0


def test_two_categories_at_difficulty():
    params = ItemParams(item_id="q", steps=(0.0, 0.0))
    np.testing.assert_allclose(score_probabilities(0.0, params), [0.5, 0.5], atol=1e-12)


def test_derived_probabilities(derived_params):
    probabilities = score_probabilities(1.0, derived_params)
    np.testing.assert_allclose(probabilities, [0.0777, 0.3482, 0.5741], atol=1e-4)
    assert predict_score(1.0, derived_params) == 2


def test_predict_score_saturates():
    params = ItemParams(item_id="q", steps=(0.0, 0.0))
    assert predict_score(5.0, params) == 1


def test_probabilities_normalized_and_shift_invariant():
    rng = np.random.default_rng(0)
    for _ in range(10000):
        params = random_params(rng)
        theta = rng.normal()
        probabilities = score_probabilities(theta, params)
        assert abs(probabilities.sum() - 1.0) <= 1e-12
        assert np.all(probabilities > 0) and np.all(probabilities <= 1)

        delta = rng.uniform(-3, 3)
        shifted = params.model_copy(update={"difficulty": params.difficulty + delta})
        np.testing.assert_allclose(
            score_probabilities(theta + delta, shifted), probabilities, atol=1e-12
        )


def test_one_parameter_logistic_reduction():
    for b in (-1.0, 0.0, 0.7):
        params = ItemParams(item_id="q", difficulty=b, steps=(0.0, 0.0))
        for theta in np.linspace(-4, 4, 17):
            expected = 1.0 / (1.0 + math.exp(-(theta - b)))
            assert abs(score_probabilities(theta, params)[1] - expected) <= 1e-12


def test_expected_score_monotone():
    rng = np.random.default_rng(1)
    for _ in range(50):
        params = random_params(rng)
        scores = [expected_score(theta, params) for theta in np.linspace(-5, 5, 101)]
        assert np.all(np.diff(scores) >= -1e-12)


def test_non_finite_theta_rejected(derived_params):
    with pytest.raises(DomainError):
        score_probabilities(float("nan"), derived_params)


@pytest.mark.parametrize(
    "steps",
    [(0.1, -0.1), (0.0, 0.5, 0.5), (0.0,)],
)
def test_item_params_invariants(steps):
    with pytest.raises(ValueError):
        ItemParams(item_id="q", steps=steps)


def test_negative_discrimination_rejected():
    with pytest.raises(ValueError):
        ItemParams(item_id="q", discrimination=-1.0, steps=(0.0, 0.0))


def test_log_likelihood_examples(derived_params):
    assert log_likelihood([], {"q1": derived_params}, {}) == 0.0

    uniform = ItemParams(item_id="u", steps=(0.0, 0.0, 0.0))
    response = ScoredResponse(item_id="u", student_id="s", score=1)
    assert log_likelihood([response], {"u": uniform}, {"s": 0.0}) == pytest.approx(math.log(1 / 3))

    responses = [
        ScoredResponse(item_id="q1", student_id="s", score=0),
        ScoredResponse(item_id="q1", student_id="s", score=2),
    ]
    probabilities = score_probabilities(1.0, derived_params)
    expected = math.log(probabilities[0]) + math.log(probabilities[2])
    abilities = {"s": AbilityRecord(student_id="s", theta=1.0)}
    assert log_likelihood(responses, {"q1": derived_params}, abilities) == pytest.approx(expected)


def test_log_likelihood_unknown_ids(derived_params):
    response = ScoredResponse(item_id="q1", student_id="nobody", score=0)
    with pytest.raises(UnknownIdError):
        log_likelihood([response], {"q1": derived_params}, {})
    with pytest.raises(UnknownIdError):
        log_likelihood([response], {}, {"nobody": 0.0})


def _random_instance(rng):
    params = {
        f"i{index}": random_params(rng, f"i{index}", num_categories)
        for index, num_categories in enumerate((2, 3, 4))
    }
    abilities = {f"s{index}": float(rng.normal()) for index in range(4)}
    responses = []
    for item_id, item in params.items():
        for student_id in abilities:
            responses.append(
                ScoredResponse(
                    item_id=item_id,
                    student_id=student_id,
                    score=int(rng.integers(item.num_categories)),
                )
            )
    return responses, params, abilities


def _with(params, item_id, **update):
    item = params[item_id]
    values = {
        "a": item.discrimination,
        "b": item.difficulty,
        "free": list(item.free_steps),
    }
    values.update(update)
    changed = dict(params)
    changed[item_id] = ItemParams.from_free_steps(item_id, values["a"], values["b"], values["free"])
    return changed


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-5
    for _ in range(50):
        responses, params, abilities = _random_instance(rng)
        gradients = log_likelihood_gradients(responses, params, abilities)

        def central(plus, minus):
            return (
                log_likelihood(responses, *plus) - log_likelihood(responses, *minus)
            ) / (2 * h)

        for item_id, item in params.items():
            a, b = item.discrimination, item.difficulty
            numeric_a = central(
                (_with(params, item_id, a=a + h), abilities),
                (_with(params, item_id, a=a - h), abilities),
            )
            numeric_b = central(
                (_with(params, item_id, b=b + h), abilities),
                (_with(params, item_id, b=b - h), abilities),
            )
            np.testing.assert_allclose(gradients["a"][item_id], numeric_a, rtol=1e-4, atol=1e-6)
            np.testing.assert_allclose(gradients["b"][item_id], numeric_b, rtol=1e-4, atol=1e-6)

            free = list(item.free_steps)
            assert len(gradients["steps"][item_id]) == len(free)
            for index in range(len(free)):
                up, down = list(free), list(free)
                up[index] += h
                down[index] -= h
                numeric = central(
                    (_with(params, item_id, free=up), abilities),
                    (_with(params, item_id, free=down), abilities),
                )
                np.testing.assert_allclose(
                    gradients["steps"][item_id][index], numeric, rtol=1e-4, atol=1e-6
                )

        for student_id, theta in abilities.items():
            up = dict(abilities, **{student_id: theta + h})
            down = dict(abilities, **{student_id: theta - h})
            numeric = central((params, up), (params, down))
            np.testing.assert_allclose(
                gradients["theta"][student_id], numeric, rtol=1e-4, atol=1e-6
            )


def test_sample_scores_match_probabilities(derived_params):
    rng = np.random.default_rng(3)
    scores = sample_scores(np.full(20000, 1.0), derived_params, rng)
    shares = np.bincount(scores, minlength=3) / len(scores)
    np.testing.assert_allclose(shares, score_probabilities(1.0, derived_params), atol=0.02)


def test_fit_rejects_degenerate_items():
    responses = [
        ScoredResponse(item_id="flat", student_id=f"s{index}", score=1) for index in range(5)
    ] + [
        ScoredResponse(item_id="ok", student_id=f"s{index}", score=index % 2) for index in range(5)
    ]
    with pytest.raises(DegenerateItemError) as info:
        fit(responses, {"flat": 3, "ok": 2})
    assert info.value.item_ids == ["flat"]
    assert "flat" in str(info.value)


def test_fit_rejects_out_of_range_scores():
    responses = [
        ScoredResponse(item_id="q", student_id="s0", score=0),
        ScoredResponse(item_id="q", student_id="s1", score=3),
    ]
    with pytest.raises(DomainError):
        fit(responses, {"q": 3})


def test_fit_is_deterministic_and_keeps_constraints(small_corpus):
    items, _, _, responses = small_corpus
    categories = {item.item_id: item.num_categories for item in items}
    config = FitConfig(epochs=3, rng_seed=11)

    first = fit(responses, categories, config)
    second = fit(responses, categories, config)
    assert json.dumps(fit_result_to_dict(first), sort_keys=True) == json.dumps(
        fit_result_to_dict(second), sort_keys=True
    )

    assert set(first.item_params) == set(categories)
    assert len(first.abilities) == 100
    assert len(first.loss_history) == 3
    for params in first.item_params.values():
        assert params.steps[0] == 0.0
        assert abs(math.fsum(params.steps)) <= 1e-9
        assert params.discrimination > 0
    assert first.holdout_qwk is None or -1.0 <= first.holdout_qwk <= 1.0


def test_fit_without_holdout_has_no_qwk(small_corpus):
    items, _, _, responses = small_corpus
    categories = {item.item_id: item.num_categories for item in items}
    result = fit(responses, categories, FitConfig(epochs=1, holdout_fraction=0.0))
    assert result.holdout_qwk is None


def test_fit_mixed_category_counts():
    rng = np.random.default_rng(4)
    responses = []
    for student in range(60):
        theta = rng.normal()
        responses.append(
            ScoredResponse(item_id="binary", student_id=f"s{student}", score=int(theta > 0))
        )
        responses.append(
            ScoredResponse(
                item_id="wide", student_id=f"s{student}", score=int(np.clip(theta + 2, 0, 4))
            )
        )
    result = fit(responses, {"binary": 2, "wide": 5}, FitConfig(epochs=2))
    assert result.item_params["binary"].num_categories == 2
    assert result.item_params["wide"].num_categories == 5
    assert len(result.item_params["wide"].free_steps) == 3


def test_warm_start_fixed_point(small_corpus):
    items, _, _, responses = small_corpus
    categories = {item.item_id: item.num_categories for item in items}
    converged = fit(responses, categories, FitConfig(epochs=5, learning_rate=1e-2))
    again = fit(
        responses,
        categories,
        FitConfig(epochs=1, learning_rate=1e-12),
        warm_start=converged,
    )
    for item_id, params in converged.item_params.items():
        other = again.item_params[item_id]
        assert other.difficulty == pytest.approx(params.difficulty, abs=1e-6)
        assert other.discrimination == pytest.approx(params.discrimination, abs=1e-6)
        np.testing.assert_allclose(other.steps, params.steps, atol=1e-6)
    for student_id, record in converged.abilities.items():
        assert again.abilities[student_id].theta == pytest.approx(record.theta, abs=1e-6)


def test_persistence_round_trip(tmp_path, small_corpus):
    items, _, _, responses = small_corpus
    categories = {item.item_id: item.num_categories for item in items}
    result = fit(responses, categories, FitConfig(epochs=2))

    path = tmp_path / "params.json"
    save_fit_result(result, path, meta={"rng_seed": 0, "epochs": 2})
    loaded = load_fit_result(path)

    for item_id, params in result.item_params.items():
        restored = loaded.item_params[item_id]
        assert restored.difficulty == pytest.approx(params.difficulty, abs=1e-9)
        assert restored.steps[0] == 0.0
        assert abs(math.fsum(restored.steps)) <= 1e-9

    again = tmp_path / "again.json"
    save_fit_result(loaded, again, meta={"rng_seed": 0, "epochs": 2})
    assert path.read_bytes() == again.read_bytes()

    document = json.loads(path.read_text())
    assert set(document) == {"items", "students", "meta"}
    assert set(document["items"][0]) == {"item_id", "a", "b", "d"}


@pytest.mark.slow
def test_parameter_recovery():
    items, truth, _, responses = sample_calibration_data(2000, 30, 3, rng_seed=0, with_text=False)
    categories = {item.item_id: item.num_categories for item in items}
    result = fit(responses, categories, FitConfig())

    item_ids = sorted(truth)
    true_b = [truth[item_id].difficulty for item_id in item_ids]
    recovered = [result.item_params[item_id].difficulty for item_id in item_ids]
    assert pcc(recovered, true_b) >= 0.95
    assert rmse(normalize_predictions(recovered, true_b), true_b) <= 0.25
