import threading

import numpy as np
import pytest
from scipy.optimize import brentq

from psychocal.errors import BackendError, DomainError, EnvelopeParseError, SimulationAbortedError
from psychocal.irt_core import ItemParams, score_probabilities
from psychocal.metrics import qwk, theta_align
from psychocal.sim_engine import (
    FEATURE_DIM,
    DecodingConfig,
    GeneratorBackend,
    Item,
    NoisyScorer,
    SimulationPlan,
    SyntheticOracleGenerator,
    SyntheticOracleScorer,
    assign_student_id,
    format_envelope,
    noisy_score,
    parse_envelope,
    run_simulation,
    sample_calibration_data,
    sample_population,
    synthetic_oracle_generate,
    synthetic_oracle_score,
)


def discriminating_item(item_id="d1"):
    item = Item(item_id=item_id, question="Explain.", num_categories=3)
    truth = ItemParams(item_id=item_id, discrimination=2.0, difficulty=0.0, steps=(0.0, 0.0, 0.0))
    return item, truth


@pytest.mark.parametrize(
    "theta, expected",
    [(0.7338, "sim_0.7"), (-0.04, "sim_0.0"), (1.25, "sim_1.2"), (-0.26, "sim_-0.3")],
)
def test_assign_student_id(theta, expected):
    assert assign_student_id(theta) == expected


def test_student_ids_coalesce_per_cell():
    thetas = np.random.default_rng(0).normal(size=5000)
    ids = {assign_student_id(theta) for theta in thetas}
    cells = {round(float(theta), 1) + 0.0 for theta in thetas}
    assert len(ids) == len(cells) < len(thetas)


def test_population_from_constant_abilities():
    values = sample_population([0.3] * 20, 500, bins=50, rng_seed=1)
    assert len(values) == 500
    assert all(abs(value - 0.3) <= 1 / 50 + 1e-9 for value in values)


def test_population_bucket_shares():
    train = [0.25] * 70 + [0.75] * 30
    values = np.asarray(sample_population(train, 10000, bins=2, rng_seed=2))
    assert np.mean(values < 0.5) == pytest.approx(0.7, abs=0.02)
    assert values.min() >= 0.25 and values.max() <= 0.75


def test_population_matches_histogram_cdf():
    train = np.random.default_rng(3).normal(size=500)
    values = np.sort(sample_population(train, 10**5, bins=50, rng_seed=4))
    counts, edges = np.histogram(train, bins=50)
    cdf = np.concatenate([[0.0], np.cumsum(counts) / counts.sum()])
    expected = np.interp(values, edges, cdf)
    empirical = np.arange(1, len(values) + 1) / len(values)
    assert np.max(np.abs(expected - empirical)) <= 0.03


def test_population_rejects_empty_input():
    with pytest.raises(DomainError):
        sample_population([], 10)


def test_population_is_seeded():
    train = [0.1, 0.4, 1.2, -0.5]
    assert sample_population(train, 20, rng_seed=5) == sample_population(train, 20, rng_seed=5)


def test_envelope_round_trip():
    text = format_envelope("a|b", 1, [0.5, -1.25])
    assert parse_envelope(text) == ("a|b", 1, [0.5, -1.25])


@pytest.mark.parametrize("text", ["hello", "SYNTH|item=a|y=x|f=1.0", "SYNTH|item=a|f=1.0"])
def test_malformed_envelope(text):
    with pytest.raises(EnvelopeParseError):
        synthetic_oracle_score(text)


def test_oracle_round_trip():
    item, truth = discriminating_item()
    rng = np.random.default_rng(6)
    for theta in np.linspace(-2, 2, 20):
        text = synthetic_oracle_generate(item, theta, truth, rng)
        item_id, score, features = parse_envelope(text)
        assert item_id == item.item_id
        assert 0 <= score < 3
        assert len(features) == FEATURE_DIM
        assert synthetic_oracle_score(text) == score


def test_oracle_saturates_at_high_ability():
    item, truth = discriminating_item()
    rng = np.random.default_rng(7)
    scores = [synthetic_oracle_score(synthetic_oracle_generate(item, 12.0, truth, rng)) for _ in range(100)]
    assert scores == [2] * 100


def test_oracle_score_distribution():
    item = Item(item_id="q1", question="Why?", num_categories=3)
    truth = ItemParams(item_id="q1", discrimination=1.0, difficulty=0.0, steps=(0.0, 0.5, -0.5))
    rng = np.random.default_rng(8)
    scores = [
        synthetic_oracle_score(synthetic_oracle_generate(item, 1.0, truth, rng))
        for _ in range(10000)
    ]
    shares = np.bincount(scores, minlength=3) / len(scores)
    np.testing.assert_allclose(shares, score_probabilities(1.0, truth), atol=0.02)


def test_noisy_score_rules():
    rng = np.random.default_rng(9)
    assert [noisy_score(1, 0.0, rng, 3) for _ in range(50)] == [1] * 50
    assert [noisy_score(0, 1.0, rng, 3) for _ in range(50)] == [1] * 50
    assert [noisy_score(2, 1.0, rng, 3) for _ in range(50)] == [1] * 50
    assert set(noisy_score(1, 1.0, rng, 3) for _ in range(200)) == {0, 2}
    with pytest.raises(DomainError):
        noisy_score(0, 1.5, rng, 3)


def test_noisy_scorer_agreement_window():
    rng = np.random.default_rng(10)
    truth = rng.integers(0, 3, size=10000)
    noisy = [noisy_score(int(score), 0.45, rng, 3) for score in truth]
    assert 0.55 <= qwk(truth, noisy, 3) <= 0.70


def expected_agreement(flip_prob, shares):
    p0, p1, p2 = shares
    noisy = np.array(
        [
            p0 * (1 - flip_prob) + p1 * flip_prob / 2,
            p1 * (1 - flip_prob) + (p0 + p2) * flip_prob,
            p2 * (1 - flip_prob) + p1 * flip_prob / 2,
        ]
    )
    categories = np.arange(3)
    chance = shares @ (categories[:, None] - categories[None, :]) ** 2 @ noisy
    # every flip moves one category
    return 1.0 - flip_prob / chance


def test_noisy_scorer_agreement_on_oracle_data():
    _, _, _, responses = sample_calibration_data(2000, 5, num_categories=3, rng_seed=11)
    truth = np.array([response.score for response in responses])
    shares = np.bincount(truth, minlength=3) / len(truth)
    flip_prob = brentq(lambda f: expected_agreement(f, shares) - 0.625, 1e-3, 0.999)
    rng = np.random.default_rng(12)
    noisy = [noisy_score(int(score), flip_prob, rng, 3) for score in truth]
    assert 0.55 <= qwk(truth, noisy, 3) <= 0.70


def test_run_simulation_cells_and_order():
    items = [
        Item(item_id="b", question="Q?", num_categories=3),
        Item(item_id="a", question="Q?", num_categories=3),
    ]
    truth = {
        item.item_id: ItemParams(item_id=item.item_id, steps=(0.0, 0.0, 0.0)) for item in items
    }
    abilities = [0.12, -0.73, 1.5]
    plan = SimulationPlan(rng_seed=3, max_workers=1)
    responses = run_simulation(
        items, abilities, plan, SyntheticOracleGenerator(truth), SyntheticOracleScorer()
    )
    assert len(responses) == 6
    assert [r.item_id for r in responses] == ["a"] * 3 + ["b"] * 3
    assert [r.prior_ability for r in responses[:3]] == abilities
    assert [r.student_id for r in responses[:3]] == ["sim_0.1", "sim_-0.7", "sim_1.5"]
    for response in responses:
        assert parse_envelope(response.text)[1] == response.score


def test_run_simulation_independent_of_workers():
    items = [discriminating_item(f"d{index}")[0] for index in range(4)]
    truth = {item.item_id: discriminating_item(item.item_id)[1] for item in items}
    abilities = sample_population(np.linspace(-2, 2, 40), 50, rng_seed=1)

    def simulate(workers):
        plan = SimulationPlan(rng_seed=5, max_workers=workers)
        scorer = NoisyScorer(SyntheticOracleScorer(), 0.3)
        return run_simulation(items, abilities, plan, SyntheticOracleGenerator(truth), scorer)

    assert simulate(1) == simulate(8)


class FlakyGenerator(GeneratorBackend):
    def __init__(self, fail_items=(), failures_per_cell=0):
        self.fail_items = set(fail_items)
        self.failures_per_cell = failures_per_cell
        self.calls = {}
        self.lock = threading.Lock()

    def generate(self, item, theta, decoding, rng):
        key = (item.item_id, theta)
        with self.lock:
            self.calls[key] = self.calls.get(key, 0) + 1
            calls = self.calls[key]
        if item.item_id in self.fail_items or calls <= self.failures_per_cell:
            raise BackendError("unavailable")
        return format_envelope(item.item_id, 1, [0.0])


def test_run_simulation_retries_transient_failures():
    items = [Item(item_id="q", question="Q?", num_categories=3)]
    generator = FlakyGenerator(failures_per_cell=2)
    plan = SimulationPlan(max_attempts=3, backoff_seconds=0.0)
    responses = run_simulation(items, [0.0, 1.0], plan, generator, SyntheticOracleScorer())
    assert len(responses) == 2
    assert set(generator.calls.values()) == {3}


def test_run_simulation_excludes_failed_cells_and_aborts_failed_items():
    items = [
        Item(item_id="good", question="Q?", num_categories=3),
        Item(item_id="bad", question="Q?", num_categories=3),
    ]
    plan = SimulationPlan(max_attempts=2, backoff_seconds=0.0)
    with pytest.raises(SimulationAbortedError, match="bad"):
        run_simulation(items, [0.0, 1.0], plan, FlakyGenerator(fail_items={"bad"}), SyntheticOracleScorer())


def test_run_simulation_drops_out_of_range_scores():
    items = [Item(item_id="q", question="Q?", num_categories=2)]

    class Generator(GeneratorBackend):
        def generate(self, item, theta, decoding, rng):
            return format_envelope(item.item_id, 2 if theta > 0 else 1, [0.0])

    responses = run_simulation(
        items, [-1.0, 1.0], SimulationPlan(), Generator(), SyntheticOracleScorer()
    )
    assert [r.score for r in responses] == [1]


def test_theta_align_of_oracle_simulation():
    item, truth = discriminating_item()
    abilities = np.random.default_rng(11).normal(size=1000).tolist()
    plan = SimulationPlan(rng_seed=12)
    responses = run_simulation(
        [item], abilities, plan, SyntheticOracleGenerator({item.item_id: truth}), SyntheticOracleScorer()
    )
    value = theta_align([r.prior_ability for r in responses], [r.score for r in responses])
    assert value >= 0.6


def test_theta_align_of_ability_blind_generator():
    pairs = [discriminating_item(f"d{index}") for index in range(5)]
    truth = {item.item_id: params for item, params in pairs}
    abilities = np.random.default_rng(13).normal(size=1000).tolist()
    responses = run_simulation(
        [item for item, _ in pairs],
        abilities,
        SimulationPlan(rng_seed=14),
        SyntheticOracleGenerator(truth, ability_blind=True),
        SyntheticOracleScorer(),
    )
    value = theta_align([r.prior_ability for r in responses], [r.score for r in responses])
    assert abs(value) < 0.1


def test_decoding_defaults():
    decoding = DecodingConfig()
    assert (decoding.max_tokens, decoding.temperature, decoding.top_p) == (500, 0.7, 0.95)


def test_sample_calibration_data_shapes():
    items, truth, abilities, responses = sample_calibration_data(20, 4, num_categories=4, rng_seed=1)
    assert len(items) == 4 and len(abilities) == 20
    assert len(responses) == 80
    assert all(1.0 <= params.discrimination <= 2.0 for params in truth.values())
    assert all(params.num_categories == 4 for params in truth.values())
    assert all(parse_envelope(r.text)[1] == r.score for r in responses)
