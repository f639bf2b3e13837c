import json

from psychocal.config import DEFAULT_CONFIG_PATH, STAGES, RunConfig, stage_seed


def test_packaged_defaults():
    config = RunConfig.from_file()
    assert config.fit.epochs == 50
    assert config.fit.learning_rate == 1e-3
    assert config.fit.holdout_fraction == 0.2
    assert config.refit.holdout_fraction == 0.0
    assert config.mining.epsilon == 0.1
    assert config.simulation.population_size == 1000
    assert config.simulation.generator.kind == "synthetic"
    assert config.folds.sizes == (29, 10, 10)
    assert DEFAULT_CONFIG_PATH.exists()


def test_stage_seeds_are_derived_from_the_root_seed():
    config = RunConfig.from_dict({}, rng_seed=7)
    seeds = {
        config.fit.rng_seed,
        config.refit.rng_seed,
        config.mining.rng_seed,
        config.simulation.rng_seed,
        config.folds.rng_seed,
    }
    assert len(seeds) == len(STAGES)
    assert config.mining.rng_seed == stage_seed(7, "mine")
    assert RunConfig.from_dict({}, rng_seed=7) == config
    assert RunConfig.from_dict({}, rng_seed=8).fit.rng_seed != config.fit.rng_seed


def test_explicit_stage_seed_is_kept():
    config = RunConfig.from_dict({"rng_seed": 3, "fit": {"rng_seed": 11, "epochs": 2}})
    assert (config.fit.rng_seed, config.fit.epochs) == (11, 2)
    assert config.refit.rng_seed == stage_seed(3, "refit")


def test_command_line_seed_overrides_the_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"rng_seed": 1, "mining": {"epsilon": 0.2}}), encoding="utf-8")
    config = RunConfig.from_file(path, rng_seed=5)
    assert config.rng_seed == 5
    assert config.mining.epsilon == 0.2
    assert config.mining.rng_seed == stage_seed(5, "mine")


def test_paths_section(tmp_path):
    config = RunConfig.from_dict({"paths": {"items": "data/items.jsonl"}})
    assert str(config.path("items")) == "data/items.jsonl"
    assert str(config.path("items", tmp_path / "other.jsonl")).endswith("other.jsonl")
    assert config.path("responses") is None
