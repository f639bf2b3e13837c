import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field, model_validator

from psychocal.dataio import FoldConfig
from psychocal.irt_core import FitConfig
from psychocal.pair_miner import MiningConfig
from psychocal.sim_engine import SimulationPlan, stable_hash

HERE = Path(os.path.abspath(__file__)).parent
DEFAULT_CONFIG_PATH = HERE / "conf/run_config.yaml"

# config section -> stage name its seed is derived from
STAGES = {
    "fit": "fit",
    "refit": "refit",
    "mining": "mine",
    "simulation": "simulate",
    "folds": "folds",
}


def stage_seed(root_seed: int, stage: str) -> int:
    """
    Seed of one pipeline stage, derived from the root seed and the stage name.
    """
    sequence = np.random.SeedSequence([root_seed, stable_hash("stage", stage)])
    return int(sequence.generate_state(1)[0])


class RunConfig(BaseModel):
    """
    Settings of every pipeline stage in one document. Stage sections that do not
    set their own rng_seed get one derived from the root rng_seed.
    """

    rng_seed: int = 0
    fit: FitConfig = Field(default_factory=FitConfig)
    refit: FitConfig = Field(default_factory=FitConfig)
    mining: MiningConfig = Field(default_factory=MiningConfig)
    simulation: SimulationPlan = Field(default_factory=SimulationPlan)
    folds: FoldConfig = Field(default_factory=FoldConfig)
    paths: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def _derive_stage_seeds(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        root_seed = int(data.get("rng_seed", 0))
        for section, stage in STAGES.items():
            values = data.get(section)
            if values is None:
                values = {}
            elif isinstance(values, BaseModel):
                continue
            values = dict(values)
            values.setdefault("rng_seed", stage_seed(root_seed, stage))
            data[section] = values
        return data

    def path(self, name: str, override: Union[str, Path, None] = None) -> Optional[Path]:
        """
        Path given on the command line, else the one named in the paths section.
        """
        if override is not None:
            return Path(override)
        if name in self.paths:
            return Path(self.paths[name])
        return None

    @classmethod
    def from_dict(cls, document: Optional[Dict[str, Any]], rng_seed: Optional[int] = None) -> "RunConfig":
        document = dict(document or {})
        if rng_seed is not None:
            document["rng_seed"] = rng_seed
        return cls(**document)

    @classmethod
    def from_file(
        cls, path: Union[str, Path, None] = None, rng_seed: Optional[int] = None
    ) -> "RunConfig":
        """
        Load a run configuration from a YAML (or JSON) file.

        Args:
            path (str | Path, optional): The configuration file. Defaults to the packaged conf/run_config.yaml.
            rng_seed (int, optional): Root seed overriding the file's. Defaults to None.

        Returns:
            RunConfig: The configuration.
        """
        with open(path or DEFAULT_CONFIG_PATH, "r", encoding="utf-8") as config_file:
            document = yaml.safe_load(config_file)
        return cls.from_dict(document, rng_seed)
