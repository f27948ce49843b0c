"""Run configuration: JSON files merged over the default tables."""

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from typing_extensions import Self

from pcrecourse.components import defaults
from pcrecourse.utils.logger import logger


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs, after defaults are applied."""

    csv_path: Path
    schema_path: Path
    output_dir: Path = Path("runs")
    seed: int = 0
    discretizer: Dict[str, Any] = field(default_factory=lambda: dict(defaults.DISCRETIZER))
    classifier: Dict[str, Any] = field(default_factory=lambda: dict(defaults.CLASSIFIER))
    circuit: Dict[str, Any] = field(default_factory=lambda: dict(defaults.CIRCUIT))
    pool: Dict[str, Any] = field(default_factory=lambda: dict(defaults.POOL))
    encoder: Dict[str, Any] = field(default_factory=lambda: dict(defaults.ENCODER))
    generator: Dict[str, Any] = field(default_factory=lambda: dict(defaults.GENERATOR))
    loss: Dict[str, Any] = field(default_factory=lambda: dict(defaults.LOSS_WEIGHTS))
    refine: Dict[str, Any] = field(default_factory=lambda: dict(defaults.REFINE))
    evaluation: Dict[str, Any] = field(default_factory=lambda: dict(defaults.EVALUATION))
    ablation: List[Dict[str, Any]] = field(
        default_factory=lambda: copy.deepcopy(defaults.ABLATION_MATRIX)
    )

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> Self:
        """Build a config from a parsed JSON document.

        Args:
            data: Parsed config; must name ``dataset.csv`` and ``dataset.schema``
            base_dir: Directory that relative paths are resolved against

        Returns:
            The merged configuration
        """
        base_dir = Path(base_dir) if base_dir is not None else Path(".")
        known = set(defaults.SECTIONS) | {"dataset", "seed", "output_dir", "ablation"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown config keys: {sorted(unknown)}")

        dataset = data.get("dataset")
        if not isinstance(dataset, dict):
            raise ValueError("Missing required field: dataset")
        for key in ("csv", "schema"):
            if key not in dataset:
                raise ValueError(f"Missing required field: dataset.{key}")

        sections = {}
        for name, table in defaults.SECTIONS.items():
            overrides = data.get(name, {})
            bad = set(overrides) - set(table)
            if bad:
                raise ValueError(f"Unknown keys in section '{name}': {sorted(bad)}")
            merged = dict(table)
            merged.update(overrides)
            sections[name] = merged

        return cls(
            csv_path=_resolve(base_dir, dataset["csv"]),
            schema_path=_resolve(base_dir, dataset["schema"]),
            output_dir=_resolve(base_dir, data.get("output_dir", "runs")),
            seed=int(data.get("seed", 0)),
            ablation=copy.deepcopy(data.get("ablation", defaults.ABLATION_MATRIX)),
            **sections,
        )

    @classmethod
    def load(cls, path) -> Self:
        """Load a JSON config file."""
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            logger.error(f"Error: config file {path} not found")
            raise
        except json.JSONDecodeError:
            logger.error(f"Error: Invalid JSON format in {path}")
            raise
        return cls.from_dict(data, base_dir=path.parent)

    def with_loss(self, **overrides) -> Self:
        """Copy of this config with some loss weights or switches replaced."""
        loss = dict(self.loss)
        bad = set(overrides) - set(loss)
        if bad:
            raise ValueError(f"Unknown loss keys: {sorted(bad)}")
        loss.update(overrides)
        return replace(self, loss=loss)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly view, recorded in run manifests."""
        out = {
            "dataset": {"csv": str(self.csv_path), "schema": str(self.schema_path)},
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "ablation": copy.deepcopy(self.ablation),
        }
        for name in defaults.SECTIONS:
            out[name] = dict(getattr(self, name))
        return out


def _resolve(base_dir: Path, value) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base_dir / path
