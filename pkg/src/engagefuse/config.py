"""Run configuration: one JSON document, fully validated, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from engagefuse.domain import MODALITIES, Modality
from engagefuse.errors import ParameterError
from engagefuse.features import FeatureSchema
from engagefuse.forest import ForestParams

PROTOCOLS = ("loso", "holdout")
OVERALL_SCHEMES = ("macro", "weighted")


@dataclass(frozen=True)
class RunConfig:
    protocol: str = "loso"
    window_s: float = 8.0
    hop_s: float = 4.0
    holdout_fraction: float = 0.8
    forest: ForestParams = field(default_factory=ForestParams)
    forest_overrides: Mapping[Modality, ForestParams] = field(default_factory=dict)
    fusion: bool = True
    repeats: int = 10
    seed: int = 0
    overall: str = "weighted"
    feature_schema: Optional[FeatureSchema] = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ParameterError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not (self.window_s > 0 and 0 < self.hop_s <= self.window_s):
            raise ParameterError("need window_s > 0 and 0 < hop_s <= window_s")
        if not 0 < self.holdout_fraction < 1:
            raise ParameterError("holdout_fraction must lie in (0, 1)")
        if self.repeats < 1:
            raise ParameterError("repeats must be at least 1")
        if self.overall not in OVERALL_SCHEMES:
            raise ParameterError(f"overall must be one of {OVERALL_SCHEMES}")

    def forest_params(self, modality: Modality) -> ForestParams:
        return self.forest_overrides.get(modality, self.forest)

    def to_dict(self) -> dict[str, Any]:
        return {
            "protocol": self.protocol,
            "window_s": self.window_s,
            "hop_s": self.hop_s,
            "holdout_fraction": self.holdout_fraction,
            "forest": self.forest.to_dict(),
            "forest_overrides": {str(m): self.forest_overrides[m].to_dict()
                                 for m in MODALITIES if m in self.forest_overrides},
            "fusion": self.fusion,
            "repeats": self.repeats,
            "seed": self.seed,
            "overall": self.overall,
            "feature_schema": self.feature_schema.to_dict() if self.feature_schema else None,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **changes) -> "RunConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = set(cls().to_dict())
        extra = set(data) - known
        if extra:
            raise ParameterError(f"unknown run config keys {sorted(extra)}")
        kwargs = dict(data)
        base = ForestParams.from_dict(kwargs.pop("forest", {}))
        kwargs["forest"] = base
        overrides = {}
        for name, params in kwargs.pop("forest_overrides", {}).items():
            try:
                modality = Modality(name)
            except ValueError:
                raise ParameterError(f"unknown modality {name!r} in forest_overrides") from None
            overrides[modality] = ForestParams.from_dict({**base.to_dict(), **params})
        kwargs["forest_overrides"] = overrides
        schema = kwargs.pop("feature_schema", None)
        kwargs["feature_schema"] = FeatureSchema.from_dict(schema) if schema else None
        for key in ("window_s", "hop_s", "holdout_fraction"):
            if key in kwargs:
                kwargs[key] = float(kwargs[key])
        for key in ("repeats", "seed"):
            if key in kwargs and not isinstance(kwargs[key], int):
                raise ParameterError(f"{key} must be an integer")
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ParameterError(str(exc)) from None


def load_run_config(path: Union[str, Path, None] = None) -> RunConfig:
    """Read a run config; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("engagefuse.data").joinpath("run_default.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"run config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ParameterError("run config must be a JSON object")
    return RunConfig.from_dict(data)


def shipped_config_path(name: str) -> Path:
    return Path(str(resources.files("engagefuse.data").joinpath(name)))
