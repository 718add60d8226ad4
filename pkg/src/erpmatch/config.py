"""Run configuration: built-in defaults, then a YAML/JSON file, then overrides.

Unknown keys are rejected at every level so typos fail loudly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import features, objectives, refine, ssam
from .errors import MalformedFile
from .sphere import ErpGridSpec
from .synth import SceneSpec


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSection(_Section):
    width: int = 640
    height: int = 320

    @model_validator(mode="after")
    def _erp(self):
        ErpGridSpec(self.width, self.height)
        return self

    def spec(self) -> ErpGridSpec:
        return ErpGridSpec(self.width, self.height)


class ExtractorSection(_Section):
    name: Literal["tangent", "patch", "gradient"] = "tangent"
    patch: int = Field(5, ge=1)
    spacing: float = Field(1.0, gt=0)
    window: int = Field(5, ge=1)
    bins: int = Field(8, ge=2)
    layout: Literal["pooled", "concat"] = "pooled"

    def build(self) -> features.FeatureExtractor:
        if self.name == "tangent":
            return features.TangentPatchExtractor(patch=self.patch, spacing=self.spacing)
        if self.name == "patch":
            return features.PatchExtractor(patch=self.patch)
        return features.GradientExtractor(window=self.window, bins=self.bins, layout=self.layout)


class GpSection(_Section):
    tau: float = Field(5.0, gt=0)
    epsilon: float = Field(1e-6, gt=0)
    sigma_n: float = Field(0.1, gt=0)
    embed_dim: int = Field(160, ge=1)


class EmbeddingSection(_Section):
    seed: int = 42
    scale: float = Field(2.0, gt=0)
    equivariant: bool = True
    decoder_temperature: float = Field(0.02, gt=0)


class RefinerSection(_Section):
    patch_radius: Union[int, tuple[int, ...]] = 2
    temperature: float = Field(100.0, gt=0)
    strides: tuple[int, ...] = (16, 8, 4, 2, 1)
    geodesic: bool = False
    min_cos_lat: float = Field(0.1, gt=0, le=1)
    certainty_gain: float = 8.0
    certainty_center: float = 0.7
    iterations: int = Field(1, ge=1)

    @field_validator("strides")
    @classmethod
    def _strides(cls, v):
        if not v or any(s not in features.STRIDES[1:] for s in v) or list(v) != sorted(v, reverse=True):
            raise ValueError(f"strides must be a decreasing subset of {features.STRIDES[1:]}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        refine.RefinerConfig(**self.model_dump())
        return self


class LossSection(_Section):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    alpha: float = Field(0.05, gt=0)
    lam: float = Field(0.01, ge=0, alias="lambda")
    signed_cosine: bool = True
    clamp: float = Field(objectives.PROB_CLAMP, gt=0, lt=0.5)
    reduction: Literal["sum", "mean"] = "sum"


class SamplingSection(_Section):
    threshold: float = Field(0.8, ge=0, le=1)
    max_n: int = Field(5000, ge=8)


class RansacSection(_Section):
    iterations: int = Field(1000, ge=1)
    threshold_deg: float = Field(1.0, gt=0)
    refine: bool = True


class AugmentationSection(_Section):
    enabled: bool = False
    angle: float = 0.0


class SceneSection(_Section):
    """Synthetic pair generation: the room, the motion and how many pairs."""

    room_seed: int = 0
    baseline: float = Field(0.25, ge=0)
    rotation: float = 0.5
    tilt: float = 0.0
    supersample: int = Field(1, ge=1)
    pairs: int = Field(1, ge=1)
    spec: Optional[SceneSpec] = None


class RunConfig(_Section):
    seed: int = 0
    workers: int = Field(1, ge=1)
    grid: GridSection = GridSection()
    extractor: ExtractorSection = ExtractorSection()
    gp: GpSection = GpSection()
    embedding: EmbeddingSection = EmbeddingSection()
    refiner: RefinerSection = RefinerSection()
    loss: LossSection = LossSection()
    sampling: SamplingSection = SamplingSection()
    ransac: RansacSection = RansacSection()
    augmentation: AugmentationSection = AugmentationSection()
    scene: SceneSection = SceneSection()

    def coarse_matcher(self) -> ssam.CoarseMatcher:
        return ssam.CoarseMatcher(
            gp=ssam.GpConfig(**self.gp.model_dump()),
            embedding_seed=self.embedding.seed,
            embedding_scale=self.embedding.scale,
            equivariant_embedding=self.embedding.equivariant,
            decoder_temperature=self.embedding.decoder_temperature,
        )

    def refiner_config(self) -> refine.RefinerConfig:
        return refine.RefinerConfig(**self.refiner.model_dump())

    def loss_config(self) -> objectives.LossConfig:
        return objectives.LossConfig(**self.loss.model_dump())

    def echo(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending keys."""


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_override(item: str) -> dict:
    """``a.b.c=value`` into a nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    value: Any = yaml.safe_load(raw)
    for part in reversed(key.strip().split(".")):
        value = {part: value}
    return value


def load_config(path=None, overrides: Optional[list] = None, **flags) -> RunConfig:
    """Layer defaults, an optional config file, ``key=value`` overrides and flags.

    ``flags`` with value None are ignored, so unset CLI options keep the
    lower layers.
    """
    data: dict = {}
    if path is not None:
        data = _merge(data, read_config_file(path))
    for item in overrides or []:
        data = _merge(data, parse_override(item) if isinstance(item, str) else item)
    data = _merge(data, {k: v for k, v in flags.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from exc
