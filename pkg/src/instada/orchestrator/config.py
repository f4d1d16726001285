"""Pipeline configuration: one YAML (or JSON) file, versioned, unknown keys rejected."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..backends.protocol import DEFAULT_CONTROL_STRENGTH, PROFILE_A, PROFILE_B, BackendEndpoint, Role

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "INSTADA_OUTPUT_ROOT"

STAGE_ROLES: dict[str, tuple[Role, ...]] = {
    "tagent": (Role.TEXT_GEN, Role.TEXT2IMAGE, Role.SALIENT_SEGMENT, Role.EMBED_IMAGE, Role.EMBED_TEXT),
    "iagent": (
        Role.CAPTION,
        Role.EDGE_DETECT,
        Role.COMPLEXITY_SCORE,
        Role.CONTROLLED_IMG2IMG,
        Role.BOX_PROMPT_SEGMENT,
        Role.EMBED_IMAGE,
        Role.EMBED_TEXT,
    ),
    "augment": (),
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ThresholdsConfig(_Section):
    text: float = Field(0.21, ge=-1.0, le=1.0)
    image: float = Field(0.6, ge=-1.0, le=1.0)


class GeneratorProfile(_Section):
    name: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    guidance: float = Field(gt=0)
    steps: int = Field(gt=0)


def _default_profiles() -> list[GeneratorProfile]:
    return [GeneratorProfile(name="A", **PROFILE_A), GeneratorProfile(name="B", **PROFILE_B)]


class TAgentConfig(_Section):
    prompts_per_category: int = Field(2, ge=1)
    thresholds: ThresholdsConfig = ThresholdsConfig()
    max_attempts: int = Field(3, ge=1)
    parse_retries: int = Field(2, ge=0)
    profiles: list[GeneratorProfile] = Field(default_factory=_default_profiles, min_length=1)
    text_template: str = "a photo of a {category}"
    centroid_max_instances: int = Field(50, ge=1)
    binarize_threshold: float = Field(0.5, gt=0.0, le=1.0)
    category_ids: Optional[list[int]] = None
    workers: int = Field(8, ge=1)
    seed: Optional[int] = None

    @field_validator("text_template")
    @classmethod
    def _has_category(cls, v: str) -> str:
        if "{category}" not in v:
            raise ValueError("template must contain '{category}'")
        return v


class IAgentConfig(_Section):
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    s_min: float = Field(0.3, ge=0.0, le=1.0)
    s_max: float = Field(0.8, ge=0.0, le=1.0)
    control_strength: float = Field(DEFAULT_CONTROL_STRENGTH, ge=0.0, le=1.0)
    k: float = Field(20.0, gt=0.0, le=100.0)
    clip_template: str = "a photo of a {category}"
    steps: int = Field(PROFILE_A["steps"], gt=0)
    guidance: float = Field(PROFILE_A["guidance"], gt=0)
    workers: int = Field(8, ge=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _ordered_strengths(self):
        if self.s_min > self.s_max:
            raise ValueError("s_min must not exceed s_max")
        return self

    @field_validator("clip_template")
    @classmethod
    def _has_category(cls, v: str) -> str:
        if "{category}" not in v:
            raise ValueError("template must contain '{category}'")
        return v


class AugmentConfig(_Section):
    n_min: int = Field(1, ge=0)
    n_max: int = Field(6, ge=0)
    scale_range: tuple[float, float] = (0.5, 1.5)
    pool_mix: float = Field(0.5, ge=0.0, le=1.0)
    occlusion_drop_ratio: float = Field(0.3, ge=0.0, le=1.0)
    workers: int = Field(8, ge=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _ranges(self):
        if self.n_min > self.n_max:
            raise ValueError("n_min must not exceed n_max")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        return self


class MockWorldConfig(_Section):
    dims: int = Field(64, ge=2)
    similarity_floor: float = Field(0.7, ge=0.0, lt=1.0)
    defect_rate: float = Field(0.0, ge=0.0, le=1.0)
    max_shift: int = Field(0, ge=0)
    erase_rate: float = Field(0.0, ge=0.0, le=1.0)
    box_margin: int = Field(4, ge=0)


class EndpointConfig(_Section):
    base_url: str
    timeout: float = Field(60.0, gt=0)
    max_retries: int = Field(3, ge=0)
    max_in_flight: int = Field(4, ge=1)
    backoff_base: float = Field(0.5, ge=0)


class PipelineConfig(_Section):
    version: int = CONFIG_VERSION
    dataset: str
    output_root: str = "instada_out"
    seed: int = 0
    embed_seed: int = 0
    mock: bool = False
    mock_world: MockWorldConfig = MockWorldConfig()
    endpoints: dict[Role, EndpointConfig] = Field(default_factory=dict)
    tagent: TAgentConfig = TAgentConfig()
    iagent: IAgentConfig = IAgentConfig()
    augment: AugmentConfig = AugmentConfig()

    @field_validator("version")
    @classmethod
    def _known_version(cls, v: int) -> int:
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v}; expected {CONFIG_VERSION}")
        return v

    def endpoint(self, role: Role) -> BackendEndpoint:
        e = self.endpoints[role]
        return BackendEndpoint(role=role, **e.model_dump())

    def missing_roles(self, stages: tuple[str, ...]) -> list[str]:
        if self.mock:
            return []
        needed = {r for s in stages for r in STAGE_ROLES[s]}
        return sorted(r.value for r in needed if r not in self.endpoints)

    def stage_seed(self, stage: str) -> int:
        own = getattr(self, stage).seed
        return self.seed if own is None else own

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def output_path(self) -> Path:
        return Path(self.output_root)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def parse_config(data: dict, base_dir: Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    data = dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if env_root:
        data["output_root"] = env_root
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    if base_dir is not None:
        updates = {}
        for field in ("dataset", "output_root"):
            p = Path(getattr(cfg, field))
            if not p.is_absolute():
                updates[field] = str((base_dir / p).resolve())
        cfg = cfg.model_copy(update=updates)
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    return parse_config(data if data is not None else {}, base_dir=path.parent, overrides=overrides)
