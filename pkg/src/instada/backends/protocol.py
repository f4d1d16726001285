"""Wire models for the JSON-over-HTTP model-service protocol.

Every role is a ``POST`` to ``base_url + path`` with a JSON body. Images travel
as base64-encoded PNG strings. Each request carries a ``request_id`` that the
server echoes back so the caller can match responses and keep checkpoint
bookkeeping.
"""
from __future__ import annotations

import base64
from enum import Enum
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Role(str, Enum):
    TEXT_GEN = "TextGen"
    TEXT2IMAGE = "Text2Image"
    CONTROLLED_IMG2IMG = "ControlledImg2Img"
    SALIENT_SEGMENT = "SalientSegment"
    BOX_PROMPT_SEGMENT = "BoxPromptSegment"
    EMBED_IMAGE = "EmbedImage"
    EMBED_TEXT = "EmbedText"
    CAPTION = "Caption"
    EDGE_DETECT = "EdgeDetect"
    COMPLEXITY_SCORE = "ComplexityScore"


ROLE_PATHS: dict[Role, str] = {
    Role.TEXT_GEN: "/llm",
    Role.TEXT2IMAGE: "/generate",
    Role.CONTROLLED_IMG2IMG: "/img2img",
    Role.SALIENT_SEGMENT: "/segment",
    Role.BOX_PROMPT_SEGMENT: "/segment_box",
    Role.EMBED_IMAGE: "/embed_image",
    Role.EMBED_TEXT: "/embed_text",
    Role.CAPTION: "/caption",
    Role.EDGE_DETECT: "/edge",
    Role.COMPLEXITY_SCORE: "/complexity",
}

# Text2Image profiles: A is the 512px Flux-style generator, B the 1024px SD3.5-style one.
DEFAULT_STEPS = 8
PROFILE_A = {"width": 512, "height": 512, "guidance": 9.5, "steps": DEFAULT_STEPS}
PROFILE_B = {"width": 1024, "height": 1024, "guidance": 3.5, "steps": DEFAULT_STEPS}
DEFAULT_CONTROL_STRENGTH = 0.7


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(data: str) -> bytes:
    return base64.b64decode(data.encode("ascii"), validate=True)


class _Wire(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    request_id: str = ""


class GenerationRequest(_Wire):
    prompt: str
    width: int = Field(PROFILE_A["width"], gt=0)
    height: int = Field(PROFILE_A["height"], gt=0)
    steps: int = Field(DEFAULT_STEPS, gt=0)
    guidance: float = Field(PROFILE_A["guidance"], gt=0)
    seed: int = Field(0, ge=-(2**63), lt=2**64)
    init_image: Optional[str] = None
    control_image: Optional[str] = None
    control_strength: Optional[float] = Field(None, ge=0.0, le=1.0)
    denoise_strength: Optional[float] = Field(None, ge=0.0, le=1.0)
    # weight used when the control edge map was fused; informational for the backend
    edge_alpha: Optional[float] = Field(None, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _paired_fields(self):
        if (self.init_image is None) != (self.denoise_strength is None):
            raise ValueError("init_image and denoise_strength must be given together")
        if (self.control_image is None) != (self.control_strength is None):
            raise ValueError("control_image and control_strength must be given together")
        return self


class ImageRequest(_Wire):
    image: str


class BoxSegmentRequest(_Wire):
    image: str
    boxes: list[tuple[float, float, float, float]]


class TextRequest(_Wire):
    text: str


class EmbedImageRequest(_Wire):
    image: str
    seed: int = 0


class EmbedTextRequest(_Wire):
    text: str
    seed: int = 0


class LLMRequest(_Wire):
    task: Literal["elements", "prompts", "rethink"]
    payload: dict[str, Any]


class ImageResponse(_Wire):
    image: str


class RleWire(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    size: tuple[int, int]
    counts: str


class MasksResponse(_Wire):
    masks: list[RleWire]


class EmbeddingResponse(_Wire):
    dims: int = Field(gt=0)
    values: list[float]

    @model_validator(mode="after")
    def _dims_match(self):
        if len(self.values) != self.dims:
            raise ValueError(f"expected {self.dims} values, got {len(self.values)}")
        return self


class TextResponse(_Wire):
    text: str


class ScoreResponse(_Wire):
    score: float


class LLMResponse(_Wire):
    result: dict[str, Any]


REQUEST_MODELS: dict[Role, type[_Wire]] = {
    Role.TEXT_GEN: LLMRequest,
    Role.TEXT2IMAGE: GenerationRequest,
    Role.CONTROLLED_IMG2IMG: GenerationRequest,
    Role.SALIENT_SEGMENT: ImageRequest,
    Role.BOX_PROMPT_SEGMENT: BoxSegmentRequest,
    Role.EMBED_IMAGE: EmbedImageRequest,
    Role.EMBED_TEXT: EmbedTextRequest,
    Role.CAPTION: ImageRequest,
    Role.EDGE_DETECT: ImageRequest,
    Role.COMPLEXITY_SCORE: ImageRequest,
}

RESPONSE_MODELS: dict[Role, type[_Wire]] = {
    Role.TEXT_GEN: LLMResponse,
    Role.TEXT2IMAGE: ImageResponse,
    Role.CONTROLLED_IMG2IMG: ImageResponse,
    Role.SALIENT_SEGMENT: ImageResponse,
    Role.BOX_PROMPT_SEGMENT: MasksResponse,
    Role.EMBED_IMAGE: EmbeddingResponse,
    Role.EMBED_TEXT: EmbeddingResponse,
    Role.CAPTION: TextResponse,
    Role.EDGE_DETECT: ImageResponse,
    Role.COMPLEXITY_SCORE: ScoreResponse,
}


class BackendEndpoint(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    role: Role
    base_url: str
    timeout: float = Field(60.0, gt=0)
    max_retries: int = Field(3, ge=0)
    max_in_flight: int = Field(4, ge=1)
    backoff_base: float = Field(0.5, ge=0)

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + ROLE_PATHS[self.role]
