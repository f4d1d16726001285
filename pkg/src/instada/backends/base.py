"""The call surface the pipeline uses for every model service.

Two implementations exist: :class:`~instada.backends.mock.MockBackends`
(deterministic, in-process) and :class:`~instada.backends.client.HttpBackends`
(talks the JSON protocol to remote services). Images cross this boundary as PNG
bytes so metadata and exact pixels survive unchanged.
"""
from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from ..maskops import RleMask
from .protocol import GenerationRequest


class BackendError(Exception):
    def __init__(self, message: str, request_id: str = ""):
        super().__init__(message)
        self.request_id = request_id


class Exhausted(BackendError):
    """Transient failures persisted past the retry budget."""

    def __init__(self, request_id: str, attempts: int, last_error: str = ""):
        super().__init__(f"request {request_id!r} failed after {attempts} attempts: {last_error}", request_id)
        self.attempts = attempts
        self.last_error = last_error


class ProtocolError(BackendError):
    pass


class Backends:
    def llm(self, task: str, payload: dict[str, Any], request_id: str = "") -> dict[str, Any]:
        raise NotImplementedError

    def generate(self, request: GenerationRequest) -> bytes:
        raise NotImplementedError

    def img2img(self, request: GenerationRequest) -> bytes:
        raise NotImplementedError

    def segment(self, image: bytes, request_id: str = "") -> np.ndarray:
        """Soft salience map in ``[0, 1]`` with the image's height and width."""
        raise NotImplementedError

    def segment_box(self, image: bytes, boxes: Sequence[Sequence[float]], request_id: str = "") -> list[RleMask]:
        raise NotImplementedError

    def embed_image(self, image: bytes, seed: int = 0, request_id: str = "") -> np.ndarray:
        raise NotImplementedError

    def embed_text(self, text: str, seed: int = 0, request_id: str = "") -> np.ndarray:
        raise NotImplementedError

    def caption(self, image: bytes, request_id: str = "") -> str:
        raise NotImplementedError

    def edge(self, image: bytes, request_id: str = "") -> np.ndarray:
        raise NotImplementedError

    def complexity(self, image: bytes, request_id: str = "") -> float:
        raise NotImplementedError


def unit_vector(values: Sequence[float], request_id: str = "", tol: float = 1e-5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if not np.isfinite(n) or n == 0.0:
        raise ProtocolError("embedding has zero or non-finite norm", request_id)
    if abs(n - 1.0) > tol:
        v = v / n
    return v
