"""HTTP client for the model-service protocol, with bounded retries."""
from __future__ import annotations

import logging
import threading
import time
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np
from pydantic import ValidationError

from ..maskops import MaskFormatError, RleMask, png_size, png_to_gray
from .base import Backends, BackendError, Exhausted, ProtocolError, unit_vector
from .protocol import (
    RESPONSE_MODELS,
    BackendEndpoint,
    BoxSegmentRequest,
    EmbedImageRequest,
    EmbedTextRequest,
    GenerationRequest,
    ImageRequest,
    LLMRequest,
    Role,
    b64decode,
    b64encode,
)

log = logging.getLogger(__name__)

_semaphores: dict[tuple[str, int], threading.BoundedSemaphore] = {}
_sem_lock = threading.Lock()


def _semaphore(endpoint: BackendEndpoint) -> threading.BoundedSemaphore:
    key = (endpoint.url, endpoint.max_in_flight)
    with _sem_lock:
        sem = _semaphores.get(key)
        if sem is None:
            sem = _semaphores[key] = threading.BoundedSemaphore(endpoint.max_in_flight)
        return sem


def invoke(
    endpoint: BackendEndpoint,
    request,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
):
    """POST ``request`` to the endpoint and decode the role's response model.

    Timeouts, transport errors and 5xx responses are retried up to
    ``endpoint.max_retries`` times with exponential backoff; 4xx responses and
    undecodable bodies raise :class:`ProtocolError` immediately.
    """
    response_model = RESPONSE_MODELS[endpoint.role]
    body = request.model_dump(mode="json")
    request_id = getattr(request, "request_id", "")
    own_client = client is None
    if own_client:
        client = httpx.Client()
    attempts = endpoint.max_retries + 1
    last_error = ""
    try:
        for attempt in range(attempts):
            try:
                with _semaphore(endpoint):
                    resp = client.post(endpoint.url, json=body, timeout=endpoint.timeout)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise ProtocolError(
                        f"{endpoint.role.value} rejected request: HTTP {resp.status_code} {resp.text[:200]}",
                        request_id,
                    )
                else:
                    try:
                        return response_model.model_validate(resp.json())
                    except (ValueError, ValidationError) as exc:
                        raise ProtocolError(f"malformed {endpoint.role.value} response: {exc}", request_id) from exc
            if attempt + 1 < attempts:
                delay = endpoint.backoff_base * (2**attempt)
                log.debug("retrying %s after %s (attempt %d), sleeping %.2fs", request_id, last_error, attempt + 1, delay)
                if delay > 0:
                    sleep(delay)
        raise Exhausted(request_id, attempts, last_error)
    finally:
        if own_client:
            client.close()


class HttpBackends(Backends):
    def __init__(
        self,
        endpoints: Mapping[Role, BackendEndpoint],
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoints = dict(endpoints)
        self.client = client or httpx.Client()
        self.sleep = sleep

    def _call(self, role: Role, request):
        endpoint = self.endpoints.get(role)
        if endpoint is None:
            raise BackendError(f"no endpoint configured for role {role.value}", getattr(request, "request_id", ""))
        return invoke(endpoint, request, self.client, self.sleep)

    def llm(self, task: str, payload: dict[str, Any], request_id: str = "") -> dict[str, Any]:
        return self._call(Role.TEXT_GEN, LLMRequest(task=task, payload=payload, request_id=request_id)).result

    def generate(self, request: GenerationRequest) -> bytes:
        return b64decode(self._call(Role.TEXT2IMAGE, request).image)

    def img2img(self, request: GenerationRequest) -> bytes:
        return b64decode(self._call(Role.CONTROLLED_IMG2IMG, request).image)

    def segment(self, image: bytes, request_id: str = "") -> np.ndarray:
        resp = self._call(Role.SALIENT_SEGMENT, ImageRequest(image=b64encode(image), request_id=request_id))
        soft = png_to_gray(b64decode(resp.image))
        if soft.shape != png_size(image):
            raise ProtocolError(f"salience map shape {soft.shape} does not match image", request_id)
        return soft

    def segment_box(self, image: bytes, boxes: Sequence[Sequence[float]], request_id: str = "") -> list[RleMask]:
        req = BoxSegmentRequest(image=b64encode(image), boxes=[tuple(b) for b in boxes], request_id=request_id)
        resp = self._call(Role.BOX_PROMPT_SEGMENT, req)
        if len(resp.masks) != len(boxes):
            raise ProtocolError(f"expected {len(boxes)} masks, got {len(resp.masks)}", request_id)
        size = png_size(image)
        out = []
        for m in resp.masks:
            try:
                rle = RleMask.from_coco({"size": list(m.size), "counts": m.counts})
            except MaskFormatError as exc:
                raise ProtocolError(f"bad mask: {exc}", request_id) from exc
            if rle.size != size:
                raise ProtocolError(f"mask size {rle.size} does not match image {size}", request_id)
            out.append(rle)
        return out

    def embed_image(self, image: bytes, seed: int = 0, request_id: str = "") -> np.ndarray:
        resp = self._call(Role.EMBED_IMAGE, EmbedImageRequest(image=b64encode(image), seed=seed, request_id=request_id))
        return unit_vector(resp.values, request_id)

    def embed_text(self, text: str, seed: int = 0, request_id: str = "") -> np.ndarray:
        resp = self._call(Role.EMBED_TEXT, EmbedTextRequest(text=text, seed=seed, request_id=request_id))
        return unit_vector(resp.values, request_id)

    def caption(self, image: bytes, request_id: str = "") -> str:
        return self._call(Role.CAPTION, ImageRequest(image=b64encode(image), request_id=request_id)).text

    def edge(self, image: bytes, request_id: str = "") -> np.ndarray:
        resp = self._call(Role.EDGE_DETECT, ImageRequest(image=b64encode(image), request_id=request_id))
        return png_to_gray(b64decode(resp.image))

    def complexity(self, image: bytes, request_id: str = "") -> float:
        return self._call(Role.COMPLEXITY_SCORE, ImageRequest(image=b64encode(image), request_id=request_id)).score
