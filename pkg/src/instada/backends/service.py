"""FastAPI app serving any :class:`Backends` over the JSON protocol.

Run the deterministic mock world as a standalone model server with
``instada serve-mock``; real deployments put adapters to ComfyUI or other
inference servers behind the same routes.
"""
from __future__ import annotations

from fastapi import FastAPI, HTTPException

from ..maskops import gray_to_png
from .base import Backends
from .protocol import (
    BoxSegmentRequest,
    EmbeddingResponse,
    EmbedImageRequest,
    EmbedTextRequest,
    GenerationRequest,
    ImageRequest,
    ImageResponse,
    LLMRequest,
    LLMResponse,
    MasksResponse,
    RleWire,
    ScoreResponse,
    TextResponse,
    b64decode,
    b64encode,
)


def create_app(backends: Backends) -> FastAPI:
    app = FastAPI(title="instada model services")

    def guard(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, KeyError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/llm", response_model=LLMResponse)
    def llm(req: LLMRequest):
        result = guard(backends.llm, req.task, req.payload, req.request_id)
        return LLMResponse(request_id=req.request_id, result=result)

    @app.post("/generate", response_model=ImageResponse)
    def generate(req: GenerationRequest):
        return ImageResponse(request_id=req.request_id, image=b64encode(guard(backends.generate, req)))

    @app.post("/img2img", response_model=ImageResponse)
    def img2img(req: GenerationRequest):
        return ImageResponse(request_id=req.request_id, image=b64encode(guard(backends.img2img, req)))

    @app.post("/segment", response_model=ImageResponse)
    def segment(req: ImageRequest):
        soft = guard(backends.segment, b64decode(req.image), req.request_id)
        return ImageResponse(request_id=req.request_id, image=b64encode(gray_to_png(soft)))

    @app.post("/segment_box", response_model=MasksResponse)
    def segment_box(req: BoxSegmentRequest):
        masks = guard(backends.segment_box, b64decode(req.image), req.boxes, req.request_id)
        wire = [RleWire(**m.to_coco()) for m in masks]
        return MasksResponse(request_id=req.request_id, masks=wire)

    @app.post("/embed_image", response_model=EmbeddingResponse)
    def embed_image(req: EmbedImageRequest):
        v = guard(backends.embed_image, b64decode(req.image), req.seed, req.request_id)
        return EmbeddingResponse(request_id=req.request_id, dims=len(v), values=[float(x) for x in v])

    @app.post("/embed_text", response_model=EmbeddingResponse)
    def embed_text(req: EmbedTextRequest):
        v = guard(backends.embed_text, req.text, req.seed, req.request_id)
        return EmbeddingResponse(request_id=req.request_id, dims=len(v), values=[float(x) for x in v])

    @app.post("/caption", response_model=TextResponse)
    def caption(req: ImageRequest):
        return TextResponse(request_id=req.request_id, text=guard(backends.caption, b64decode(req.image), req.request_id))

    @app.post("/edge", response_model=ImageResponse)
    def edge(req: ImageRequest):
        e = guard(backends.edge, b64decode(req.image), req.request_id)
        return ImageResponse(request_id=req.request_id, image=b64encode(gray_to_png(e)))

    @app.post("/complexity", response_model=ScoreResponse)
    def complexity(req: ImageRequest):
        return ScoreResponse(request_id=req.request_id, score=guard(backends.complexity, b64decode(req.image), req.request_id))

    return app

