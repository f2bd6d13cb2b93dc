"""FastAPI application implementing the logprob wire protocol.

Endpoint paths, request fields, and response fields are bit-identical to
the protocol the engine's toy server speaks; both must pass the same
golden contract checks.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .service import ContextTooLongError, InvalidTokenError, ModelService


class NextLogprobsRequest(BaseModel):
    context: str
    top_k: int | None = None


class ScoreTokensRequest(BaseModel):
    context: str
    token_ids: list[int]


def build_app(service: ModelService) -> FastAPI:
    app = FastAPI(title="logprob-adapter", docs_url=None, redoc_url=None)

    def entry(token_id: int, logprob: float) -> dict:
        return {
            "token_id": token_id,
            "text": service.vocab_texts[token_id],
            "logprob": logprob,
        }

    @app.get("/v1/tokenizer")
    def tokenizer_info():
        return {
            "vocab_size": service.vocab_size,
            "vocab": service.vocab_texts,
            "name": service.name,
        }

    @app.post("/v1/next_logprobs")
    def next_logprobs(req: NextLogprobsRequest):
        if req.top_k is not None and req.top_k < 1:
            raise HTTPException(422, "top_k must be a positive integer or null")
        try:
            if req.top_k is not None:
                entries = [entry(i, lp) for i, lp in service.top_k(req.context, req.top_k)]
                return {"entries": entries, "complete": False}
            logprobs = service.next_token_logprobs(req.context)
            entries = [entry(i, float(lp)) for i, lp in enumerate(logprobs)]
            return {"entries": entries, "complete": True}
        except ContextTooLongError as exc:
            raise HTTPException(413, str(exc)) from exc
        except InvalidTokenError as exc:
            raise HTTPException(422, str(exc)) from exc

    @app.post("/v1/score_tokens")
    def score_tokens(req: ScoreTokensRequest):
        try:
            scored = service.score(req.context, req.token_ids)
        except ContextTooLongError as exc:
            raise HTTPException(413, str(exc)) from exc
        except InvalidTokenError as exc:
            raise HTTPException(422, str(exc)) from exc
        return {"entries": [entry(i, lp) for i, lp in scored]}

    return app
