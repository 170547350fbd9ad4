"""HTTP surface of the gateway: ``/v1/assess``, ``/v1/complete``, ``/healthz``."""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from ..mechanism import OutOfVocabularyError
from .service import Gateway, GatewayError, TaskRequest


def create_app(gateway: Gateway) -> FastAPI:
    app = FastAPI(title="dxgate", version="0.1.0")
    app.state.gateway = gateway

    def _failure(exc: Exception):
        if isinstance(exc, OutOfVocabularyError):
            return JSONResponse(status_code=422, content={"error": str(exc), "position": exc.position})
        if isinstance(exc, GatewayError):
            body = {"error": str(exc)}
            if exc.decision is not None:
                body["decision"] = exc.decision.as_dict()
            if exc.fallback is not None:
                body["fallback"] = exc.fallback
            return JSONResponse(status_code=exc.status, content=body)
        raise exc

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "embedding_model": gateway.model.name,
            "vocab_size": len(gateway.model),
            "regressor_features": list(gateway.regressor.feature_names),
            "tau": gateway.tau,
        }

    @app.post("/v1/assess")
    def assess(req: TaskRequest):
        try:
            gd = gateway.assess(req)
        except (OutOfVocabularyError, GatewayError) as exc:
            return _failure(exc)
        return {
            "features": gd.features.as_dict(),
            "predicted_e": gd.predicted_e,
            "tau": gd.tau,
            "would_forward": gd.decision == "forward",
            "sanitized_prompt": gd.sanitized_prompt,
            "cache_hit": gd.cache_hit,
            "flags": gd.flags,
        }

    @app.post("/v1/complete")
    def complete(req: TaskRequest):
        try:
            gd = gateway.handle_request(req)
        except (OutOfVocabularyError, GatewayError) as exc:
            return _failure(exc)
        return gd.as_dict()

    return app
