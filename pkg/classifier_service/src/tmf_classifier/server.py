"""HTTP inference endpoint: POST /predict with a basic-input text."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from tmf_classifier.model import Classifier


class PredictRequest(BaseModel):
    basic_input: str


def create_app(classifier: Classifier) -> FastAPI:
    app = FastAPI(title="technique classifier")

    @app.exception_handler(RequestValidationError)
    def malformed_body(request: Request, exc: RequestValidationError):
        # The contract is a plain 400 for any malformed request body.
        return JSONResponse(status_code=400, content={"detail": str(exc.errors())})

    @app.get("/health")
    def health():
        return {"status": "ok", "labels": len(classifier.label_space)}

    @app.post("/predict")
    def predict(request: PredictRequest):
        if not request.basic_input.strip():
            raise HTTPException(status_code=400, detail="basic_input must be non-empty")
        return {"scores": classifier.predict(request.basic_input)}

    return app


def serve(model_dir: str, host: str = "127.0.0.1", port: int = 8151) -> None:
    import uvicorn

    classifier = Classifier.load(model_dir)
    uvicorn.run(create_app(classifier), host=host, port=port)
