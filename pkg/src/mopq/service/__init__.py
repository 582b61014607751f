"""FastAPI application factory."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import (ConfigError, DataFormatError, DegenerateInputError,
                      NumericError, UsageError)


def create_app() -> FastAPI:
    from . import routes

    app = FastAPI(title="mopq", description="Matching-oriented product quantization service")
    app.include_router(routes.router)

    def _handler(kind: str):
        def handle(request: Request, exc: Exception) -> JSONResponse:
            return JSONResponse(status_code=400,
                                content={"kind": kind, "message": str(exc)})
        return handle

    for exc_type in (UsageError, ConfigError):
        app.add_exception_handler(exc_type, _handler("usage"))
    for exc_type in (DataFormatError, DegenerateInputError):
        app.add_exception_handler(exc_type, _handler("data"))
    app.add_exception_handler(NumericError, _handler("numeric"))
    return app
