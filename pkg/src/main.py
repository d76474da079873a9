from fastapi import FastAPI, Request, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
import time
from contextlib import asynccontextmanager

from src.api.detect import router as detect_router
from src.api.pipeline import router as pipeline_router
from src.api.logs import router as logs_router
from src.mcp.endpoints import router as mcp_router
from src.utils.logging import logger, audit_logger
from src.core.detector_service import checkpoint_available, get_checkpoint_path, reset_detector

TITLE = "BirdSwin Server"
VERSION = "1.0.0"
DESCRIPTION = "Small-bird detection service: detection on PNG uploads, synthetic data, evaluation and hard-negative mining"


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"Starting {TITLE}...")
    if checkpoint_available():
        logger.info(f"Serving checkpoint {get_checkpoint_path()}")
    else:
        logger.warning(f"No checkpoint at {get_checkpoint_path()} - detection endpoints will return 503")

    yield

    reset_detector()
    logger.info(f"Shutting down {TITLE}...")


app = FastAPI(
    title=TITLE,
    description=DESCRIPTION,
    version=VERSION,
    docs_url="/docs",
    redoc_url="/redoc",
    lifespan=lifespan,
)


app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.middleware("http")
async def log_requests(request: Request, call_next):
    start_time = time.time()
    parameters = {
        "method": request.method,
        "query": str(request.query_params),
        "client_host": request.client.host if request.client else "unknown",
    }
    try:
        response = await call_next(request)
    except Exception as e:
        audit_logger.log_operation(
            operation="http_request",
            endpoint=str(request.url.path),
            parameters=parameters,
            success=False,
            execution_time_ms=(time.time() - start_time) * 1000,
            result_summary={},
            error_message=str(e),
        )
        raise

    process_time = (time.time() - start_time) * 1000
    audit_logger.log_operation(
        operation="http_request",
        endpoint=str(request.url.path),
        parameters=parameters,
        success=response.status_code < 400,
        execution_time_ms=process_time,
        result_summary={"status_code": response.status_code, "response_time_ms": round(process_time, 2)},
    )
    return response


@app.exception_handler(HTTPException)
async def http_exception_handler(request: Request, exc: HTTPException):
    return JSONResponse(
        status_code=exc.status_code,
        content={
            "error": exc.detail,
            "status_code": exc.status_code,
            "timestamp": time.time(),
        },
    )


@app.exception_handler(Exception)
async def general_exception_handler(request: Request, exc: Exception):
    logger.error(f"Unhandled exception: {str(exc)}")
    return JSONResponse(
        status_code=500,
        content={
            "error": "Internal server error",
            "status_code": 500,
            "timestamp": time.time(),
        },
    )


@app.get("/")
async def root():
    return {
        "message": TITLE,
        "version": VERSION,
        "description": DESCRIPTION,
        "endpoints": {
            "detect": "/detect/image",
            "synth": "/pipeline/synth",
            "evaluate": "/pipeline/evaluate",
            "mine": "/pipeline/mine-hard-negatives",
            "logs": "/logs",
        },
    }


@app.get("/health")
async def health_check():
    detector_ready = checkpoint_available()
    return {
        "status": "healthy" if detector_ready else "degraded",
        "timestamp": time.time(),
        "services": {"detector": detector_ready, "pipeline": True},
    }


app.include_router(detect_router, prefix="/detect", tags=["detection"])
app.include_router(pipeline_router, prefix="/pipeline", tags=["pipeline"])
app.include_router(logs_router, prefix="/logs", tags=["logging"])
app.include_router(mcp_router, prefix="/mcp", tags=["MCP"])


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host="0.0.0.0", port=8000)
