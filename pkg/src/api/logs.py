from fastapi import APIRouter, Query
from pydantic import BaseModel
from typing import Optional, List, Dict, Any
import time

from src.utils.logging import audit_logger, logger


router = APIRouter()


class LogsResponse(BaseModel):
    logs: List[Dict[str, Any]]
    total_count: int
    filtered_count: int
    query_time_ms: float


class StatsResponse(BaseModel):
    stats: Dict[str, Any]
    query_time_ms: float


class ClearResponse(BaseModel):
    cleared: int
    success: bool = True


@router.get("/", response_model=LogsResponse)
async def get_logs(
    limit: Optional[int] = Query(default=50, ge=1, le=1000, description="Maximum number of logs to return"),
    operation: Optional[str] = Query(default=None, description="Filter by operation, e.g. detect_birds or train.base"),
    endpoint: Optional[str] = Query(default=None, description="Filter by endpoint prefix, e.g. /pipeline or cli"),
    success_only: Optional[bool] = Query(default=None, description="Filter by success status"),
):
    start_time = time.time()
    total_count = len(audit_logger.get_logs())
    filtered_logs = audit_logger.get_logs(
        limit=limit, operation=operation, success_only=success_only, endpoint=endpoint
    )
    query_time = (time.time() - start_time) * 1000
    logger.info(f"Logs query returned {len(filtered_logs)} of {total_count} entries in {query_time:.2f}ms")
    return LogsResponse(
        logs=filtered_logs,
        total_count=total_count,
        filtered_count=len(filtered_logs),
        query_time_ms=round(query_time, 2),
    )


@router.get("/stats", response_model=StatsResponse)
async def get_log_stats():
    start_time = time.time()
    stats = audit_logger.get_stats()
    return StatsResponse(stats=stats, query_time_ms=round((time.time() - start_time) * 1000, 2))


@router.delete("/", response_model=ClearResponse)
async def clear_logs():
    cleared = len(audit_logger.get_logs())
    audit_logger.clear_logs()
    logger.info(f"Cleared {cleared} audit log entries")
    return ClearResponse(cleared=cleared)
