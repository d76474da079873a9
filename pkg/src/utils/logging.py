import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from threading import Lock
from typing import Any, Dict, Iterator, List, Optional

CONTENT_KEYS = {"content", "image", "image_content", "image_b64", "file"}


@dataclass
class OperationLog:
    timestamp: str
    operation: str
    endpoint: str
    parameters: Dict[str, Any]
    success: bool
    execution_time_ms: float
    result_summary: Dict[str, Any]
    error_message: Optional[str] = None


@dataclass
class TrackedOperation:
    """Mutable handle yielded by InMemoryLogger.track; fill result_summary before exit."""

    result_summary: Dict[str, Any] = field(default_factory=dict)


class InMemoryLogger:
    def __init__(self, max_logs: int = 1000):
        self.logs: List[OperationLog] = []
        self.max_logs = max_logs
        self._lock = Lock()

    def log_operation(
        self,
        operation: str,
        endpoint: str,
        parameters: Dict[str, Any],
        success: bool,
        execution_time_ms: float,
        result_summary: Dict[str, Any],
        error_message: Optional[str] = None
    ):
        log_entry = OperationLog(
            timestamp=datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            operation=operation,
            endpoint=endpoint,
            parameters=self._sanitize_parameters(parameters),
            success=success,
            execution_time_ms=round(execution_time_ms, 3),
            result_summary=result_summary,
            error_message=error_message
        )

        with self._lock:
            self.logs.append(log_entry)
            if len(self.logs) > self.max_logs:
                self.logs = self.logs[-self.max_logs:]

    @contextmanager
    def track(self, operation: str, endpoint: str, parameters: Dict[str, Any]) -> Iterator[TrackedOperation]:
        """Record one operation with its wall time; failures are logged and re-raised."""
        handle = TrackedOperation()
        start = time.time()
        try:
            yield handle
        except Exception as e:
            self.log_operation(operation, endpoint, parameters, False, (time.time() - start) * 1000,
                               handle.result_summary, error_message=f"{type(e).__name__}: {e}")
            raise
        self.log_operation(operation, endpoint, parameters, True, (time.time() - start) * 1000,
                           handle.result_summary)

    def get_logs(
        self,
        limit: Optional[int] = None,
        operation: Optional[str] = None,
        success_only: Optional[bool] = None,
        endpoint: Optional[str] = None,
    ) -> List[Dict[str, Any]]:
        with self._lock:
            filtered_logs = self.logs.copy()

        if operation:
            filtered_logs = [log for log in filtered_logs if log.operation == operation]
        if endpoint:
            filtered_logs = [log for log in filtered_logs if log.endpoint.startswith(endpoint)]
        if success_only is not None:
            filtered_logs = [log for log in filtered_logs if log.success == success_only]

        filtered_logs.sort(key=lambda x: x.timestamp, reverse=True)
        if limit:
            filtered_logs = filtered_logs[:limit]
        return [asdict(log) for log in filtered_logs]

    def get_stats(self) -> Dict[str, Any]:
        with self._lock:
            logs = self.logs.copy()

        if not logs:
            return {
                "total_operations": 0,
                "successful_operations": 0,
                "failed_operations": 0,
                "success_rate": 0,
                "operations_by_type": {},
                "average_execution_time_ms": 0,
                "slowest_operation": None,
            }

        successful = sum(1 for log in logs if log.success)
        by_type: Dict[str, int] = {}
        for log in logs:
            by_type[log.operation] = by_type.get(log.operation, 0) + 1
        slowest = max(logs, key=lambda log: log.execution_time_ms)

        return {
            "total_operations": len(logs),
            "successful_operations": successful,
            "failed_operations": len(logs) - successful,
            "success_rate": successful / len(logs),
            "operations_by_type": by_type,
            "average_execution_time_ms": round(sum(log.execution_time_ms for log in logs) / len(logs), 2),
            "slowest_operation": {"operation": slowest.operation, "execution_time_ms": slowest.execution_time_ms},
        }

    def clear_logs(self):
        with self._lock:
            self.logs.clear()

    def _sanitize_parameters(self, parameters: Dict[str, Any]) -> Dict[str, Any]:
        sanitized = {}
        for key, value in parameters.items():
            if isinstance(value, (bytes, bytearray)):
                sanitized[key] = f"<bytes:{len(value)}>"
            elif key in CONTENT_KEYS:
                sanitized[key] = f"<content_length:{len(value)}>" if isinstance(value, str) else "<content_provided>"
            elif isinstance(value, (str, int, float, bool)) or value is None:
                sanitized[key] = value
            else:
                sanitized[key] = repr(value)
        return sanitized


def setup_logging(level: int = logging.INFO) -> logging.Logger:
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler()]
    )
    return logging.getLogger("birdswin")


logger = setup_logging()
audit_logger = InMemoryLogger()
