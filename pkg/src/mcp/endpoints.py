"""
MCP Endpoints - FastAPI router for MCP protocol endpoints
"""
import time
from datetime import datetime, timezone
from fastapi import APIRouter, HTTPException
from typing import Dict, Any

from .registry import get_tool_by_name, get_tools, get_tools_summary
from src.core.config import load_mcp_config
from src.core.detector_service import checkpoint_available, get_checkpoint_path


router = APIRouter()

SERVER_START_TIME = time.time()
SERVER_NAME = "BirdSwin"
SERVER_VERSION = "1.0.0"
DESCRIPTION = "Small-bird detection with a shifted-window transformer neck and center-point head"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


@router.get("/tools")
async def get_mcp_tools() -> Dict[str, Any]:
    """
    Get all available tools in MCP-compatible format
    """
    tools = get_tools()
    return {"tools": tools, "count": len(tools), "generated_at": _now()}


@router.get("/tools/{name}")
async def get_mcp_tool(name: str) -> Dict[str, Any]:
    try:
        return get_tool_by_name(name)
    except ValueError as e:
        raise HTTPException(status_code=404, detail=str(e))


@router.get("/manifest")
async def get_mcp_manifest() -> Dict[str, Any]:
    """
    Get MCP server manifest with protocol version and capabilities
    """
    try:
        mcp_config = load_mcp_config()
        return {
            "protocol_version": mcp_config["mcp_protocol_version"],
            "server_version": SERVER_VERSION,
            "server_name": SERVER_NAME,
            "description": DESCRIPTION,
            "features": mcp_config.get("features", []),
            "capabilities": {
                "tools": True,
                "logging": True,
                "detection": checkpoint_available(),
            },
            "tools_summary": get_tools_summary(),
            "generated_at": _now(),
        }
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Failed to generate manifest: {str(e)}")


@router.get("/status")
async def get_mcp_status() -> Dict[str, Any]:
    """
    Get MCP server status; detection is degraded until a checkpoint exists
    """
    detection_ready = checkpoint_available()
    tools = get_tools()
    unavailable = 0 if detection_ready else len([t for t in tools if "detection" in t["tags"]])
    return {
        "status": "healthy" if detection_ready else "degraded",
        "timestamp": _now(),
        "uptime_seconds": time.time() - SERVER_START_TIME,
        "services": {
            "detector": detection_ready,
            "checkpoint_path": str(get_checkpoint_path()),
            "fastapi": True,
        },
        "tools": {
            "total": len(tools),
            "available": len(tools) - unavailable,
            "disabled": unavailable,
        },
        "system": {
            "protocol_version": load_mcp_config()["mcp_protocol_version"],
            "server_version": SERVER_VERSION,
        },
    }


@router.get("/info")
async def get_mcp_info() -> Dict[str, Any]:
    """
    Get general information about the MCP server
    """
    return {
        "name": SERVER_NAME,
        "description": DESCRIPTION,
        "version": SERVER_VERSION,
        "protocol_version": load_mcp_config()["mcp_protocol_version"],
        "endpoints": {
            "tools": "/mcp/tools",
            "manifest": "/mcp/manifest",
            "status": "/mcp/status",
            "info": "/mcp/info",
        },
        "documentation": {"openapi": "/docs", "redoc": "/redoc"},
    }
