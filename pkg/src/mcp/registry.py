"""
MCP Tool Registry - Static mapping of the service tools and their schemas
"""
from typing import Dict, List, Any

from src.api.detect import DetectBase64Request, DetectResponse
from src.api.pipeline import (
    EvaluateRequest,
    EvaluateResponse,
    MineRequest,
    MineResponse,
    SynthRequest,
    SynthResponse,
)

CATEGORIES = ("detection", "dataset", "evaluation", "training")


def get_tool_schema(model_class) -> Dict[str, Any]:
    """Get JSON schema for a Pydantic model"""
    return model_class.model_json_schema()


def get_tools() -> List[Dict[str, Any]]:
    """Return all service tools with their MCP-compatible descriptors"""
    return [
        {
            "name": "detect_birds",
            "description": "Detect small birds in a base64-encoded PNG (sides a multiple of 32); returns boxes and scores",
            "method": "POST",
            "path": "/detect/base64",
            "input_schema": get_tool_schema(DetectBase64Request),
            "output_schema": get_tool_schema(DetectResponse),
            "tags": ["detection", "image"],
        },
        {
            "name": "synth_dataset",
            "description": "Generate a deterministic synthetic sky dataset with bird annotations",
            "method": "POST",
            "path": "/pipeline/synth",
            "input_schema": get_tool_schema(SynthRequest),
            "output_schema": get_tool_schema(SynthResponse),
            "tags": ["dataset", "synthetic"],
        },
        {
            "name": "evaluate_checkpoint",
            "description": "COCO-style AP, AP50, AP75 and AP_S of a checkpoint on a dataset split",
            "method": "POST",
            "path": "/pipeline/evaluate",
            "input_schema": get_tool_schema(EvaluateRequest),
            "output_schema": get_tool_schema(EvaluateResponse),
            "tags": ["evaluation", "metrics"],
        },
        {
            "name": "mine_hard_negatives",
            "description": "Record a checkpoint's confident false positives as hard negatives in a split's manifest",
            "method": "POST",
            "path": "/pipeline/mine-hard-negatives",
            "input_schema": get_tool_schema(MineRequest),
            "output_schema": get_tool_schema(MineResponse),
            "tags": ["training", "hard-negatives"],
        },
    ]


def get_tool_by_name(name: str) -> Dict[str, Any]:
    """Get a specific tool by name"""
    for tool in get_tools():
        if tool["name"] == name:
            return tool
    raise ValueError(f"Tool '{name}' not found")


def get_tools_summary() -> Dict[str, Any]:
    """Get summary information about available tools"""
    tools = get_tools()
    return {
        "total_tools": len(tools),
        "tools_by_category": {
            category: len([t for t in tools if category in t["tags"]]) for category in CATEGORIES
        },
        "supported_formats": {
            "input": ["png", "base64"],
            "outputs": ["json", "jsonl", "csv", "svg"],
        },
    }
