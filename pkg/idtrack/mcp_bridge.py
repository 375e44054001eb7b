#!/usr/bin/env python3
"""
Bridge between an MCP client and the idtrack tools.
Handles tool invocation and JSON serialization.

Usage: python -m idtrack.mcp_bridge <tool_name> <json_args>
"""

import json
import sys

from .mcp_tools import TOOL_MAP


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) < 2:
        print(json.dumps({"error": "Usage: mcp_bridge.py <tool_name> <json_args>"}))
        return 1

    tool_name, args_json = argv[0], argv[1]
    if tool_name not in TOOL_MAP:
        print(json.dumps({"error": f"Unknown tool: {tool_name}"}))
        return 1

    try:
        args = json.loads(args_json)
        tool_func = TOOL_MAP[tool_name]
        result = tool_func(**args) if isinstance(args, dict) else tool_func(args)
        print(json.dumps(result))
    except Exception as e:
        print(json.dumps({"error": str(e), "type": type(e).__name__}))
        return 1
    return 1 if isinstance(result, dict) and "error" in result else 0


if __name__ == "__main__":
    sys.exit(main())
