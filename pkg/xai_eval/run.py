"""Console entry points: the xai-eval CLI and the xai-eval-mcp tool server"""

import sys

from xai_eval.cli import main as cli_main


def main() -> None:
    """Run the command-line interface"""
    sys.exit(cli_main())


def serve() -> None:
    """Run the MCP server with stdio communication"""
    from xai_eval.server import mcp
    mcp.run()
