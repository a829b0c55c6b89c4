import json

import pytest

from xai_eval import server
from xai_eval.errors import ComputationError, DataError, handle_errors

TOOLS = {"synth", "train", "evaluate", "explain", "localise", "mcd", "flip"}
TINY_OPTIONS = {"synthetic": {"image_size": 16, "object_size": [5, 10], "samples": {"train": 2}}}


async def test_tools_are_registered():
    """Every experiment step is exposed as a tool"""
    tools = await server.mcp.list_tools()
    assert TOOLS <= {t.name for t in tools}


async def test_synth_tool_returns_summary(tmp_path):
    options = {"synthetic": {"image_size": 16, "object_size": [5, 10], "samples": {"train": 2, "test": 1}}}
    result = await server.synth(out=str(tmp_path), seed=3, options=options)
    assert "error" not in result
    assert result["result"]["images"] == 3 * (2 + 1)
    assert result["run_config"]["seed"] == 3
    assert result["run_config"]["subcommand"] == "synth"
    json.dumps(result)
    assert (tmp_path / "manifest.json").is_file()


async def test_missing_manifest_comes_back_as_error(tmp_path):
    result = await server.evaluate(manifest=str(tmp_path / "absent.json"), checkpoint=str(tmp_path / "m.ckpt"),
                                   out=str(tmp_path))
    assert result["error_type"] == "DataError"
    assert result["exit_code"] == 2
    assert "absent.json" in result["error"]


async def test_invalid_options_come_back_as_usage_error(tmp_path):
    result = await server.train(manifest=str(tmp_path / "m.json"), out=str(tmp_path), options={"lr": -1.0})
    assert result["error_type"] == "ValidationError"
    assert result["exit_code"] == 2


async def test_tool_arguments_override_options(tmp_path):
    options = {"seed": 9, "synthetic": {"image_size": 16, "object_size": [5, 10], "samples": {"train": 2}}}
    result = await server.synth(out=str(tmp_path), seed=4, options=options)
    assert result["run_config"]["seed"] == 4


async def test_seed_from_options_is_kept(tmp_path, monkeypatch):
    monkeypatch.delenv("XAIEVAL_SEED", raising=False)
    result = await server.synth(out=str(tmp_path), options={**TINY_OPTIONS, "seed": 5})
    assert result["run_config"]["seed"] == 5


async def test_seed_from_environment_is_kept(tmp_path, monkeypatch):
    monkeypatch.setenv("XAIEVAL_SEED", "9")
    result = await server.synth(out=str(tmp_path), options=TINY_OPTIONS)
    assert result["run_config"]["seed"] == 9


async def test_handle_errors_maps_exceptions():
    @handle_errors
    async def diverges():
        raise ComputationError("loss became NaN")

    @handle_errors
    async def missing():
        raise DataError("Manifest not found: x")

    @handle_errors
    async def crashes():
        raise RuntimeError("boom")

    assert await diverges() == {"error": "loss became NaN", "error_type": "ComputationError", "exit_code": 1}
    assert (await missing())["exit_code"] == 2
    assert (await crashes())["error"] == "Unexpected error: boom"


def test_handle_errors_needs_async_function():
    with pytest.raises(TypeError):
        @handle_errors
        def not_async():
            return {}
