"""Integration tests for the sampler MCP server against a trained checkpoint."""

import json

import pytest

from egm.core.storage import read_samples
from egm.core.training import train
from egm.mcp.server import FastMCPSamplerServer


def payload(result):
    if isinstance(result, tuple):
        result = result[0]
    if isinstance(result, dict):
        return result
    return json.loads(result[0].text)


@pytest.mark.anyio
async def test_fastmcp_sampler_server(ising_config, tmp_path):
    """Train, draw through the server, then score against server-made ground truth."""
    train(ising_config, tmp_path / "run")
    server = FastMCPSamplerServer(runs_dir=tmp_path)
    await server.initialize()

    drawn = payload(
        await server._mcp.call_tool(
            "draw_samples",
            {"checkpoint": "run/checkpoints/outer_0002", "out": "drawn.bin", "n": 32, "seed": 5},
        )
    )
    assert drawn["n"] == 32
    assert drawn["samples"] == str(tmp_path / "drawn.bin")
    states, vocab_size = read_samples(tmp_path / "drawn.bin")
    assert states.disc.shape == (32, 4)
    assert vocab_size == 2

    # a second draw reuses the cached checkpoint and is reproducible
    again = payload(
        await server._mcp.call_tool(
            "draw_samples",
            {"checkpoint": "run/checkpoints/outer_0002", "out": "again.bin", "n": 32, "seed": 5},
        )
    )
    assert again["energy_mean"] == drawn["energy_mean"]
    assert read_samples(tmp_path / "again.bin")[0].equal(states)

    task = {"task": "ising", "L": 2, "beta": 0.2}
    truth = payload(
        await server._mcp.call_tool(
            "ground_truth", {"task": task, "out": "truth.bin", "n": 32, "seed": 1}
        )
    )
    assert truth["n"] == 32

    report = payload(
        await server._mcp.call_tool(
            "evaluate_samples", {"samples": "drawn.bin", "reference": "truth.bin", "task": task}
        )
    )
    assert report["n"] == 32
    assert report["e_w1"] >= 0 and report["m_w1"] >= 0
