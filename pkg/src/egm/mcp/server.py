"""FastMCP server exposing sampler, evaluation and oracle tools."""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from mcp.server.fastmcp import FastMCP

from ..config import settings
from ..core.storage import SAMPLES_MAGIC, SAMPLES_VERSION
from .tools import sampler_tools

logger = logging.getLogger(__name__)


class FastMCPSamplerServer:
    """FastMCP server that exposes trained samplers and their checks."""

    def __init__(self, runs_dir: Optional[Path] = None):
        self._mcp = FastMCP(
            "EGM Sampler",
            instructions="Draw, evaluate and verify energy-based generator matching samplers",
        )
        self._runs_dir = Path(runs_dir or settings.runs_dir)
        self._initialized = False
        self._setup_tools()

    def _setup_tools(self):
        """Set up tool definitions using decorator pattern."""

        @self._mcp.tool()
        async def draw_samples(
            checkpoint: str,
            out: str,
            n: int = 2000,
            steps: Optional[int] = None,
            seed: int = 0,
        ) -> Dict[str, Any]:
            """Simulate terminal samples from a training checkpoint.

            Args:
                checkpoint: Checkpoint directory
                out: Output sample file
                n: Number of samples
                steps: Simulation steps
                seed: Random seed

            Returns:
                Output path and sample statistics
            """
            return await sampler_tools.draw_samples(
                checkpoint=checkpoint, out=out, n=n, steps=steps, seed=seed
            )

        @self._mcp.tool()
        async def evaluate_samples(
            samples: str,
            reference: str,
            task: Dict[str, Any],
            subsample: int = 512,
            seed: int = 0,
        ) -> Dict[str, Any]:
            """Score a sample file against a reference sample file.

            Args:
                samples: Sample file to score
                reference: Reference sample file
                task: Task parameters such as {"task": "ising", "L": 5, "beta": 0.2}
                subsample: Points per set for the 2-D assignment
                seed: Subsampling seed

            Returns:
                Wasserstein distances and mode occupancy
            """
            return await sampler_tools.evaluate_samples(
                samples=samples,
                reference=reference,
                task=task,
                subsample=subsample,
                seed=seed,
            )

        @self._mcp.tool()
        async def consistency_report(
            t: float,
            r: float,
            d_disc: int = 1,
            d_cont: int = 1,
            continuous: str = "cond_ot",
            n_mc: int = 100_000,
            seed: int = 0,
        ) -> Dict[str, Any]:
            """Check the bootstrap kernels at one pair of times t < r.

            Args:
                t: Earlier time
                r: Later time
                d_disc: Number of tokens
                d_cont: Number of continuous coordinates
                continuous: "cond_ot" or "ve"
                n_mc: Monte-Carlo draws for the sampled checks
                seed: Random seed

            Returns:
                Consistency and Chapman-Kolmogorov deviations
            """
            return await sampler_tools.consistency_report(
                t=t,
                r=r,
                d_disc=d_disc,
                d_cont=d_cont,
                continuous=continuous,
                n_mc=n_mc,
                seed=seed,
            )

        @self._mcp.tool()
        async def snis_report(
            t: float = 0.5,
            K: Optional[List[int]] = None,
            seeds: Optional[List[int]] = None,
            L: int = 2,
            beta: float = 0.2,
            epsilon: Optional[float] = None,
        ) -> Dict[str, Any]:
            """Measure SNIS error against exact rates on a small Ising lattice.

            Args:
                t: Time of the estimate
                K: Proposal sizes
                seeds: Seeds per size
                L: Lattice side
                beta: Inverse temperature
                epsilon: Also report bootstrap ESS at this gap

            Returns:
                Error rows per K and the fitted log-log slope
            """
            return await sampler_tools.snis_report(
                t=t, K=K, seeds=seeds, L=L, beta=beta, epsilon=epsilon
            )

        @self._mcp.tool()
        async def ground_truth(
            task: Dict[str, Any], out: str, n: int = 2000, seed: int = 0
        ) -> Dict[str, Any]:
            """Generate reference samples for a task.

            Args:
                task: Task parameters
                out: Output sample file
                n: Number of samples
                seed: Random seed

            Returns:
                Output path and count
            """
            return await sampler_tools.ground_truth(task=task, out=out, n=n, seed=seed)

        @self._mcp.resource("schema://samples")
        def samples_schema() -> str:
            """Describe the binary sample file layout."""
            return f"""
Sample file (little-endian):
  header: magic {SAMPLES_MAGIC.decode()} (4 bytes), version u16 = {SAMPLES_VERSION},
          d_disc u32, d_cont u32, vocab_size u32, count u64
  rows:   count x [tokens u16 * d_disc][coordinates f64 * d_cont]
"""

    async def initialize(self):
        """Initialize the tool state."""
        if self._initialized:
            return

        sampler_tools.init(self._runs_dir)
        self._initialized = True

    def run(self, transport: str = "stdio"):
        """Run the FastMCP server.

        Args:
            transport: "stdio" or "sse"
        """
        if not self._initialized:
            raise RuntimeError("Server not initialized. Call initialize() first.")

        logger.info(f"Starting FastMCP sampler server over {transport} (runs in {self._runs_dir})")
        self._mcp.run(transport=transport)
