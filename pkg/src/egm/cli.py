"""Command-line entry point: ``egm <subcommand>``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch
from pydantic import TypeAdapter, ValidationError

from .config import load_config, settings
from .core.baselines import ground_truth
from .core.energy import IsingTarget, build_target
from .core.exceptions import ConfigError, EGMError
from .core.metrics import energy_histogram, evaluate, histogram_rows
from .core.oracle import (
    check_chapman_kolmogorov,
    check_consistency_eq13,
    snis_convergence_report,
)
from .core.paths import build_path
from .core.storage import read_samples, write_csv, write_samples
from .core.training import draw_samples, ess_trace, load_trained, sweep_epsilon, train
from .core.types import DTYPE, EnergySpec, MixedState

logger = logging.getLogger(__name__)

# Gibbs baseline size: chains x sweeps
BASELINE_CHAINS = 4
BASELINE_SWEEPS = 6000
BASELINE_BURN_IN = 1000
PROBE_TOKENS = 4


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text}") from e


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text}") from e


def _add_task_args(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("task")
    group.add_argument("--config", type=Path, help="Take the task from a training config")
    group.add_argument("--task", choices=["ising", "gbrbm", "jointdw4", "jointmog"])
    group.add_argument("--L", type=int, help="Ising lattice side")
    group.add_argument("--beta", type=float, help="Ising inverse temperature")
    group.add_argument("--J", type=float, help="Ising coupling")
    group.add_argument("--mu", type=float, help="Ising external field")
    group.add_argument("--d", type=int, help="JointMoG number of pairs")
    group.add_argument("--sigma", type=float, help="JointMoG mode width")


def task_spec(args: argparse.Namespace) -> EnergySpec:
    """Task spec from ``--config`` or from ``--task`` plus parameter flags."""
    if args.config is not None:
        return load_config(args.config).task
    if args.task is None:
        raise ConfigError("either --config or --task is required")
    fields: Dict[str, Any] = {"task": args.task}
    for name in ("L", "beta", "J", "mu", "d", "sigma"):
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    try:
        return TypeAdapter(EnergySpec).validate_python(fields)
    except ValidationError as e:
        raise ConfigError(f"invalid task parameters: {e}") from e


def _print_json(payload: Any):
    print(json.dumps(payload, indent=2, default=float))


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "seed": args.seed,
        "outer_iterations": args.outer,
        "inner_iterations": args.inner,
        "num_mc_samples": args.K,
        "epsilon": args.epsilon,
    }
    config = load_config(args.config, **overrides)
    result = train(config, output_dir=args.output, resume=args.resume)
    _print_json(
        {
            "manifest": result.manifest.model_dump(),
            "metrics_path": str(result.metrics_path),
            **result.diagnostics,
        }
    )
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    trainer = load_trained(args.checkpoint)
    steps = args.steps or trainer.config.simulation_steps
    rng = torch.Generator().manual_seed(args.seed)
    states, resolved = draw_samples(trainer.sampler, trainer.path, args.n, steps, rng)
    write_samples(states, args.out, trainer.target.vocab_size)
    _print_json({"samples": str(args.out), "n": args.n, "resolved_masks": resolved})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    target = build_target(task_spec(args))
    samples, _ = read_samples(args.samples)
    reference, _ = read_samples(args.reference)
    result = evaluate(target, samples, reference, subsample=args.subsample, seed=args.seed)
    if args.histogram is not None:
        edges, counts, ref_counts = energy_histogram(
            target(samples), target(reference), bins=args.bins
        )
        write_csv(args.histogram, histogram_rows(edges, counts, ref_counts))
        result["histogram"] = str(args.histogram)
    _print_json(result)
    return 0


def cmd_gibbs(args: argparse.Namespace) -> int:
    target = build_target(task_spec(args))
    rng = torch.Generator().manual_seed(args.seed)
    if args.ground_truth:
        states = ground_truth(
            target, args.n, rng, chains=args.chains, burn_in=args.burn_in, thin=args.thin
        )
    else:
        chains = args.chains or BASELINE_CHAINS
        burn_in = BASELINE_BURN_IN if args.burn_in is None else args.burn_in
        per_chain = -(-args.n // chains)
        thin = args.thin or max(1, (args.sweeps - burn_in) // per_chain)
        states = ground_truth(target, args.n, rng, chains=chains, burn_in=burn_in, thin=thin)
    write_samples(states, args.out, target.vocab_size)
    payload: Dict[str, Any] = {"samples": str(args.out), "n": len(states)}
    if args.reference is not None:
        reference, _ = read_samples(args.reference)
        payload.update(evaluate(target, states, reference, seed=args.seed))
    _print_json(payload)
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    spec = task_spec(args)
    target = build_target(spec)
    path = build_path(target.d_disc, target.d_cont, target.vocab_size, continuous=args.path)
    # kernels factorize per coordinate, so a few tokens cover the discrete checks
    probe = build_path(
        min(target.d_disc, PROBE_TOKENS), target.d_cont, target.vocab_size, continuous=args.path
    )
    rng = torch.Generator().manual_seed(args.seed)
    grid = torch.linspace(0.05, 0.95, args.grid, dtype=DTYPE).tolist()
    x1 = MixedState(
        disc=torch.randint(0, target.vocab_size, (probe.d_disc,), generator=rng),
        cont=torch.randn(target.d_cont, generator=rng, dtype=DTYPE),
    )
    rows = []
    for t in grid:
        for r in grid:
            if r <= t:
                continue
            x_t = probe.sample_t_given_1(x1, t, rng)
            consistency = check_consistency_eq13(probe, t, r, x1, x_t, args.n_mc, rng)
            ck = check_chapman_kolmogorov(probe, t, r, x1, args.n_mc, rng)
            rows.append({"t": t, "r": r, **consistency, **ck})
    report: Dict[str, Any] = {
        "kernel_checks": len(rows),
        "max_deviation": max((row["deviation"] for row in rows), default=0.0),
    }
    if isinstance(target, IsingTarget):
        report["snis"] = snis_convergence_report(
            target, path, args.t, args.K, _ints(args.seeds), epsilon=args.epsilon
        )
    if args.out is not None:
        write_csv(args.out, rows)
        report["table"] = str(args.out)
    _print_json(report)
    return 0


def cmd_ess(args: argparse.Namespace) -> int:
    trainer = load_trained(args.checkpoint)
    if trainer.energy_net is None:
        raise ConfigError("ESS trace needs a bootstrap checkpoint with an energy network")
    rng = torch.Generator().manual_seed(args.seed)
    x1 = trainer.buffer.sample(args.batch, rng)
    grid = torch.linspace(args.t_min, 1 - args.t_min, args.grid, dtype=DTYPE).tolist()
    epsilon = args.epsilon or trainer.config.epsilon
    rows = ess_trace(
        trainer.target,
        trainer.path,
        trainer.energy_params.ema_net(),
        x1,
        grid,
        args.K or trainer.config.num_mc_samples,
        epsilon,
        rng,
    )
    if args.out is not None:
        write_csv(args.out, rows)
    _print_json(rows)
    return 0


def cmd_sweep_eps(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    reference = None
    if args.reference is not None:
        reference, _ = read_samples(args.reference)
    rows = sweep_epsilon(
        config,
        args.eps,
        args.output or Path(settings.runs_dir) / "sweep_eps",
        seeds=args.seeds,
        reference=reference,
        n_eval=args.n,
    )
    if args.out is not None:
        write_csv(args.out, rows)
    _print_json(rows)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import anyio

    from .mcp.server import FastMCPSamplerServer

    server = FastMCPSamplerServer()
    anyio.run(server.initialize)
    server.run(transport=args.transport)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egm", description="Energy-based generator matching samplers"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Run bi-level training from a config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", type=Path)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--outer", type=int, help="Override outer iterations")
    p.add_argument("--inner", type=int, help="Override inner iterations")
    p.add_argument("--K", type=int, help="Override Monte-Carlo samples")
    p.add_argument("--epsilon", type=float, help="Enable bootstrapping with this gap")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="Simulate terminal samples from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="Compare a sample file against a reference file")
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--subsample", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--histogram", type=Path, help="Write an energy histogram CSV")
    p.add_argument("--bins", type=int, default=50)
    _add_task_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gibbs", help="MCMC baseline or ground-truth samples")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ground-truth", action="store_true")
    p.add_argument("--chains", type=int)
    p.add_argument("--sweeps", type=int, default=BASELINE_SWEEPS)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--reference", type=Path, help="Evaluate against this sample file")
    p.add_argument("--out", type=Path, required=True)
    _add_task_args(p)
    p.set_defaults(func=cmd_gibbs)

    p = sub.add_parser("oracle", help="Kernel consistency and SNIS convergence reports")
    p.add_argument("--path", choices=["cond_ot", "ve"], default="cond_ot")
    p.add_argument("--grid", type=int, default=10)
    p.add_argument("--n-mc", type=int, default=100_000)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--K", type=_ints, default=[10, 100, 1000])
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    _add_task_args(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("ess", help="ESS of plain vs bootstrapped weights from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--t-min", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--K", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_ess)

    p = sub.add_parser("sweep-eps", help="Train one run per bootstrap gap and tabulate")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--eps", type=_floats, required=True)
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--reference", type=Path)
    p.add_argument("--output", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_sweep_eps)

    p = sub.add_parser("serve", help="Run the MCP tool server")
    p.add_argument("--transport", choices=["stdio", "sse"], default="stdio")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run a subcommand.

    Returns:
        int: 0 on success, 1 on any toolkit error (configuration, checkpoint,
        sample file, storage, numerics); argparse exits with 2 on usage errors
    """
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"egm: config error: {e}", file=sys.stderr)
        return 1
    except EGMError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"egm: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
