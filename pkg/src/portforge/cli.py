"""Command-line entry point: ``portforge run|extract|validate``."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .emport import extract_port_response, save_port_response, timed
from .errors import PortforgeError
from .scenarios import build_surrogate, load_config, run_scenario


def _resolve(config: str) -> Path:
    """Accept a path or the name of a shipped config."""
    p = Path(config)
    if p.exists() or p.suffix:
        return p
    from .scenarios.config import default_config_path
    return default_config_path(config)


def _fail(exc: PortforgeError):
    click.echo(f"error ({type(exc).__name__}): {exc}", err=True)
    sys.exit(exc.exit_code)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Port-extracted EM/circuit co-simulation and feed optimisation."""


@main.command()
@click.argument("config")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: the config's output_dir).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=click.IntRange(min=1), default=1,
              help="Worker threads for candidate evaluation.")
def run(config, out_dir, seed, threads):
    """Run the scenario described by CONFIG (a path or a shipped config name)."""
    try:
        cfg = load_config(_resolve(config), out_dir)
        if seed is not None:
            cfg = cfg.with_seed(seed)
        report = run_scenario(cfg, cfg.output_dir, threads=threads)
    except PortforgeError as exc:
        _fail(exc)
    click.echo(report.summary())
    click.echo(f"report: {cfg.output_dir / 'report.json'}")


@main.command()
@click.argument("config")
@click.option("--save", "save_path", type=click.Path(dir_okay=False), required=True,
              help="File to write the port response to.")
def extract(config, save_path):
    """Extract the port response of CONFIG's surrogate and save it."""
    try:
        cfg = load_config(_resolve(config))
        sys_ = build_surrogate(cfg)
        resp, t = timed(extract_port_response, sys_, cfg.dt, cfg.n_steps,
                        cfg.surrogate.get("extract_solver", "direct"))
        save_port_response(resp, save_path)
    except PortforgeError as exc:
        _fail(exc)
    click.echo(f"extracted {resp.n_ports} port(s) x {resp.n_samples} samples "
               f"(dof {sys_.dof}) in {t:.3g} s -> {save_path}")


@main.command()
@click.argument("config")
def validate(config):
    """Check CONFIG without running it."""
    try:
        cfg = load_config(_resolve(config))
    except PortforgeError as exc:
        _fail(exc)
    click.echo(f"ok: {cfg.kind} '{cfg.name}', {cfg.n_steps} steps, dt={cfg.dt:.6g} s")


if __name__ == "__main__":
    main()
