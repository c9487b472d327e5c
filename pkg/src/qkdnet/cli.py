"""Command-line front end; a thin client over the scenario harness."""

from __future__ import annotations

import json
import sys

import click

from .engine import Simulation, compare_delivery_modes
from .errors import QkdNetError
from .scenario import load_scenario


def _load(path: str):
    try:
        return load_scenario(path)
    except QkdNetError as exc:
        raise click.ClickException(str(exc))


def _dump(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


@click.group()
def main() -> None:
    """Desk-scale key-distribution network simulator."""


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--duration", type=float, default=None, help="Override the run length (s).")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Write the report JSON here instead of stdout.")
@click.option("--event-log", "event_log_path", type=click.Path(dir_okay=False),
              default=None, help="Write the raw event log (JSON Lines) here.")
def run(scenario, seed, duration, report_path, event_log_path) -> None:
    """Run a scenario to completion and emit its report."""
    config = _load(scenario)
    if duration is not None:
        config = config.with_overrides(duration=duration)
    sim = Simulation(config, seed)
    report = sim.run()
    if event_log_path:
        sim.log.write(event_log_path)
    _dump(report, report_path)
    if not report["reconciliation_ok"]:
        click.echo("report failed reconciliation against the event log", err=True)
        for diff in report["reconciliation_diffs"]:
            click.echo(f"  {diff}", err=True)
        sys.exit(1)


@main.command("compare-delivery")
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--poll-period", type=float, default=1.0, show_default=True,
              help="Southbound poll period (s) for the polled variant.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Write the comparison JSON here instead of stdout.")
def compare_delivery(scenario, poll_period, seed, report_path) -> None:
    """Run a scenario under push and poll delivery and compare them."""
    config = _load(scenario)
    if poll_period <= 0:
        raise click.ClickException("--poll-period must be > 0")
    _dump(compare_delivery_modes(config, poll_period, seed), report_path)


@main.command("topo-dump")
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--at", "at_time", type=float, default=None,
              help="Virtual time to advance to first (default: one hand-off cycle).")
def topo_dump(scenario, at_time) -> None:
    """Print the controller's discovered topology as JSON."""
    config = _load(scenario)
    sim = Simulation(config)
    # Hellos land one delivery cycle after bootstrap.
    target = 0.002 if at_time is None else at_time
    sim.advance_to(min(target, config.duration))
    _dump(sim.controller.topology_snapshot(sim.clock.now), None)


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
def validate(scenario) -> None:
    """Parse and cross-check a scenario file; exit nonzero on problems."""
    config = _load(scenario)
    click.echo(
        f"ok: {config.name}: {len(config.nodes)} nodes, {len(config.links)} links, "
        f"{len(config.saes)} applications, duration {config.duration}s"
    )


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(scenario, host, port) -> None:
    """Expose a scenario over HTTP; advance it with POST /advance."""
    import uvicorn

    from .service.app import make_network_app

    config = _load(scenario)
    sim = Simulation(config)
    sim.start()
    uvicorn.run(make_network_app(sim), host=host, port=port)


if __name__ == "__main__":
    main()
