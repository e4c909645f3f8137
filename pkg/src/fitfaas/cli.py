"""Command-line interface: ``fitfaas <subcommand>``.

Exit status: 0 when every task succeeded, 1 when any task failed, 2 on a usage
or infrastructure error (unreachable coordinator, digest mismatch, ...).
"""

from __future__ import annotations

import json
import logging
import os
import signal
import sys
import tempfile
import threading

import click

from . import errors
from .agent.config import EndpointConfig, load_config

log = logging.getLogger("fitfaas")


def _fail(exc):
    click.echo(f"error [{getattr(exc, 'code', type(exc).__name__)}]: {exc}", err=True)
    sys.exit(2)


def _interrupt(*_):
    raise KeyboardInterrupt


def _load(pallet, skip_verify):
    from .bench.pallet import fetch_pallet, load_pallet

    if "://" in pallet:
        dest = tempfile.mkdtemp(prefix="pallet-")
        return fetch_pallet(pallet, dest, verify=not skip_verify)
    return load_pallet(pallet, verify=not skip_verify)


def _save(report, path):
    if path is None:
        return
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1, allow_nan=True)
    except OSError as exc:
        raise errors.UnwritablePath(f"{path}: {exc}") from exc


def _emit(report, fmt, output):
    from .bench.report import emit_report

    if fmt == "chart" and output is None:
        raise click.UsageError("--format chart needs --output")
    emit_report(report, fmt, output)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def cli(verbose):
    """Binned-likelihood fitting as a service."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


_format = click.option("--format", "fmt", type=click.Choice(["table", "csv", "chart"]), default="table", show_default=True)
_output = click.option("--output", type=click.Path(dir_okay=False), default=None, help="Write the rendered report here.")
_mu = click.option("--mu", type=float, default=1.0, show_default=True, help="Tested signal strength.")
_method = click.option("--method", type=click.Choice(["asymptotic", "toys"]), default="asymptotic", show_default=True)
_toys = click.option("--n-toys", type=int, default=1000, show_default=True)
_seed = click.option("--seed", type=int, default=0, show_default=True, help="Toy seed.")


@cli.command("gen-fixture")
@click.option("--patches", "n_patches", type=click.IntRange(min=1), default=125, show_default=True)
@click.option("--channels", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--bins", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--label", default="synthetic", show_default=True)
@click.option("--archive/--no-archive", default=False, help="Also write pallet.tar.gz.")
@click.argument("out_dir", type=click.Path(file_okay=False))
def gen_fixture_cmd(n_patches, channels, bins, seed, label, archive, out_dir):
    """Write a deterministic synthetic pallet to OUT_DIR."""
    from .bench.pallet import gen_fixture

    try:
        pallet = gen_fixture(n_patches, channels, bins, seed, out_dir=out_dir, archive=archive, label=label)
    except errors.FitFaaSError as exc:
        _fail(exc)
    click.echo(f"wrote {pallet.n_patches} patches to {out_dir} (digest {pallet.patchset.digest[:16]})")


@cli.command("fetch")
@click.argument("url")
@click.argument("dest", type=click.Path(file_okay=False))
@click.option("--skip-verify", is_flag=True, help="Do not check the workspace digest.")
def fetch_cmd(url, dest, skip_verify):
    """Download and unpack a pallet archive from URL into DEST."""
    from .bench.pallet import fetch_pallet

    try:
        pallet = fetch_pallet(url, dest, verify=not skip_verify)
    except errors.FitFaaSError as exc:
        _fail(exc)
    click.echo(f"{pallet.label}: {pallet.n_patches} patches in {dest}")


@cli.command("fit-serial")
@click.argument("pallet")
@_mu
@_method
@_toys
@_seed
@click.option("--skip-verify", is_flag=True)
@click.option("--save", type=click.Path(dir_okay=False), default=None, help="Save the full report as JSON.")
@_format
@_output
def fit_serial_cmd(pallet, mu, method, n_toys, seed, skip_verify, save, fmt, output):
    """Run every patch in this process, one at a time."""
    from .bench.runner import run_serial

    try:
        p = _load(pallet, skip_verify)
        report = run_serial(p, mu, method, n_toys, seed)
        _save(report, save)
        _emit(report, fmt, output)
    except errors.FitFaaSError as exc:
        _fail(exc)
    sys.exit(1 if report.failures else 0)


@cli.command("fit-fanout")
@click.argument("pallet")
@click.option("--coordinator", default=None, help="Coordinator URL (omit with --local).")
@click.option("--endpoint", "endpoint_id", default=None, help="Endpoint id to run on.")
@click.option("--local", is_flag=True, help="Start a coordinator and agent in this process.")
@click.option("--max-blocks", type=int, default=4, show_default=True, help="With --local.")
@click.option("--nodes-per-block", type=int, default=1, show_default=True, help="With --local.")
@click.option("--workers-per-node", type=int, default=8, show_default=True, help="With --local.")
@_mu
@click.option("--trials", type=click.IntRange(min=1), default=1, show_default=True)
@_method
@_toys
@_seed
@click.option("--serial/--no-serial", default=False, help="Also time the serial baseline and compare results.")
@click.option("--skip-verify", is_flag=True)
@click.option("--save", type=click.Path(dir_okay=False), default=None, help="Save the full report as JSON.")
@_format
@_output
def fit_fanout_cmd(pallet, coordinator, endpoint_id, local, max_blocks, nodes_per_block, workers_per_node, mu, trials,
                   method, n_toys, seed, serial, skip_verify, save, fmt, output):
    """Fan every patch of PALLET out through a coordinator."""
    from .bench.runner import compare_results, run_fanout, run_serial
    from .coordinator.client import CoordinatorClient

    if not local and (coordinator is None or endpoint_id is None):
        raise click.UsageError("give --coordinator and --endpoint, or --local")
    stack = None
    try:
        p = _load(pallet, skip_verify)
        if local:
            from .bench.local import LocalStack

            cfg = EndpointConfig(max_blocks=max_blocks, nodes_per_block=nodes_per_block, workers_per_node=workers_per_node)
            stack = LocalStack(cfg).start()
            client, endpoint_id = stack.client, stack.endpoint_id
        else:
            client = CoordinatorClient(coordinator)
        report = run_fanout(p, client, endpoint_id, mu, trials, method, n_toys, seed)
        if stack is not None:
            stack.stop()
            stack = None
        if serial:
            baseline = run_serial(p, mu, method, n_toys, seed)
            report.serial_wall = baseline.serial_wall
            differ = compare_results(baseline.results(), report.results())
            if differ:
                click.echo(f"warning: {len(differ)} results differ from the serial baseline: {differ[:5]}", err=True)
        _save(report, save)
        _emit(report, fmt, output)
    except errors.FitFaaSError as exc:
        _fail(exc)
    finally:
        if stack is not None:
            stack.stop()
    for name, code in report.failures:
        click.echo(f"failed: {name} [{code}]", err=True)
    sys.exit(1 if report.failures else 0)


@cli.command("report")
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@_format
@_output
def report_cmd(reports, fmt, output):
    """Render saved JSON reports (from --save) in the chosen format."""
    from .bench.runner import BenchmarkReport

    loaded = []
    for path in reports:
        with open(path, encoding="utf-8") as fh:
            loaded.append(BenchmarkReport.from_dict(json.load(fh)))
    try:
        from .bench.report import emit_report

        if fmt == "chart" and output is None:
            raise click.UsageError("--format chart needs --output")
        emit_report(loaded, fmt, output)
    except errors.FitFaaSError as exc:
        _fail(exc)


@cli.command("serve")
@click.option("--host", default=os.environ.get("FITFAAS_HOST", "127.0.0.1"), show_default=True)
@click.option("--port", type=int, default=int(os.environ.get("FITFAAS_PORT", "8765")), show_default=True)
@click.option("--lease-ttl", type=float, default=float(os.environ.get("FITFAAS_LEASE_TTL", "60")), show_default=True)
@click.option("--heartbeat", type=float, default=float(os.environ.get("FITFAAS_HEARTBEAT", "10")), show_default=True,
              help="Expected agent heartbeat period (s).")
@click.option("--journal", type=click.Path(dir_okay=False), default=os.environ.get("FITFAAS_JOURNAL"),
              help="Append-only event log for restart recovery.")
def serve_cmd(host, port, lease_ttl, heartbeat, journal):
    """Run the coordinator until interrupted."""
    from .coordinator.broker import Broker
    from .coordinator.server import CoordinatorServer

    server = CoordinatorServer(Broker(lease_ttl=lease_ttl, heartbeat_period=heartbeat, journal=journal), host, port)
    click.echo(f"coordinator listening on {server.url}", err=True)
    signal.signal(signal.SIGTERM, _interrupt)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
        server.broker.close()


@cli.command("agent")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--coordinator", "coordinator_url", default=None)
@click.option("--endpoint-id", default=None, help="Reuse an existing endpoint instead of registering.")
@click.option("--name", default=None)
@click.option("--description", default=None)
@click.option("--max-blocks", type=int, default=None)
@click.option("--nodes-per-block", type=int, default=None)
@click.option("--workers-per-node", type=int, default=None)
@click.option("--parallelism", type=float, default=None)
@click.option("--provider", type=click.Choice(["local_process", "stub_batch"]), default=None)
@click.option("--heartbeat-seconds", type=float, default=None)
@click.option("--lease-batch", type=int, default=None)
@click.option("--idle-block-timeout", "idle_block_timeout_seconds", type=float, default=None)
def agent_cmd(config_path, **overrides):
    """Run an endpoint agent until interrupted; prints the endpoint id."""
    from .agent.agent import EndpointAgent

    try:
        cfg = load_config(config_path, **overrides)
    except (ValueError, OSError) as exc:
        raise click.UsageError(str(exc)) from None
    agent = EndpointAgent(cfg)
    stop = threading.Event()
    # SIGTERM drains like Ctrl-C: in-flight tasks finish, then blocks are retired
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        endpoint_id = agent.start()
        click.echo(endpoint_id)
        sys.stdout.flush()
        agent.run(stop)  # retires every block on the way out
    except KeyboardInterrupt:
        pass
    except errors.FitFaaSError as exc:
        _fail(exc)


def main():  # pragma: no cover
    cli()


if __name__ == "__main__":  # pragma: no cover
    main()
