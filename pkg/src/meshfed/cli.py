"""Operator entry points.

Machine-readable output (JSON lines) goes to stdout; prose and logging go
to stderr. Exit codes: 0 ok, 2 config/validation error, 3 bind failure,
4 I/O error.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import sys
import time
from pathlib import Path

import click

from .aggregation import NoisePolicy, strategy_by_name
from .core import Namespace, NodeId, SharingMode
from .node import Node, NodePolicy
from .refmodel import Shard, export_delimited, gen_dataset, make_trainer
from .sim import ValidationError, build_topology, load_scenario_file, run_scenario
from . import report, transport, vectors

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BIND = 3
EXIT_IO = 4

log = logging.getLogger("meshfed")

_NODE_CONFIG_KEYS = {
    "namespace", "listen", "bootstrap", "mode", "promote_threshold",
    "privacy_exclusion", "noise_sigma", "noise_seed", "pool_min_inbound",
    "pool_timeout", "staleness_window", "heartbeat_interval", "ttl_multiplier",
    "announce_every", "model_request_timeout", "model_request_retries",
    "aggregation", "rounds", "linger", "round_interval", "trainer", "dataset",
    "name",
}

_NODE_CONFIG_DEFAULTS = {
    "namespace": None,
    "listen": "127.0.0.1:0",
    "bootstrap": [],
    "mode": "peer",
    "promote_threshold": 0,
    "privacy_exclusion": False,
    "noise_sigma": 0.0,
    "noise_seed": 0,
    "pool_min_inbound": 1,
    "pool_timeout": 0.5,
    "staleness_window": 2,
    "heartbeat_interval": 1.0,
    "ttl_multiplier": 3,
    "announce_every": 5,
    "model_request_timeout": 3.0,
    "model_request_retries": 3,
    "aggregation": "fedavg",
    "rounds": None,
    "linger": 10.0,
    "round_interval": 0.25,
    "trainer": {"kind": "linear"},
    "dataset": {"seed": 1, "n": 256, "d": 4, "noise_std": 0.1},
    "name": None,
}


def _setup_logging():
    level = os.environ.get("MESHFED_LOG", "info").lower()
    chosen = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        level, logging.INFO
    )
    logging.basicConfig(stream=sys.stderr, level=chosen,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _fail(code: int, *messages: str):
    for m in messages:
        click.echo(m, err=True)
    sys.exit(code)


def _emit(record: dict):
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


@click.group()
def main():
    """Decentralized federated learning runtime and simulator."""
    _setup_logging()


# ---------------------------------------------------------------------------
# node

def _load_node_config(config_path, overrides: dict) -> dict:
    cfg = dict(_NODE_CONFIG_DEFAULTS)
    cfg["trainer"] = dict(cfg["trainer"])
    cfg["dataset"] = dict(cfg["dataset"])
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            _fail(EXIT_CONFIG, f"config: cannot read {config_path}: {e}")
        if not isinstance(data, dict):
            _fail(EXIT_CONFIG, "config: must be a JSON object")
        unknown = sorted(set(data) - _NODE_CONFIG_KEYS)
        if unknown:
            _fail(EXIT_CONFIG, *[f"config: unknown key {k!r}" for k in unknown])
        for key, value in data.items():
            if key in ("trainer", "dataset") and isinstance(value, dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    for key, value in overrides.items():
        if value is not None and value != ():
            cfg[key] = list(value) if isinstance(value, tuple) else value
    problems = []
    if not cfg.get("namespace"):
        problems.append("config: field 'namespace' is required and must be non-empty")
    else:
        try:
            Namespace(cfg["namespace"])
        except ValueError as e:
            problems.append(f"config: namespace: {e}")
    try:
        SharingMode.parse(cfg["mode"])
    except ValueError as e:
        problems.append(f"config: mode: {e}")
    try:
        strategy_by_name(cfg["aggregation"])
    except Exception as e:
        problems.append(f"config: aggregation: {e}")
    if problems:
        _fail(EXIT_CONFIG, *problems)
    return cfg


@main.group()
def node():
    """Run and inspect live nodes."""


@node.command("run")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON config file; flags override its fields.")
@click.option("--namespace", default=None)
@click.option("--listen", default=None, help="host:port to bind (port 0 picks one).")
@click.option("--bootstrap", multiple=True, help="peer address, repeatable.")
@click.option("--mode", default=None, type=click.Choice(["seed", "leech", "peer", "block"]))
@click.option("--rounds", default=None, type=int, help="stop after this many rounds.")
@click.option("--linger", default=None, type=float,
              help="seconds to keep serving after rounds complete.")
@click.option("--promote-threshold", "promote_threshold", default=None, type=int)
@click.option("--noise-sigma", "noise_sigma", default=None, type=float)
@click.option("--aggregation", default=None)
def node_run(config_path, **flags):
    """Join a namespace over TCP and train until interrupted."""
    cfg = _load_node_config(config_path, flags)
    ds_cfg = cfg["dataset"]
    dataset = gen_dataset(
        seed=ds_cfg.get("seed", 1),
        n=ds_cfg.get("n", 256),
        d=ds_cfg.get("d", 4),
        noise_std=ds_cfg.get("noise_std", 0.1),
        w_seed=ds_cfg.get("w_seed"),
    )
    shard = Shard(dataset.X, dataset.y)
    trainer_cfg = dict(cfg["trainer"])
    kind = trainer_cfg.pop("kind", "linear")
    try:
        trainer = make_trainer(kind, shard, **trainer_cfg)
    except Exception as e:
        _fail(EXIT_CONFIG, f"config: trainer: {e}")

    policy = NodePolicy(
        default_mode=SharingMode.parse(cfg["mode"]),
        promote_threshold=int(cfg["promote_threshold"]),
        privacy_exclusion=bool(cfg["privacy_exclusion"]),
        noise=NoisePolicy(sigma=float(cfg["noise_sigma"]), rng_seed=int(cfg["noise_seed"])),
        pool_min_inbound=max(int(cfg["pool_min_inbound"]), 1),
        pool_timeout=float(cfg["pool_timeout"]),
        staleness_window=int(cfg["staleness_window"]),
        heartbeat_interval=float(cfg["heartbeat_interval"]),
        ttl_multiplier=int(cfg["ttl_multiplier"]),
        announce_every=int(cfg["announce_every"]),
        model_request_timeout=float(cfg["model_request_timeout"]),
        model_request_retries=int(cfg["model_request_retries"]),
        max_rounds=cfg["rounds"],
    )

    node_id = NodeId.generate()
    runtime = Node(
        node_id=node_id,
        namespace=Namespace(cfg["namespace"]),
        policy=policy,
        trainer=trainer,
        strategy=strategy_by_name(cfg["aggregation"]),
        transport_send=transport.tcp_send,
        listen_address=cfg["listen"],
        bootstrap=tuple(cfg["bootstrap"]),
        name=cfg.get("name") or node_id.short(),
    )

    try:
        listener = transport.TcpListener(cfg["listen"], runtime.deliver).start()
    except (transport.BindError, ValueError) as e:
        _fail(EXIT_BIND, f"bind: {e}")
    runtime.listen_address = listener.address
    runtime.bootstrap = tuple(a for a in cfg["bootstrap"] if a != listener.address)
    runtime.min_round_interval = float(cfg["round_interval"])

    _emit(
        {
            "event": "listening",
            "node": runtime.name,
            "node_id": node_id.hex,
            "address": listener.address,
            "namespace": cfg["namespace"],
            "mode": cfg["mode"],
        }
    )
    log.info("node %s listening on %s", node_id.short(), listener.address)

    stop_requested = []
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop_requested.append(True))

    done_at = None
    try:
        while not stop_requested:
            now = time.monotonic()
            runtime.slice(now)
            for event in runtime.drain_events():
                _emit(event)
                if event["event"] == "model_adopted":
                    click.echo(f"model adopted from {event['source']}", err=True)
            if policy.max_rounds is not None and runtime.rounds_completed >= policy.max_rounds:
                if done_at is None:
                    done_at = now
                    _emit(
                        {
                            "event": "run_complete",
                            "node": runtime.name,
                            "rounds": runtime.rounds_completed,
                        }
                    )
                elif now - done_at >= float(cfg["linger"]):
                    break
            time.sleep(0.02)
    finally:
        runtime.stop(time.monotonic())
        for event in runtime.drain_events():
            _emit(event)
        listener.stop()
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# scenario

@main.group()
def scenario():
    """Run and inspect simulation scenarios."""


def _load_spec_or_exit(path):
    try:
        return load_scenario_file(path)
    except ValidationError as e:
        _fail(EXIT_CONFIG, *e.problems)


@scenario.command("run")
@click.argument("path", type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="directory for metric exports and figures.")
@click.option("--figures/--no-figures", default=True)
def scenario_run(path, out_dir, figures):
    """Execute a scenario and export its metrics log."""
    spec = _load_spec_or_exit(path)
    t0 = time.monotonic()
    metrics = run_scenario(spec)
    elapsed = time.monotonic() - t0
    try:
        written = report.write_outputs(metrics, out_dir, figures=figures)
    except OSError as e:
        _fail(EXIT_IO, f"output: {e}")
    summary = metrics.summary()
    summary["event"] = "scenario_complete"
    summary["elapsed_seconds"] = round(elapsed, 3)
    _emit(summary)
    for p in written:
        click.echo(f"wrote {p}", err=True)
    sys.exit(EXIT_OK)


@scenario.command("show")
@click.argument("path", type=click.Path())
def scenario_show(path):
    """Validate a scenario and print its resolved shape."""
    spec = _load_spec_or_exit(path)
    _emit(
        {
            "event": "scenario",
            "name": spec.name,
            "rounds": spec.rounds,
            "nodes": spec.node_names,
            "aggregation": spec.aggregation,
            "warmup_ticks": spec.sim.resolved_warmup(),
        }
    )
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# topology

@main.group()
def topology():
    """Inspect compute graphs."""


@topology.command("show")
@click.argument("path", type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["text", "dot"]), default="text")
def topology_show(path, fmt):
    """Print the node and edge list of a scenario's compute graph."""
    spec = _load_spec_or_exit(path)
    topo = build_topology(spec)
    initial = [s for s in spec.setups.values() if s.joins_at is None]
    name_of = {s.node_id: s.name for s in initial}
    edges = sorted(
        ((name_of[a], name_of[b], mode.value) for (a, b), mode in topo.edges.items()),
    )
    if fmt == "dot":
        lines = ["digraph topology {"]
        for s in initial:
            lines.append(f'  "{s.name}";')
        for a, b, mode in edges:
            lines.append(f'  "{a}" -> "{b}" [label="{mode}"];')
        lines.append("}")
        sys.stdout.write("\n".join(lines) + "\n")
    else:
        for s in initial:
            sys.stdout.write(f"node {s.name}\n")
        for a, b, mode in edges:
            sys.stdout.write(f"edge {a} {b} {mode}\n")
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# tooling

@main.group()
def vectors_cmd():
    """Wire-protocol conformance vectors."""


main.add_command(vectors_cmd, name="vectors")


@vectors_cmd.command("generate")
@click.option("--out", "out_dir", type=click.Path(), default="conformance/vectors")
def vectors_generate(out_dir):
    """Regenerate the conformance vector files."""
    try:
        written = vectors.generate_vector_files(out_dir)
    except OSError as e:
        _fail(EXIT_IO, f"output: {e}")
    for p in written:
        click.echo(f"wrote {p}", err=True)
    sys.exit(EXIT_OK)


@main.group()
def dataset():
    """Synthetic dataset helpers."""


@dataset.command("export")
@click.option("--seed", type=int, default=1)
@click.option("--n", type=int, default=256)
@click.option("--d", type=int, default=4)
@click.option("--noise-std", type=float, default=0.1)
@click.option("--w-seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def dataset_export(seed, n, d, noise_std, w_seed, out_path):
    """Write a generated dataset as delimited text for debugging."""
    try:
        ds = gen_dataset(seed=seed, n=n, d=d, noise_std=noise_std, w_seed=w_seed)
    except Exception as e:
        _fail(EXIT_CONFIG, f"dataset: {e}")
    try:
        export_delimited(ds, out_path)
    except OSError as e:
        _fail(EXIT_IO, f"output: {e}")
    click.echo(f"wrote {out_path}", err=True)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
