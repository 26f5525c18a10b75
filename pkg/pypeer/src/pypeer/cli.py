"""Command line front end for the external peer."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .peer import EXIT_CONFIG, ExternalPeerConfig, peer_join_and_train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshfed-peer",
        description="External peer: joins a meshfed community over TCP in "
        "leech mode, downloads the model, trains locally and contributes "
        "weights back.",
    )
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--namespace")
    parser.add_argument("--bootstrap", action="append", default=None,
                        help="peer address host:port, repeatable")
    parser.add_argument("--listen", default=None)
    parser.add_argument("--rounds", type=int, default=None)
    parser.add_argument("--linger", type=float, default=None)
    parser.add_argument("--promote-threshold", type=int, default=None, dest="promote_threshold")
    parser.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    parser.add_argument("--handshake-timeout", type=float, default=None,
                        dest="handshake_timeout")
    parser.add_argument("--data-seed", type=int, default=None, dest="data_seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    raw = {}
    if args.config:
        try:
            raw = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            print(f"config: {e}", file=sys.stderr)
            return EXIT_CONFIG
        if not isinstance(raw, dict):
            print("config: must be a JSON object", file=sys.stderr)
            return EXIT_CONFIG
    for key in ("namespace", "listen", "rounds", "linger", "promote_threshold",
                "learning_rate", "handshake_timeout"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    if args.bootstrap:
        raw["bootstrap"] = list(args.bootstrap)
    if args.data_seed is not None:
        raw.setdefault("data", {})
        raw["data"]["seed"] = args.data_seed
    try:
        config = ExternalPeerConfig.from_mapping(raw)
    except (TypeError, ValueError) as e:
        print(f"config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return peer_join_and_train(config)


if __name__ == "__main__":
    sys.exit(main())
