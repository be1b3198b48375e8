"""Command line entry point: ``svsp keygen|serve|fetch|attack|simulate``.

Settings resolve as flag > ``SVSP_<KEY>`` environment variable > ``--config``
file (``key = value`` lines, ``#`` comments) > built-in default.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import random
import signal
import sys
import threading
from typing import Any, Callable, Optional, Sequence

from .crypto import MIN_RSA_BITS, rsa_keygen
from .endpoints import (
    ServerConfig,
    Server,
    attack_no_token,
    attack_replay,
    fetch,
    simulate_fetch,
)
from .protocol.client import ClientParams
from .protocol.server import ServerParams
from .transport.sim import NetConditions, summarize
from .transport.udp import TransportError, parse_address

EXIT_OK = 0
EXIT_UNCONTAINED = 1
EXIT_USAGE = 2
EXIT_HALTED = 3
EXIT_ABORTED = 4

ENV_PREFIX = "SVSP_"


class ConfigError(Exception):
    pass


def _delay(text: str) -> tuple[int, int]:
    lo, sep, hi = str(text).partition(":")
    if not sep:
        raise ValueError(f"expected MIN:MAX, got {text!r}")
    lo, hi = int(lo), int(hi)
    if lo < 0 or lo > hi:
        raise ValueError(f"delay needs 0 <= MIN <= MAX, got {text!r}")
    return lo, hi


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{text} is not in [0, 1]")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError(f"{text} must be positive")
    return value


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError(f"{text} must be non-negative")
    return value


# key -> (parser, default)
SETTINGS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "log": (str, "info"),
    "bits": (int, None),
    "seed": (int, None),
    "bind": (str, "127.0.0.1:9000"),
    "root": (str, None),
    "window": (_positive, 32),
    "chunk_size": (_positive, 1024),
    "token_timeout_ms": (_positive, 2000),
    "max_pokes": (_nonneg, 3),
    "server": (str, None),
    "name": (str, None),
    "out": (str, None),
    "mode": (str, None),
    "loss": (_fraction, 0.0),
    "reorder": (_fraction, 0.0),
    "dup": (_fraction, 0.0),
    "delay": (_delay, (0, 0)),
    "size": (_nonneg, 1 << 20),
    "attacker": (str, None),
    "trace": (str, None),
}


def read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            if key not in SETTINGS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value.strip()
    return values


def read_environment(environ: Optional[dict[str, str]] = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    values = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in SETTINGS:
            raise ConfigError(f"unknown environment setting {name}")
        values[key] = value
    return values


def resolve(args: argparse.Namespace, environ: Optional[dict[str, str]] = None) -> dict[str, Any]:
    """Merge flags, environment and config file into typed settings."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    env_values = read_environment(environ)
    merged: dict[str, Any] = {}
    for key, (parse, default) in SETTINGS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            raw, origin = flag, "flag"
        elif key in env_values:
            raw, origin = env_values[key], f"{ENV_PREFIX}{key.upper()}"
        elif key in file_values:
            raw, origin = file_values[key], "config file"
        else:
            merged[key] = default
            continue
        try:
            merged[key] = parse(str(raw))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key} ({origin}): {exc}") from None
    if logging.getLevelName(str(merged["log"]).upper()) not in range(0, 51):
        raise ConfigError(f"unknown log level {merged['log']!r}")
    return merged


def _require(settings: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def _print_lines(lines: Sequence[str]) -> None:
    sys.stdout.write("".join(line + "\n" for line in lines))
    sys.stdout.flush()


def _exit_for(report) -> int:
    return {"done": EXIT_OK, "halted": EXIT_HALTED}.get(report.outcome, EXIT_ABORTED)


def cmd_keygen(s: dict[str, Any]) -> int:
    _require(s, "bits")
    if s["bits"] < MIN_RSA_BITS:
        raise ConfigError(f"--bits {s['bits']} is below the minimum of {MIN_RSA_BITS}")
    pair = rsa_keygen(s["bits"], s["seed"])
    _print_lines([f"p={pair.p}", f"q={pair.q}", f"n={pair.n}", f"e={pair.e}", f"d={pair.d}"])
    return EXIT_OK


def cmd_serve(s: dict[str, Any]) -> int:
    _require(s, "root")
    if not os.path.isdir(s["root"]):
        raise ConfigError(f"content root {s['root']!r} is not a directory")
    config = ServerConfig(
        bind=parse_address(s["bind"]), root=s["root"], chunk_size=s["chunk_size"],
        window_size=s["window"], token_timeout_ms=s["token_timeout_ms"],
        max_pokes=s["max_pokes"], log_level=s["log"])
    try:
        ServerParams(config.chunk_size, config.window_size, config.token_timeout_ms, config.max_pokes)
        server = Server(config)
    except (ValueError, TransportError) as exc:
        raise ConfigError(str(exc)) from None

    def stop(signum, frame) -> None:
        server.shutdown()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, stop)
        signal.signal(signal.SIGINT, stop)
    server.serve_forever()
    return EXIT_OK


def cmd_fetch(s: dict[str, Any]) -> int:
    _require(s, "server", "name", "out")
    server = parse_address(s["server"])
    with open(s["out"], "wb") as sink:
        report = fetch(server, s["name"], sink, s["seed"])
    _print_lines(report.lines())
    return _exit_for(report)


def cmd_attack(s: dict[str, Any]) -> int:
    _require(s, "mode", "server", "name")
    server = parse_address(s["server"])
    if s["mode"] == "no-token":
        report = attack_no_token(server, s["name"], s["seed"])
    elif s["mode"] == "replay":
        report = attack_replay(server, s["name"], seed=s["seed"])
    else:
        raise ConfigError(f"unknown attack mode {s['mode']!r}")
    _print_lines(report.lines() + [f"contained={str(report.contained).lower()}"])
    return EXIT_OK if report.contained else EXIT_UNCONTAINED


def cmd_simulate(s: dict[str, Any]) -> int:
    seed = s["seed"] if s["seed"] is not None else 0
    attacker = s["attacker"]
    if attacker not in (None, "no-token", "replay"):
        raise ConfigError(f"unknown attacker {attacker!r}")
    try:
        conditions = NetConditions(loss_prob=s["loss"], reorder_prob=s["reorder"],
                                   duplicate_prob=s["dup"], delay_ms=s["delay"], seed=seed)
        params = ServerParams(s["chunk_size"], s["window"], s["token_timeout_ms"], s["max_pokes"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    content = random.Random(seed).randbytes(s["size"])
    outcome = simulate_fetch(content, conditions, server_params=params,
                             client_params=ClientParams(), attacker=attacker)
    result, report = outcome.result, outcome.report
    if s["trace"]:
        result.write_trace(s["trace"])
    server_stats = result.server.stats
    lines = [f"{k}={v}" for k, v in sorted(summarize(result.trace).items())]
    lines += [
        f"virtual_time_ms={result.end_time_ms}",
        f"server_phase={type(result.server.phase).__name__}",
        f"server_retransmissions={server_stats.chunks_retransmitted}",
        f"server_pokes={server_stats.pokes_sent}",
        f"leaked_bytes={report.bytes_received if attacker else 0}",
        f"content_match={str(outcome.content_ok).lower()}",
        f"content_sha256={hashlib.sha256(content).hexdigest()}",
    ]
    lines += report.lines()
    if attacker:
        lines.append(f"contained={str(report.contained).lower()}")
    _print_lines(lines)
    if attacker:
        return EXIT_OK if report.contained else EXIT_UNCONTAINED
    return _exit_for(report)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svsp", description="Token-gated datagram streaming.")
    parser.add_argument("--config", help="key=value settings file")
    parser.add_argument("--log", help="log level for stderr (debug, info, warning)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a textbook RSA keypair")
    p.add_argument("--bits", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("serve", help="serve files from a directory")
    p.add_argument("--root")
    p.add_argument("--bind")
    p.add_argument("--window", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--token-timeout-ms", dest="token_timeout_ms", type=int)
    p.add_argument("--max-pokes", dest="max_pokes", type=int)

    p = sub.add_parser("fetch", help="download as the legitimate client")
    p.add_argument("--server")
    p.add_argument("--name")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("attack", help="run a download-manager attacker")
    p.add_argument("--mode", choices=("no-token", "replay"))
    p.add_argument("--server")
    p.add_argument("--name")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="run one session on the network simulator")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss")
    p.add_argument("--reorder")
    p.add_argument("--dup")
    p.add_argument("--delay", help="MIN:MAX milliseconds")
    p.add_argument("--size", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--token-timeout-ms", dest="token_timeout_ms", type=int)
    p.add_argument("--max-pokes", dest="max_pokes", type=int)
    p.add_argument("--attacker", choices=("no-token", "replay"))
    p.add_argument("--trace", help="write the SimEvent sequence as JSON lines")
    return parser


COMMANDS = {
    "keygen": cmd_keygen,
    "serve": cmd_serve,
    "fetch": cmd_fetch,
    "attack": cmd_attack,
    "simulate": cmd_simulate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = resolve(args)
    except (ConfigError, OSError) as exc:
        print(f"svsp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, level=settings["log"].upper(),
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](settings)
    except ConfigError as exc:
        print(f"svsp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TransportError as exc:
        print(f"svsp: transport error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
