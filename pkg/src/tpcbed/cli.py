"""Command-line entry points.

Subcommands mirror the two experiment kinds plus the two network
daemons.  Everything an experiment writes (CSV tables, event logs)
is a pure function of --config and --seed, so rerunning a command
reproduces its outputs exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .controller import (
    ControlClient,
    ControlServer,
    ENVIRONMENTS,
    ExperimentLog,
    InventoryRow,
    TestbedController,
    antennas_for_environment,
    format_inventory_csv,
    format_reprogram_csv,
    write_inventory_csv,
    write_reprogram_csv,
)
from .reader import Reader, ReaderServer
from .wisent import TransferStats, load_firmware
from .world import World


def _parse_antenna_arg(text: str) -> tuple[int, ...]:
    if text in ENVIRONMENTS:
        return antennas_for_environment(text)
    try:
        return tuple(int(part) for part in text.split("+"))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected antenna ids like '2' or '2+3', or an environment "
            f"name from {sorted(ENVIRONMENTS)}; got {text!r}"
        ) from None


def _parse_tags_arg(text: str) -> tuple[int, ...]:
    """Tag lists: '0,1,5' plus ranges '0-5', mixed freely."""
    ids: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                ids.extend(range(int(lo), int(hi) + 1))
            else:
                ids.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tag list {text!r}") from None
    return tuple(ids)


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(
            f"expected HOST:PORT, got {text!r}"
        )
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpcbed",
        description="Deterministic desk-scale testbed for battery-free RFID tags.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=Path, default=None, help="YAML overrides for the testbed"
    )

    inv = sub.add_parser(
        "inventory", parents=[common], help="survey tags and write a read table"
    )
    inv.add_argument(
        "--antenna",
        type=_parse_antenna_arg,
        required=True,
        metavar="IDS|ENV",
        help="antenna ids like 2 or 2+3, or an environment name",
    )
    inv.add_argument("--duration", type=float, default=30.0, metavar="SECONDS")
    inv.add_argument("--seed", type=int, default=0)
    inv.add_argument("--out", type=Path, required=True, help="CSV output path")
    inv.add_argument("--log", type=Path, default=None, help="JSON-lines event log")
    inv.add_argument(
        "--connect",
        type=_parse_endpoint,
        default=None,
        metavar="HOST:PORT",
        help="run through a control server instead of in-process",
    )
    inv.add_argument("--user", default="cli", help="lease holder name for --connect")

    rep = sub.add_parser(
        "reprogram", parents=[common], help="send a firmware image to tags"
    )
    rep.add_argument(
        "--tags", type=_parse_tags_arg, required=True, metavar="LIST",
        help="tag ids, e.g. 0,1,2 or 0-5",
    )
    rep.add_argument("--firmware", type=Path, required=True, help="TI-TXT image")
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--out", type=Path, required=True, help="CSV output path")
    rep.add_argument("--log", type=Path, default=None, help="JSON-lines event log")
    rep.add_argument(
        "--connect", type=_parse_endpoint, default=None, metavar="HOST:PORT"
    )
    rep.add_argument("--user", default="cli")

    serve = sub.add_parser(
        "serve", parents=[common], help="run the multi-user control server"
    )
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)

    rserve = sub.add_parser(
        "reader-serve", parents=[common], help="expose the reader wire protocol"
    )
    rserve.add_argument("--host", default=None)
    rserve.add_argument("--port", type=int, default=None)
    rserve.add_argument("--seed", type=int, default=0)

    status = sub.add_parser("status", help="query a control server")
    status.add_argument(
        "--connect", type=_parse_endpoint, required=True, metavar="HOST:PORT"
    )

    return parser


def _open_log(path: Path | None) -> ExperimentLog | None:
    return None if path is None else ExperimentLog(path)


def _cmd_inventory(args) -> int:
    if args.connect is not None:
        host, port = args.connect
        with ControlClient(host, port) as client:
            lease = client.acquire(args.user)
            if not lease.get("ok"):
                print(f"error: {lease.get('detail', lease)}", file=sys.stderr)
                return 1
            try:
                reply = client.inventory(
                    lease["token"],
                    "+".join(str(a) for a in args.antenna),
                    args.duration,
                    args.seed,
                )
            finally:
                client.release(lease["token"])
        if not reply.get("ok"):
            print(f"error: {reply.get('detail', reply)}", file=sys.stderr)
            return 1
        rows = [
            InventoryRow(
                antenna_id=r["antenna"],
                tag_id=r["tag_id"],
                epc_hex=r["epc"],
                read_count=r["read_count"],
                mean_rssi_dbm=r["mean_rssi_dbm"],
            )
            for r in reply["rows"]
        ]
    else:
        config = load_config(args.config)
        controller = TestbedController(config)
        log = _open_log(args.log)
        try:
            rows = controller.run_inventory_experiment(
                args.antenna, args.duration, args.seed, log=log
            )
        finally:
            if log is not None:
                log.close()
    write_inventory_csv(rows, args.out)
    print(format_inventory_csv(rows), end="")
    return 0


def _cmd_reprogram(args) -> int:
    if args.connect is not None:
        host, port = args.connect
        firmware_text = args.firmware.read_text()
        image = load_firmware(args.firmware)
        behavior = {
            "obeys_goto_bios": image.obeys_goto_bios,
            "responds_to_inventory": image.responds_to_inventory,
        }
        with ControlClient(host, port) as client:
            lease = client.acquire(args.user)
            if not lease.get("ok"):
                print(f"error: {lease.get('detail', lease)}", file=sys.stderr)
                return 1
            try:
                reply = client.reprogram(
                    lease["token"], args.tags, firmware_text, behavior, args.seed
                )
            finally:
                client.release(lease["token"])
        if not reply.get("ok"):
            print(f"error: {reply.get('detail', reply)}", file=sys.stderr)
            return 1
        stats = [
            TransferStats(
                tag_id=r["tag_id"],
                antennas=tuple(r["antennas"]),
                messages_sent=r["messages_sent"],
                messages_retried=r["messages_retried"],
                virtual_duration_s=r["duration_s"],
                outcome=r["outcome"],
            )
            for r in reply["rows"]
        ]
    else:
        config = load_config(args.config)
        controller = TestbedController(config)
        image = load_firmware(args.firmware)
        log = _open_log(args.log)
        try:
            stats = controller.run_reprogram_experiment(
                args.tags, image, args.seed, log=log
            )
        finally:
            if log is not None:
                log.close()
    write_reprogram_csv(stats, args.out)
    print(format_reprogram_csv(stats), end="")
    return 0


def _cmd_serve(args) -> int:
    config = load_config(args.config)
    server = ControlServer(config, host=args.host, port=args.port).start()
    print(f"control server on {server.host}:{server.port}")
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.close()
    return 0


def _cmd_reader_serve(args) -> int:
    config = load_config(args.config)
    world = World(config, args.seed)
    reader = Reader(world)
    host = args.host if args.host is not None else config.controller.host
    port = args.port if args.port is not None else config.controller.reader_port
    server = ReaderServer(reader, host=host, port=port).start()
    print(f"reader on {server.host}:{server.port}")
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.close()
    return 0


def _cmd_status(args) -> int:
    host, port = args.connect
    with ControlClient(host, port) as client:
        print(json.dumps(client.status(), indent=2, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "inventory": _cmd_inventory,
        "reprogram": _cmd_reprogram,
        "serve": _cmd_serve,
        "reader-serve": _cmd_reader_serve,
        "status": _cmd_status,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
