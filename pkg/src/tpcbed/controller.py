"""Multi-user front end: leases, experiments, and result files.

The testbed is a shared instrument.  One lease at a time grants the
right to run experiments; everyone else gets a busy answer that says
when the current lease would expire on its own.  Experiments are
deterministic functions of (configuration, seed): each run builds a
fresh simulation world, so two runs with the same inputs produce
byte-identical result tables and event logs.  Lease tokens are the one
exception to "log everything": they are capabilities, so they never
appear in any log or status reply.

The ControlServer speaks newline-delimited JSON over TCP, one request
object per line, one response object per line.  It exists so several
people (or CI jobs) can share a single simulated testbed the same way
the real cabinet is shared.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import secrets
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .config import TestbedConfig
from .reader import Reader, TagObservation
from .wisent import (
    FirmwareImage,
    TransferPolicy,
    TransferStats,
    choose_antennas,
    parse_ti_txt,
    reprogram,
)
from .world import World

#: Which antennas each named bench arrangement energizes.
ENVIRONMENTS = {
    "single-tag": (1,),
    "multi-distance": (2,),
    "multi-angle": (3,),
    "dual": (2, 3),
}


def antennas_for_environment(name: str) -> tuple[int, ...]:
    try:
        return ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(
            f"unknown environment {name!r}; pick from {sorted(ENVIRONMENTS)}"
        ) from None


class TestbedBusy(RuntimeError):
    def __init__(self, holder: str, expires_in_s: float):
        super().__init__(
            f"testbed leased to {holder!r}; lease expires in {expires_in_s:.0f}s"
        )
        self.holder = holder
        self.expires_in_s = expires_in_s


class InvalidToken(RuntimeError):
    pass


class LogWriteError(RuntimeError):
    """The experiment log could not be persisted; the run must not continue."""


@dataclass(frozen=True)
class Session:
    token: str
    user: str
    acquired_at_s: float
    expires_at_s: float


class SessionManager:
    """Hands out the single lease; safe to hammer from many threads."""

    def __init__(self, lease_timeout_s: float = 300.0, clock=time.monotonic):
        self._timeout = lease_timeout_s
        self._clock = clock
        self._lock = threading.Lock()
        self._current: Session | None = None

    def _expire_unlocked(self) -> None:
        if self._current is not None and self._clock() >= self._current.expires_at_s:
            self._current = None

    def acquire(self, user: str) -> Session:
        with self._lock:
            self._expire_unlocked()
            if self._current is not None:
                raise TestbedBusy(
                    self._current.user,
                    self._current.expires_at_s - self._clock(),
                )
            now = self._clock()
            self._current = Session(
                token=secrets.token_hex(16),
                user=user,
                acquired_at_s=now,
                expires_at_s=now + self._timeout,
            )
            return self._current

    def validate(self, token: str) -> Session:
        """Check a token and renew its idle timer."""
        with self._lock:
            self._expire_unlocked()
            current = self._current
            if current is None or current.token != token:
                raise InvalidToken("no such lease")
            renewed = Session(
                token=current.token,
                user=current.user,
                acquired_at_s=current.acquired_at_s,
                expires_at_s=self._clock() + self._timeout,
            )
            self._current = renewed
            return renewed

    def release(self, token: str) -> None:
        with self._lock:
            self._expire_unlocked()
            if self._current is None or self._current.token != token:
                raise InvalidToken("no such lease")
            self._current = None

    def holder(self) -> Session | None:
        with self._lock:
            self._expire_unlocked()
            return self._current


class ExperimentLog:
    """Append-only JSON-lines event log.

    Every event is one line, keys sorted, so identical event sequences
    serialize to identical bytes.  A write failure raises immediately:
    an experiment whose record cannot be kept must abort, not limp on.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            self._handle = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise LogWriteError(f"cannot open log {self.path}: {exc}") from exc

    def write(self, event: dict) -> None:
        try:
            self._handle.write(json.dumps(event, sort_keys=True) + "\n")
            self._handle.flush()
        except (OSError, TypeError, ValueError) as exc:
            raise LogWriteError(f"cannot append to {self.path}: {exc}") from exc

    def close(self) -> None:
        try:
            self._handle.close()
        except OSError as exc:
            raise LogWriteError(f"cannot close {self.path}: {exc}") from exc

    def __enter__(self) -> "ExperimentLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass(frozen=True)
class InventoryRow:
    antenna_id: int
    tag_id: int
    epc_hex: str
    read_count: int
    mean_rssi_dbm: float


class TestbedController:
    """Runs experiments against fresh worlds built from one configuration."""

    def __init__(self, config: TestbedConfig):
        config.validate()
        self.config = config

    def run_inventory_experiment(
        self,
        antenna_ids: tuple[int, ...],
        duration_s: float,
        seed: int = 0,
        log: ExperimentLog | None = None,
    ) -> list[InventoryRow]:
        """Survey each requested antenna for duration_s of virtual time.

        Antennas run one after another on the same world, so the later
        antenna's rounds start where the earlier one's clock stopped.
        """
        sink = log.write if log is not None else None
        world = World(self.config, seed)
        reader = Reader(world, event_sink=sink)
        if sink is not None:
            sink(
                {
                    "event": "experiment",
                    "kind": "inventory",
                    "antennas": list(antenna_ids),
                    "duration_s": duration_s,
                    "seed": seed,
                }
            )
        rows: list[InventoryRow] = []
        for antenna_id in antenna_ids:
            batches = reader.run_inventory((antenna_id,), duration_s * 1000.0)
            for batch in batches:
                rows.extend(_to_row(obs) for obs in batch)
        rows.sort(key=lambda r: (r.antenna_id, r.tag_id))
        if sink is not None:
            sink({"event": "experiment-end", "rows": len(rows)})
        return rows

    def run_reprogram_experiment(
        self,
        tag_ids: tuple[int, ...],
        image: FirmwareImage,
        seed: int = 0,
        policy: TransferPolicy | None = None,
        log: ExperimentLog | None = None,
    ) -> list[TransferStats]:
        """Reprogram the listed tags in order, one transfer per tag.

        Antenna choice is per tag: best link plus any within the tie
        window.  A tag with no usable link gets an abort row with zero
        frames; an image outside the writable region is refused before
        any RF happens at all.
        """
        policy = policy or self.config.transfer
        sink = log.write if log is not None else None
        world = World(self.config, seed)
        reader = Reader(world, event_sink=sink)
        if sink is not None:
            sink(
                {
                    "event": "experiment",
                    "kind": "reprogram",
                    "tags": list(tag_ids),
                    "seed": seed,
                    "image_bytes": image.byte_count,
                }
            )
        results: list[TransferStats] = []
        for tag_id in tag_ids:
            tag = world.tag(tag_id)
            antennas = choose_antennas(
                self.config.geometry,
                self.config.link,
                tag_id,
                tie_db=policy.antenna_tie_db,
            )
            if not antennas:
                stats = TransferStats(tag_id, (), 0, 0, 0.0, "abort-timeout")
            else:
                stats = reprogram(
                    tag.epc,
                    image,
                    reader,
                    policy=policy,
                    memory_map=tag.memory,
                    antennas=antennas,
                    tag_id=tag_id,
                )
            results.append(stats)
            if sink is not None:
                sink(
                    {
                        "event": "transfer",
                        "tag_id": stats.tag_id,
                        "antennas": list(stats.antennas),
                        "messages_sent": stats.messages_sent,
                        "messages_retried": stats.messages_retried,
                        "duration_s": round(stats.virtual_duration_s, 3),
                        "outcome": stats.outcome,
                    }
                )
        if sink is not None:
            sink({"event": "experiment-end", "rows": len(results)})
        return results


def _to_row(obs: TagObservation) -> InventoryRow:
    return InventoryRow(
        antenna_id=obs.antenna_id,
        tag_id=obs.tag_id,
        epc_hex=obs.epc.hex(),
        read_count=obs.read_count,
        mean_rssi_dbm=obs.mean_rssi_dbm,
    )


# -- result files -----------------------------------------------------------


def format_inventory_csv(rows: list[InventoryRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["antenna", "tag_id", "epc", "read_count", "mean_rssi_dbm"])
    for row in rows:
        writer.writerow(
            [
                row.antenna_id,
                row.tag_id,
                row.epc_hex,
                row.read_count,
                f"{row.mean_rssi_dbm:.2f}",
            ]
        )
    return out.getvalue()


def format_reprogram_csv(stats: list[TransferStats]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(
        [
            "tag_id",
            "antennas",
            "messages_sent",
            "messages_retried",
            "duration_s",
            "outcome",
        ]
    )
    for row in stats:
        writer.writerow(
            [
                row.tag_id,
                "+".join(str(a) for a in row.antennas),
                row.messages_sent,
                row.messages_retried,
                f"{row.virtual_duration_s:.3f}",
                row.outcome,
            ]
        )
    return out.getvalue()


def write_inventory_csv(rows: list[InventoryRow], path: str | Path) -> None:
    Path(path).write_text(format_inventory_csv(rows), encoding="utf-8")


def write_reprogram_csv(stats: list[TransferStats], path: str | Path) -> None:
    Path(path).write_text(format_reprogram_csv(stats), encoding="utf-8")


# -- network control --------------------------------------------------------


class ControlServer:
    """Newline-delimited JSON control endpoint.

    Any number of clients may connect; the lease decides who may run
    experiments.  Requests: acquire, release, status, inventory,
    reprogram.  Responses always carry "ok"; failures add "error" and
    a human-readable "detail".
    """

    def __init__(
        self,
        config: TestbedConfig,
        host: str | None = None,
        port: int | None = None,
    ):
        self.config = config
        self.controller = TestbedController(config)
        self.sessions = SessionManager(config.controller.lease_timeout_s)
        bind_host = host if host is not None else config.controller.host
        bind_port = port if port is not None else config.controller.control_port
        self._sock = socket.create_server((bind_host, bind_port))
        # closing the listener does not wake a blocking accept(); poll
        self._sock.settimeout(0.1)
        self.host, self.port = self._sock.getsockname()[:2]
        self._closing = threading.Event()
        self._thread = threading.Thread(
            target=self._accept_loop, name="control-server", daemon=True
        )

    def start(self) -> "ControlServer":
        self._thread.start()
        return self

    def close(self) -> None:
        self._closing.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "ControlServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._sock.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            conn.settimeout(None)
            threading.Thread(
                target=self._serve, args=(conn,), daemon=True
            ).start()

    def _serve(self, conn: socket.socket) -> None:
        try:
            with conn.makefile("rwb") as stream:
                for line in stream:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        request = json.loads(line)
                        if not isinstance(request, dict):
                            raise ValueError("request must be an object")
                    except ValueError as exc:
                        reply = {
                            "ok": False,
                            "error": "bad-request",
                            "detail": str(exc),
                        }
                    else:
                        reply = self._handle(request)
                    stream.write(json.dumps(reply, sort_keys=True).encode() + b"\n")
                    stream.flush()
        except (OSError, ValueError):
            pass
        finally:
            conn.close()

    def _handle(self, request: dict) -> dict:
        cmd = request.get("cmd")
        try:
            if cmd == "acquire":
                user = str(request.get("user", "anonymous"))
                session = self.sessions.acquire(user)
                return {
                    "ok": True,
                    "token": session.token,
                    "expires_in_s": self.config.controller.lease_timeout_s,
                }
            if cmd == "release":
                self.sessions.release(str(request.get("token", "")))
                return {"ok": True}
            if cmd == "status":
                holder = self.sessions.holder()
                return {
                    "ok": True,
                    "busy": holder is not None,
                    "holder": None if holder is None else holder.user,
                    "environments": sorted(ENVIRONMENTS),
                    "antennas": list(self.config.geometry.antenna_ids()),
                }
            if cmd == "inventory":
                self.sessions.validate(str(request.get("token", "")))
                antennas = _parse_antennas(request.get("antennas"))
                rows = self.controller.run_inventory_experiment(
                    antennas,
                    float(request.get("duration_s", 30.0)),
                    int(request.get("seed", 0)),
                )
                return {
                    "ok": True,
                    "rows": [
                        {
                            "antenna": r.antenna_id,
                            "tag_id": r.tag_id,
                            "epc": r.epc_hex,
                            "read_count": r.read_count,
                            "mean_rssi_dbm": round(r.mean_rssi_dbm, 2),
                        }
                        for r in rows
                    ],
                }
            if cmd == "reprogram":
                self.sessions.validate(str(request.get("token", "")))
                image = parse_ti_txt(str(request.get("firmware_text", "")))
                behavior = request.get("behavior", {})
                if behavior:
                    image = dataclasses.replace(
                        image,
                        obeys_goto_bios=bool(
                            behavior.get("obeys_goto_bios", True)
                        ),
                        responds_to_inventory=bool(
                            behavior.get("responds_to_inventory", True)
                        ),
                    )
                tag_ids = tuple(int(t) for t in request.get("tags", ()))
                stats = self.controller.run_reprogram_experiment(
                    tag_ids, image, int(request.get("seed", 0))
                )
                return {
                    "ok": True,
                    "rows": [
                        {
                            "tag_id": s.tag_id,
                            "antennas": list(s.antennas),
                            "messages_sent": s.messages_sent,
                            "messages_retried": s.messages_retried,
                            "duration_s": round(s.virtual_duration_s, 3),
                            "outcome": s.outcome,
                        }
                        for s in stats
                    ],
                }
            return {"ok": False, "error": "unknown-command", "detail": str(cmd)}
        except TestbedBusy as exc:
            return {
                "ok": False,
                "error": "busy",
                "detail": str(exc),
                "holder": exc.holder,
                "expires_in_s": round(exc.expires_in_s, 1),
            }
        except InvalidToken as exc:
            return {"ok": False, "error": "invalid-token", "detail": str(exc)}
        except (ValueError, KeyError) as exc:
            return {"ok": False, "error": "bad-request", "detail": str(exc)}


def _parse_antennas(value) -> tuple[int, ...]:
    if value is None:
        raise ValueError("antennas required")
    if isinstance(value, str):
        if value in ENVIRONMENTS:
            return ENVIRONMENTS[value]
        return tuple(int(part) for part in value.split("+"))
    return tuple(int(v) for v in value)


class ControlClient:
    """One connection to a ControlServer; one call per request line."""

    def __init__(self, host: str, port: int, timeout_s: float = 120.0):
        self._sock = socket.create_connection((host, port), timeout=timeout_s)
        self._stream = self._sock.makefile("rwb")

    def close(self) -> None:
        try:
            self._stream.close()
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "ControlClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def call(self, request: dict) -> dict:
        self._stream.write(json.dumps(request).encode() + b"\n")
        self._stream.flush()
        line = self._stream.readline()
        if not line:
            raise ConnectionError("control server closed the connection")
        return json.loads(line)

    def acquire(self, user: str) -> dict:
        return self.call({"cmd": "acquire", "user": user})

    def release(self, token: str) -> dict:
        return self.call({"cmd": "release", "token": token})

    def status(self) -> dict:
        return self.call({"cmd": "status"})

    def inventory(
        self, token: str, antennas, duration_s: float, seed: int = 0
    ) -> dict:
        return self.call(
            {
                "cmd": "inventory",
                "token": token,
                "antennas": antennas,
                "duration_s": duration_s,
                "seed": seed,
            }
        )

    def reprogram(
        self,
        token: str,
        tags,
        firmware_text: str,
        behavior: dict | None = None,
        seed: int = 0,
    ) -> dict:
        return self.call(
            {
                "cmd": "reprogram",
                "token": token,
                "tags": list(tags),
                "firmware_text": firmware_text,
                "behavior": behavior or {},
                "seed": seed,
            }
        )
