"""The RFID interrogator: inventory rounds, access delivery, and the wire.

One Reader drives one World.  Inventory runs are organized as reader
operations ("rospecs"): pick antennas, run slotted rounds until the
requested virtual duration has elapsed, and report per-(antenna, tag)
read statistics.  Access operations target a single tag by EPC and
retry each command until it is acknowledged, actively refused, or out
of budget.

The Reader object itself satisfies the session interface the transfer
code wants (``slot_duration_ms`` + ``execute_access``), so in-process
callers use it directly.  ReaderServer/ReaderClient carry the same
operations over TCP with the binary framing from the llrp module;
RemoteReaderSession adapts the client back to the session interface so
callers cannot tell local from remote.
"""

from __future__ import annotations

import socket
import threading
from dataclasses import dataclass

from .gen2 import AccessResult, SlotKind, rounded_q, run_inventory_round
from .llrp import (
    AccessOp,
    AccessResultEntry,
    AddAccessSpec,
    AddROSpec,
    BlockWriteOp,
    CapabilitiesResponse,
    ChecksumOp,
    CommitOp,
    DecodeError,
    ErrorCode,
    ErrorMessage,
    FrameStream,
    GetCapabilities,
    GotoBiosOp,
    Keepalive,
    KeepaliveAck,
    Message,
    OpKind,
    ROAccessReport,
    ReadOp,
    StartROSpec,
    StopROSpec,
    SuccessMessage,
    TagReportEntry,
    encode,
)
from .rfchannel import GeometryError
from .tag import (
    ApplicationBehavior,
    MemoryAccessError,
    TagAck,
    TagMode,
    WORD_BYTES,
)
from .world import World

READER_MODEL = "tpcbed-sim"

OP_KIND_NAMES = {
    OpKind.READ: "read",
    OpKind.BLOCK_WRITE: "block-write",
    OpKind.GOTO_BIOS: "goto-bios",
    OpKind.CHECKSUM: "checksum",
    OpKind.COMMIT: "commit",
}
_OP_KIND_BY_NAME = {name: kind for kind, name in OP_KIND_NAMES.items()}


def op_kind_of(op: AccessOp) -> OpKind:
    if isinstance(op, ReadOp):
        return OpKind.READ
    if isinstance(op, BlockWriteOp):
        return OpKind.BLOCK_WRITE
    if isinstance(op, GotoBiosOp):
        return OpKind.GOTO_BIOS
    if isinstance(op, ChecksumOp):
        return OpKind.CHECKSUM
    if isinstance(op, CommitOp):
        return OpKind.COMMIT
    raise TypeError(f"not an access op: {type(op).__name__}")


@dataclass(frozen=True)
class TagObservation:
    """Read statistics for one (antenna, tag) pair over one report window."""

    antenna_id: int
    tag_id: int
    epc: bytes
    read_count: int
    mean_rssi_dbm: float
    last_rssi_dbm: float
    first_seen_ms: float
    last_seen_ms: float


@dataclass
class _Accumulator:
    tag_id: int
    read_count: int = 0
    rssi_total: float = 0.0
    last_rssi: float = 0.0
    first_seen_ms: float = 0.0
    last_seen_ms: float = 0.0


class Reader:
    """Drives inventory rounds and access deliveries against one World."""

    def __init__(self, world: World, event_sink=None):
        self.world = world
        self._sink = event_sink
        self.rospecs: dict[int, AddROSpec] = {}
        self.accessspecs: dict[int, AddAccessSpec] = {}

    @property
    def slot_duration_ms(self) -> float:
        return self.world.config.inventory.slot_duration_ms

    def _emit(self, sink, event: dict) -> None:
        if sink is not None:
            sink(event)

    # -- inventory --------------------------------------------------------

    def run_inventory(
        self,
        antenna_ids: tuple[int, ...],
        duration_ms: float,
        report_trigger: str = "end",
        report_interval_ms: float = 0.0,
        event_sink=None,
    ) -> list[list[TagObservation]]:
        """Alternate rounds over the antennas until the duration elapses.

        Returns report batches: one per interval for a periodic trigger,
        exactly one (possibly empty) for trigger "end".  A zero duration
        runs no rounds.  Each antenna keeps its own Q estimate for the
        length of the run.
        """
        if report_trigger not in ("end", "periodic"):
            raise ValueError(f"unknown report trigger {report_trigger!r}")
        if report_trigger == "periodic" and report_interval_ms <= 0:
            raise ValueError("periodic reports need a positive interval")
        for antenna_id in antenna_ids:
            self.world.config.geometry.antenna(antenna_id)  # raises if unknown

        sink = event_sink if event_sink is not None else self._sink
        world = self.world
        config = world.config.inventory
        clock = world.clock
        started_ms = clock.now_ms
        last_report_ms = started_ms

        q_fp: dict[int, float] = {a: float(config.q_initial) for a in antenna_ids}
        acc: dict[tuple[int, bytes], _Accumulator] = {}
        batches: list[list[TagObservation]] = []

        def flush() -> None:
            rows = [
                TagObservation(
                    antenna_id=key[0],
                    tag_id=a.tag_id,
                    epc=key[1],
                    read_count=a.read_count,
                    mean_rssi_dbm=a.rssi_total / a.read_count,
                    last_rssi_dbm=a.last_rssi,
                    first_seen_ms=a.first_seen_ms,
                    last_seen_ms=a.last_seen_ms,
                )
                for key, a in sorted(acc.items())
            ]
            batches.append(rows)
            acc.clear()

        turn = 0
        while clock.now_ms - started_ms < duration_ms:
            antenna_id = antenna_ids[turn % len(antenna_ids)]
            turn += 1
            # The antenna's carrier powers every tag it can see for the
            # whole round, so charge before asking anyone to reply.
            round_ms = (2 ** rounded_q(q_fp[antenna_id])) * config.slot_duration_ms
            world.harvest_all(antenna_id, round_ms)
            reachable = world.reachable(antenna_id)
            result = run_inventory_round(
                reachable,
                config,
                world.rng,
                q_fp=q_fp[antenna_id],
                start_time_ms=clock.now_ms,
            )
            q_fp[antenna_id] = result.q_fp_after

            collisions = 0
            singulated = 0
            for outcome in result.outcomes:
                if outcome.kind is SlotKind.COLLISION:
                    collisions += 1
                if outcome.tag_id is None:
                    continue
                singulated += 1
                tag = world.tag(outcome.tag_id)
                key = (antenna_id, tag.epc)
                entry = acc.get(key)
                if entry is None:
                    entry = _Accumulator(
                        tag_id=outcome.tag_id,
                        first_seen_ms=outcome.timestamp_ms,
                    )
                    acc[key] = entry
                entry.read_count += 1
                entry.rssi_total += outcome.rssi_dbm
                entry.last_rssi = outcome.rssi_dbm
                entry.last_seen_ms = outcome.timestamp_ms
                tag.inventoried = True

            clock.advance(result.duration_ms)
            if sink is not None:
                self._emit(
                    sink,
                    {
                        "event": "round",
                        "t": clock.iso(),
                        "antenna": antenna_id,
                        "slots": len(result.outcomes),
                        "singulated": singulated,
                        "collisions": collisions,
                    },
                )
            if (
                report_trigger == "periodic"
                and clock.now_ms - last_report_ms >= report_interval_ms
            ):
                flush()
                last_report_ms = clock.now_ms

        if report_trigger == "end" or acc:
            flush()
        return batches

    # -- access -----------------------------------------------------------

    def _dispatch(self, op: AccessOp, tag) -> TagAck | None:
        """Apply one delivered command to the tag; None means silence."""
        if isinstance(op, GotoBiosOp):
            return tag.on_goto_bios()
        if isinstance(op, BlockWriteOp):
            return tag.on_write_words(op.start_address, list(op.words))
        if isinstance(op, ReadOp):
            try:
                raw = tag.read_bytes(op.start_address, op.word_count * WORD_BYTES)
            except MemoryAccessError:
                return TagAck(False, "region-violation")
            words = tuple(
                raw[i] | (raw[i + 1] << 8) for i in range(0, len(raw), WORD_BYTES)
            )
            return TagAck(True, data=words)
        if isinstance(op, ChecksumOp):
            if tag.mode is not TagMode.BIOS:
                return TagAck(False, "wrong-mode")
            try:
                value = tag.compute_checksum(op.start_address, op.byte_length)
            except MemoryAccessError:
                return TagAck(False, "region-violation")
            return TagAck(True, data=(value,))
        if isinstance(op, CommitOp):
            return tag.commit_firmware(
                list(op.segments),
                ApplicationBehavior(
                    obeys_goto_bios=op.obeys_goto_bios,
                    responds_to_inventory=op.responds_to_inventory,
                ),
            )
        raise TypeError(f"not an access op: {type(op).__name__}")

    def _best_antenna(self, target_epc: bytes) -> tuple[int, ...]:
        tag = self.world.tag_by_epc(target_epc)
        all_ids = self.world.config.geometry.antenna_ids()
        if tag is None:
            return all_ids
        best = None
        for antenna_id in all_ids:
            try:
                quality = self.world.link(antenna_id, tag.tag_id)
            except GeometryError:
                continue
            if quality.delivery_probability <= 0.0:
                continue
            if best is None or quality.rssi_dbm > best[1]:
                best = (antenna_id, quality.rssi_dbm)
        return all_ids if best is None else (best[0],)

    def execute_access(
        self,
        ops,
        target_epc: bytes,
        antennas: tuple[int, ...] | None = None,
        max_retries: int = 16,
    ) -> list[AccessResult]:
        """Run access commands in order against one tag.

        Each command is retried up to ``max_retries`` times beyond the
        first attempt, alternating antennas attempt by attempt when more
        than one is enabled.  A command the tag actively refuses is not
        retried, and a failed command stops the sequence: no frames are
        spent on commands after a failure.
        """
        if not antennas:
            antennas = self._best_antenna(target_epc)
        else:
            for antenna_id in antennas:
                self.world.config.geometry.antenna(antenna_id)

        world = self.world
        clock = world.clock
        slot_ms = self.slot_duration_ms
        results: list[AccessResult] = []

        for op in ops:
            kind = OP_KIND_NAMES[op_kind_of(op)]
            attempts = 0
            success = False
            detail = None
            data: tuple[int, ...] = ()
            for attempt in range(max_retries + 1):
                antenna_id = antennas[attempt % len(antennas)]
                world.harvest_all(antenna_id, slot_ms)
                clock.advance(slot_ms)
                attempts += 1

                tag = world.tag_by_epc(target_epc)
                if tag is None or not tag.responsive:
                    continue
                try:
                    quality = world.link(antenna_id, tag.tag_id)
                except GeometryError:
                    continue
                p = quality.delivery_probability
                # Command and reply must both survive the link.
                if world.rng.random() >= p * p:
                    continue
                ack = self._dispatch(op, tag)
                if ack is None:
                    continue
                success = ack.ok
                detail = ack.reason
                data = tuple(ack.data)
                break

            result = AccessResult(
                kind=kind,
                target_epc=target_epc,
                success=success,
                attempts=attempts,
                detail=detail,
                data=data,
            )
            results.append(result)
            if self._sink is not None:
                self._emit(
                    self._sink,
                    {
                        "event": "access",
                        "t": clock.iso(),
                        "op": kind,
                        "target": target_epc.hex(),
                        "antennas": list(antennas),
                        "attempts": attempts,
                        "success": success,
                        "detail": detail,
                    },
                )
            if not success:
                break
        return results

    # -- stored specs -------------------------------------------------------

    def add_rospec(self, spec: AddROSpec) -> None:
        for antenna_id in spec.antenna_ids:
            self.world.config.geometry.antenna(antenna_id)
        self.rospecs[spec.rospec_id] = spec

    def add_accessspec(self, spec: AddAccessSpec) -> None:
        for antenna_id in spec.antenna_ids:
            self.world.config.geometry.antenna(antenna_id)
        self.accessspecs[spec.accessspec_id] = spec

    def run_rospec(self, rospec_id: int) -> list[list[TagObservation]]:
        spec = self.rospecs[rospec_id]
        return self.run_inventory(
            spec.antenna_ids,
            float(spec.duration_ms),
            spec.report_trigger,
            float(spec.report_interval_ms),
        )

    def run_accessspec(self, accessspec_id: int) -> list[AccessResult]:
        spec = self.accessspecs[accessspec_id]
        return self.execute_access(
            spec.ops,
            spec.target_epc,
            spec.antenna_ids or None,
            spec.max_retries,
        )


# -- wire conversions -------------------------------------------------------


def observation_to_entry(row: TagObservation) -> TagReportEntry:
    return TagReportEntry(
        epc=row.epc,
        antenna_id=row.antenna_id,
        read_count=row.read_count,
        mean_rssi_mdbm=round(row.mean_rssi_dbm * 1000),
        last_rssi_mdbm=round(row.last_rssi_dbm * 1000),
        first_seen_ms=round(row.first_seen_ms),
        last_seen_ms=round(row.last_seen_ms),
    )


def entry_to_observation(entry: TagReportEntry, tag_id: int = -1) -> TagObservation:
    return TagObservation(
        antenna_id=entry.antenna_id,
        tag_id=tag_id,
        epc=entry.epc,
        read_count=entry.read_count,
        mean_rssi_dbm=entry.mean_rssi_mdbm / 1000.0,
        last_rssi_dbm=entry.last_rssi_mdbm / 1000.0,
        first_seen_ms=float(entry.first_seen_ms),
        last_seen_ms=float(entry.last_seen_ms),
    )


def result_to_entry(result: AccessResult) -> AccessResultEntry:
    return AccessResultEntry(
        op_kind=int(_OP_KIND_BY_NAME[result.kind]),
        epc=result.target_epc,
        success=result.success,
        attempts=result.attempts,
        data=result.data,
        detail=result.detail or "",
    )


def entry_to_result(entry: AccessResultEntry) -> AccessResult:
    return AccessResult(
        kind=OP_KIND_NAMES[OpKind(entry.op_kind)],
        target_epc=entry.epc,
        success=entry.success,
        attempts=entry.attempts,
        detail=entry.detail or None,
        data=entry.data,
    )


# -- server -----------------------------------------------------------------


class ReaderServer:
    """Serves one Reader to one client at a time over TCP.

    A second concurrent connection is refused with a busy error rather
    than queued: interleaving two controllers on one RF front end would
    corrupt both of their runs.  Within a connection, decode errors on a
    well-framed message get an error reply and the connection survives;
    unframeable garbage (bad version, absurd length) ends it.
    """

    def __init__(self, reader: Reader, host: str = "127.0.0.1", port: int = 0):
        self.reader = reader
        self._sock = socket.create_server((host, port))
        # a plain close() does not wake a blocking accept() on Linux, so
        # poll: close() then costs at most one timeout tick
        self._sock.settimeout(0.1)
        self.host, self.port = self._sock.getsockname()[:2]
        self._busy = threading.Lock()
        self._closing = threading.Event()
        self._thread = threading.Thread(
            target=self._accept_loop, name="reader-server", daemon=True
        )

    def start(self) -> "ReaderServer":
        self._thread.start()
        return self

    def close(self) -> None:
        self._closing.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "ReaderServer":
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
            if not self._busy.acquire(blocking=False):
                try:
                    conn.sendall(
                        encode(
                            ErrorMessage(
                                0, int(ErrorCode.BUSY), "reader has an active client"
                            )
                        )
                    )
                finally:
                    conn.close()
                continue
            threading.Thread(
                target=self._serve, args=(conn,), daemon=True
            ).start()

    def _serve(self, conn: socket.socket) -> None:
        stream = FrameStream()
        try:
            while True:
                try:
                    chunk = conn.recv(65536)
                except OSError:
                    return
                if not chunk:
                    return
                try:
                    items = stream.feed(chunk)
                except DecodeError as exc:
                    conn.sendall(
                        encode(
                            ErrorMessage(
                                0, int(ErrorCode.MALFORMED), exc.kind.value
                            )
                        )
                    )
                    return
                for item in items:
                    if isinstance(item, DecodeError):
                        replies = [
                            ErrorMessage(
                                0, int(ErrorCode.MALFORMED), item.kind.value
                            )
                        ]
                    else:
                        replies = self._handle(item)
                    for reply in replies:
                        conn.sendall(encode(reply))
        finally:
            conn.close()
            self._busy.release()

    def _handle(self, msg: Message) -> list[Message]:
        reader = self.reader
        mid = msg.msg_id
        if isinstance(msg, GetCapabilities):
            return [
                CapabilitiesResponse(
                    mid,
                    model=READER_MODEL,
                    antenna_ids=reader.world.config.geometry.antenna_ids(),
                )
            ]
        if isinstance(msg, Keepalive):
            return [KeepaliveAck(mid)]
        if isinstance(msg, AddROSpec):
            try:
                reader.add_rospec(msg)
            except GeometryError as exc:
                return [ErrorMessage(mid, int(ErrorCode.UNKNOWN_ANTENNA), str(exc))]
            return [SuccessMessage(mid)]
        if isinstance(msg, AddAccessSpec):
            try:
                reader.add_accessspec(msg)
            except GeometryError as exc:
                return [ErrorMessage(mid, int(ErrorCode.UNKNOWN_ANTENNA), str(exc))]
            return [SuccessMessage(mid)]
        if isinstance(msg, StartROSpec):
            if msg.rospec_id in reader.rospecs:
                batches = reader.run_rospec(msg.rospec_id)
                replies: list[Message] = [
                    ROAccessReport(
                        mid,
                        tag_reports=tuple(
                            observation_to_entry(row) for row in batch
                        ),
                    )
                    for batch in batches
                ]
                replies.append(SuccessMessage(mid))
                return replies
            if msg.rospec_id in reader.accessspecs:
                results = reader.run_accessspec(msg.rospec_id)
                return [
                    ROAccessReport(
                        mid,
                        access_results=tuple(
                            result_to_entry(r) for r in results
                        ),
                    ),
                    SuccessMessage(mid),
                ]
            return [
                ErrorMessage(
                    mid, int(ErrorCode.UNKNOWN_ROSPEC), f"no spec {msg.rospec_id}"
                )
            ]
        if isinstance(msg, StopROSpec):
            known = (
                msg.rospec_id in reader.rospecs
                or msg.rospec_id in reader.accessspecs
            )
            if known:
                return [SuccessMessage(mid)]
            return [
                ErrorMessage(
                    mid, int(ErrorCode.UNKNOWN_ROSPEC), f"no spec {msg.rospec_id}"
                )
            ]
        return [
            ErrorMessage(
                mid, int(ErrorCode.BAD_STATE), "unexpected message direction"
            )
        ]


# -- client -----------------------------------------------------------------


class ReaderError(RuntimeError):
    """The reader answered a request with an error message."""

    def __init__(self, error: ErrorMessage):
        super().__init__(f"reader error {error.code}: {error.text}")
        self.error = error


_TERMINAL = (CapabilitiesResponse, KeepaliveAck, SuccessMessage, ErrorMessage)


class ReaderClient:
    """Blocking request/response client for a ReaderServer."""

    def __init__(self, host: str, port: int, timeout_s: float = 30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout_s)
        self._stream = FrameStream()
        self._pending: list[Message] = []
        self._next_id = 1

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "ReaderClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _take_id(self) -> int:
        mid = self._next_id
        self._next_id += 1
        return mid

    def _read_message(self) -> Message:
        while not self._pending:
            chunk = self._sock.recv(65536)
            if not chunk:
                raise ConnectionError("reader closed the connection")
            for item in self._stream.feed(chunk):
                if isinstance(item, DecodeError):
                    raise item
                self._pending.append(item)
        return self._pending.pop(0)

    def request(self, msg: Message) -> tuple[list[ROAccessReport], Message]:
        """Send one message, collect interim reports, return the terminal."""
        self._sock.sendall(encode(msg))
        reports: list[ROAccessReport] = []
        while True:
            reply = self._read_message()
            if isinstance(reply, ROAccessReport):
                reports.append(reply)
                continue
            if isinstance(reply, _TERMINAL):
                if isinstance(reply, ErrorMessage):
                    raise ReaderError(reply)
                return reports, reply
            raise ConnectionError(
                f"unexpected reply {type(reply).__name__}"
            )

    def capabilities(self) -> CapabilitiesResponse:
        _, reply = self.request(GetCapabilities(self._take_id()))
        assert isinstance(reply, CapabilitiesResponse)
        return reply

    def keepalive(self) -> None:
        self.request(Keepalive(self._take_id()))

    def run_inventory(
        self,
        antenna_ids: tuple[int, ...],
        duration_ms: int,
        report_trigger: str = "end",
        report_interval_ms: int = 0,
    ) -> list[list[TagReportEntry]]:
        rospec_id = self._take_id()
        self.request(
            AddROSpec(
                self._take_id(),
                rospec_id,
                tuple(antenna_ids),
                int(duration_ms),
                report_trigger,
                int(report_interval_ms),
            )
        )
        reports, _ = self.request(StartROSpec(self._take_id(), rospec_id))
        return [list(report.tag_reports) for report in reports]

    def execute_access(
        self,
        ops,
        target_epc: bytes,
        antennas: tuple[int, ...] | None = None,
        max_retries: int = 16,
    ) -> list[AccessResult]:
        spec_id = self._take_id()
        self.request(
            AddAccessSpec(
                self._take_id(),
                spec_id,
                target_epc,
                tuple(antennas or ()),
                int(max_retries),
                tuple(ops),
            )
        )
        reports, _ = self.request(StartROSpec(self._take_id(), spec_id))
        results: list[AccessResult] = []
        for report in reports:
            results.extend(entry_to_result(e) for e in report.access_results)
        return results


class RemoteReaderSession:
    """Session interface over a ReaderClient.

    The transfer code needs the slot pacing to convert frame counts to
    durations; the wire does not carry it, so the caller supplies the
    value it configured the far side with.
    """

    def __init__(self, client: ReaderClient, slot_duration_ms: float):
        self.client = client
        self.slot_duration_ms = slot_duration_ms

    def execute_access(
        self,
        ops,
        target_epc: bytes,
        antennas: tuple[int, ...] | None = None,
        max_retries: int = 16,
    ) -> list[AccessResult]:
        return self.client.execute_access(ops, target_epc, antennas, max_retries)


LocalReaderSession = Reader
