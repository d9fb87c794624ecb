"""Lease management, experiment orchestration, result files, control protocol."""

import json
import threading

import pytest

from tpcbed.config import TagProfile, default_config
from tpcbed.controller import (
    ControlClient,
    ControlServer,
    ExperimentLog,
    InvalidToken,
    InventoryRow,
    LogWriteError,
    SessionManager,
    TestbedBusy as BusyError,
    TestbedController as Controller,
    antennas_for_environment,
    format_inventory_csv,
    format_reprogram_csv,
    write_inventory_csv,
)
from tpcbed.wisent import FirmwareImage, FirmwareSegment, TransferStats, parse_ti_txt

SMALL_FIRMWARE = "@4400\n01 02 03 04 05 06 07 08\nq\n"


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


class TestSessionManager:
    def test_acquire_then_busy(self):
        mgr = SessionManager(lease_timeout_s=300.0, clock=FakeClock())
        session = mgr.acquire("alice")
        assert len(session.token) == 32  # 16 random bytes, hex
        with pytest.raises(BusyError) as err:
            mgr.acquire("bob")
        assert err.value.holder == "alice"
        assert "alice" in str(err.value)
        assert err.value.expires_in_s == pytest.approx(300.0)

    def test_release_frees_the_lease(self):
        mgr = SessionManager(clock=FakeClock())
        session = mgr.acquire("alice")
        mgr.release(session.token)
        assert mgr.holder() is None
        mgr.acquire("bob")

    def test_release_needs_the_right_token(self):
        mgr = SessionManager(clock=FakeClock())
        mgr.acquire("alice")
        with pytest.raises(InvalidToken):
            mgr.release("not-the-token")

    def test_lease_expires_on_its_own(self):
        clock = FakeClock()
        mgr = SessionManager(lease_timeout_s=300.0, clock=clock)
        stale = mgr.acquire("alice")
        clock.now = 300.0
        second = mgr.acquire("bob")  # no release needed
        assert second.user == "bob"
        with pytest.raises(InvalidToken):
            mgr.validate(stale.token)

    def test_validate_renews_the_idle_timer(self):
        clock = FakeClock()
        mgr = SessionManager(lease_timeout_s=300.0, clock=clock)
        session = mgr.acquire("alice")
        clock.now = 200.0
        mgr.validate(session.token)
        clock.now = 450.0  # past the original expiry, inside the renewed one
        renewed = mgr.validate(session.token)
        assert renewed.acquired_at_s == 0.0
        clock.now = 751.0
        with pytest.raises(InvalidToken):
            mgr.validate(session.token)

    def test_tokens_are_unpredictable(self):
        clock = FakeClock()
        mgr = SessionManager(clock=clock)
        seen = set()
        for _ in range(32):
            session = mgr.acquire("u")
            seen.add(session.token)
            mgr.release(session.token)
        assert len(seen) == 32

    def test_storm_yields_exactly_one_winner(self):
        mgr = SessionManager(clock=FakeClock())
        n = 100
        barrier = threading.Barrier(n)
        wins, losses = [], []

        def contend(i):
            barrier.wait()
            try:
                wins.append(mgr.acquire(f"user-{i}"))
            except BusyError:
                losses.append(i)

        threads = [threading.Thread(target=contend, args=(i,)) for i in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(wins) == 1
        assert len(losses) == n - 1

        # after a release, the next contention round again has one winner
        mgr.release(wins[0].token)
        wins.clear()
        losses.clear()
        barrier.reset()
        threads = [threading.Thread(target=contend, args=(i,)) for i in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(wins) == 1


class TestExperimentLog:
    def test_lines_are_sorted_json(self, tmp_path):
        path = tmp_path / "run.jsonl"
        with ExperimentLog(path) as log:
            log.write({"zebra": 1, "alpha": 2})
            log.write({"event": "x"})
        lines = path.read_text().splitlines()
        assert lines[0] == '{"alpha": 2, "zebra": 1}'
        assert json.loads(lines[1]) == {"event": "x"}

    def test_unwritable_path_raises(self, tmp_path):
        with pytest.raises(LogWriteError):
            ExperimentLog(tmp_path)  # a directory, not a file

    def test_write_failure_raises(self, tmp_path):
        log = ExperimentLog(tmp_path / "run.jsonl")
        log._handle.close()
        with pytest.raises(LogWriteError):
            log.write({"event": "x"})

    def test_unserializable_event_raises(self, tmp_path):
        with ExperimentLog(tmp_path / "run.jsonl") as log:
            with pytest.raises(LogWriteError):
                log.write({"bad": {1, 2}})


class TestEnvironments:
    def test_known_names(self):
        assert antennas_for_environment("single-tag") == (1,)
        assert antennas_for_environment("multi-distance") == (2,)
        assert antennas_for_environment("multi-angle") == (3,)
        assert antennas_for_environment("dual") == (2, 3)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            antennas_for_environment("anechoic-chamber")


class TestInventoryExperiment:
    def test_rows_sorted_and_complete(self):
        controller = Controller(default_config())
        rows = controller.run_inventory_experiment((3, 2), 5.0, seed=4)
        keys = [(r.antenna_id, r.tag_id) for r in rows]
        assert keys == sorted(keys)
        assert {r.antenna_id for r in rows} == {2, 3}
        for row in rows:
            assert row.read_count > 0
            assert len(row.epc_hex) == 24

    def test_same_inputs_same_rows_and_log(self, tmp_path):
        controller = Controller(default_config())

        def run(name):
            with ExperimentLog(tmp_path / name) as log:
                rows = controller.run_inventory_experiment((2,), 6.0, seed=9, log=log)
            return rows, (tmp_path / name).read_bytes()

        rows_a, log_a = run("a.jsonl")
        rows_b, log_b = run("b.jsonl")
        assert rows_a == rows_b
        assert log_a == log_b
        assert b'"event": "experiment"' in log_a
        assert b'"event": "experiment-end"' in log_a

    def test_different_seed_changes_counts(self):
        controller = Controller(default_config())
        a = controller.run_inventory_experiment((2,), 6.0, seed=1)
        b = controller.run_inventory_experiment((2,), 6.0, seed=2)
        assert [(r.tag_id, r.read_count) for r in a] != [
            (r.tag_id, r.read_count) for r in b
        ]


class TestReprogramExperiment:
    def test_small_transfer_succeeds(self):
        controller = Controller(default_config())
        image = parse_ti_txt(SMALL_FIRMWARE)
        stats = controller.run_reprogram_experiment((1,), image, seed=0)
        assert len(stats) == 1
        assert stats[0].outcome == "success"
        assert stats[0].antennas == (2,)
        assert stats[0].messages_sent > 0
        assert stats[0].virtual_duration_s == pytest.approx(
            stats[0].messages_sent * 0.075
        )

    def test_flash_content_not_required_for_determinism(self):
        controller = Controller(default_config())
        image = parse_ti_txt(SMALL_FIRMWARE)
        a = controller.run_reprogram_experiment((1, 2), image, seed=5)
        b = controller.run_reprogram_experiment((1, 2), image, seed=5)
        assert a == b

    def test_goto_bios_deaf_app_aborts(self):
        config = default_config()
        config.tag_profiles[1] = TagProfile(obeys_goto_bios=False)
        controller = Controller(config)
        stats = controller.run_reprogram_experiment(
            (1,), parse_ti_txt(SMALL_FIRMWARE), seed=0
        )
        assert stats[0].outcome == "abort-timeout"
        # the whole abort window went out as goto-bios frames
        assert stats[0].virtual_duration_s == pytest.approx(
            config.transfer.abort_timeout_ms / 1000.0
        )

    def test_bootloader_image_refused_without_rf(self, tmp_path):
        controller = Controller(default_config())
        image = FirmwareImage((FirmwareSegment(0xFC00, b"\x00\x01"),))
        log_path = tmp_path / "run.jsonl"
        with ExperimentLog(log_path) as log:
            stats = controller.run_reprogram_experiment((1,), image, seed=0, log=log)
        assert stats[0].outcome == "region-violation"
        assert stats[0].messages_sent == 0
        events = [json.loads(l) for l in log_path.read_text().splitlines()]
        kinds = [e["event"] for e in events]
        assert "access" not in kinds  # nothing ever hit the air
        transfer = next(e for e in events if e["event"] == "transfer")
        assert transfer["outcome"] == "region-violation"


class TestResultFiles:
    def test_inventory_csv_golden(self, tmp_path):
        rows = [
            InventoryRow(2, 1, "e2" + "00" * 10 + "01", 51, -30.204),
            InventoryRow(2, 2, "e2" + "00" * 10 + "02", 39, -42.0),
        ]
        want = (
            "antenna,tag_id,epc,read_count,mean_rssi_dbm\n"
            "2,1,e20000000000000000000001,51,-30.20\n"
            "2,2,e20000000000000000000002,39,-42.00\n"
        )
        assert format_inventory_csv(rows) == want
        out = tmp_path / "inv.csv"
        write_inventory_csv(rows, out)
        assert out.read_text() == want

    def test_reprogram_csv_golden(self):
        stats = [
            TransferStats(1, (2,), 1551, 523, 116.325, "success"),
            TransferStats(4, (2, 3), 980, 120, 73.5, "abort-timeout"),
        ]
        want = (
            "tag_id,antennas,messages_sent,messages_retried,duration_s,outcome\n"
            "1,2,1551,523,116.325,success\n"
            "4,2+3,980,120,73.500,abort-timeout\n"
        )
        assert format_reprogram_csv(stats) == want


class TestControlProtocol:
    @pytest.fixture()
    def server(self):
        with ControlServer(default_config(), port=0) as srv:
            yield srv

    def test_full_session_cycle(self, server):
        with ControlClient(server.host, server.port) as client:
            status = client.status()
            assert status == {
                "ok": True,
                "busy": False,
                "holder": None,
                "environments": ["dual", "multi-angle", "multi-distance", "single-tag"],
                "antennas": [1, 2, 3],
            }

            grant = client.acquire("alice")
            assert grant["ok"] and len(grant["token"]) == 32

            busy = client.status()
            assert busy["busy"] and busy["holder"] == "alice"
            assert "token" not in busy

            rows = client.inventory(grant["token"], "multi-distance", 3.0, seed=1)
            assert rows["ok"]
            assert all(r["antenna"] == 2 for r in rows["rows"])
            assert [r["tag_id"] for r in rows["rows"]] == sorted(
                r["tag_id"] for r in rows["rows"]
            )

            result = client.reprogram(grant["token"], [1], SMALL_FIRMWARE)
            assert result["ok"]
            assert result["rows"][0]["outcome"] == "success"

            assert client.release(grant["token"]) == {"ok": True}
            assert not client.status()["busy"]

    def test_second_user_sees_busy(self, server):
        with ControlClient(server.host, server.port) as alice:
            grant = alice.acquire("alice")
            with ControlClient(server.host, server.port) as bob:
                denied = bob.acquire("bob")
                assert denied == {
                    "ok": False,
                    "error": "busy",
                    "detail": denied["detail"],
                    "holder": "alice",
                    "expires_in_s": denied["expires_in_s"],
                }
                assert "alice" in denied["detail"]
                # once alice releases, bob's retry wins
                alice.release(grant["token"])
                assert bob.acquire("bob")["ok"]

    def test_experiments_need_a_valid_token(self, server):
        with ControlClient(server.host, server.port) as client:
            reply = client.inventory("deadbeef", "dual", 1.0)
            assert reply == {
                "ok": False,
                "error": "invalid-token",
                "detail": "no such lease",
            }

    def test_antenna_forms(self, server):
        # "2+3", [2, 3], and the environment name must all mean the same
        # antenna set, so with a fixed seed the rows come out identical.
        with ControlClient(server.host, server.port) as client:
            token = client.acquire("alice")["token"]
            replies = [
                client.inventory(token, antennas, 3.0, seed=3)
                for antennas in ("2+3", [2, 3], "dual")
            ]
            assert all(r["ok"] for r in replies)
            assert replies[0]["rows"]
            assert replies[1] == replies[0]
            assert replies[2] == replies[0]
            assert {r["antenna"] for r in replies[0]["rows"]} <= {2, 3}

    def test_bad_requests(self, server):
        with ControlClient(server.host, server.port) as client:
            assert client.call({"cmd": "self-destruct"}) == {
                "ok": False,
                "error": "unknown-command",
                "detail": "self-destruct",
            }
            token = client.acquire("alice")["token"]
            reply = client.inventory(token, "mars-orbit", 1.0)
            assert reply["error"] == "bad-request"

    def test_malformed_json_line(self, server):
        import socket as socketlib

        raw = socketlib.create_connection((server.host, server.port), timeout=10.0)
        try:
            with raw.makefile("rwb") as stream:
                stream.write(b"this is not json\n")
                stream.flush()
                reply = json.loads(stream.readline())
                assert reply["ok"] is False and reply["error"] == "bad-request"

                stream.write(b"[1, 2, 3]\n")
                stream.flush()
                reply = json.loads(stream.readline())
                assert reply["error"] == "bad-request"

                # the connection is still usable afterwards
                stream.write(json.dumps({"cmd": "status"}).encode() + b"\n")
                stream.flush()
                assert json.loads(stream.readline())["ok"]
        finally:
            raw.close()

    def test_remote_rows_match_local_run(self, server):
        local = Controller(default_config()).run_inventory_experiment(
            (2,), 3.0, seed=1
        )
        with ControlClient(server.host, server.port) as client:
            token = client.acquire("x")["token"]
            remote = client.inventory(token, [2], 3.0, seed=1)["rows"]
        assert [(r["tag_id"], r["read_count"]) for r in remote] == [
            (r.tag_id, r.read_count) for r in local
        ]
        for got, want in zip(remote, local):
            assert got["mean_rssi_dbm"] == round(want.mean_rssi_dbm, 2)

    def test_tokens_never_appear_in_logs(self, tmp_path):
        # belt and braces: the experiment event stream must not leak the
        # lease token even if someone logs every server-side event
        config = default_config()
        controller = Controller(config)
        sessions = SessionManager()
        session = sessions.acquire("alice")
        log_path = tmp_path / "run.jsonl"
        with ExperimentLog(log_path) as log:
            controller.run_inventory_experiment((2,), 2.0, seed=0, log=log)
        assert session.token not in log_path.read_text()
