"""Data channel tests: manifest hashing, chunk arithmetic, mirror sync."""

import hashlib
import threading
import time

import pytest

from ice import policy as policy_mod
from ice.client import ConnectError, RemoteError
from ice.datachannel import (
    CHUNK_SIZE,
    Manifest,
    StoreClient,
    StoreServer,
    SYNC_REPORT_NAME,
    build_manifest,
    chunk_count,
    hash_file,
    load_sync_report,
    safe_file_id,
    sync_once,
    watch_and_sync,
)
from ice.wire import IceError

from conftest import get_free_port, wait_until


@pytest.fixture
def store(tmp_path):
    store_dir = tmp_path / "store"
    store_dir.mkdir()
    server = StoreServer(store_dir, port=get_free_port()).start()
    yield server, store_dir, tmp_path / "mirror"
    server.stop()


class TestBuildManifest:
    def test_empty_directory(self, tmp_path):
        manifest = build_manifest(tmp_path)
        assert manifest.generation == 1
        assert manifest.records == []

    def test_single_file_hash_matches_independent_digest(self, tmp_path):
        (tmp_path / "m.bin").write_bytes(b"abcd")
        manifest = build_manifest(tmp_path)
        assert len(manifest.records) == 1
        record = manifest.records[0]
        assert record.file_id == "m.bin"
        assert record.size_bytes == 4
        # oracle: hashlib directly over the known bytes
        assert record.sha256 == hashlib.sha256(b"abcd").hexdigest()

    def test_deterministic_for_fixed_contents(self, tmp_path):
        for i in range(5):
            (tmp_path / f"f{i}.dat").write_bytes(bytes([i]) * 100)
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "deep.dat").write_bytes(b"deep")
        first = build_manifest(tmp_path)
        second = build_manifest(tmp_path)
        assert first.records == second.records
        assert [r.file_id for r in first.records] == sorted(r.file_id for r in first.records)
        assert "sub/deep.dat" in [r.file_id for r in first.records]

    def test_sidecar_pairing(self, tmp_path):
        (tmp_path / "scan-1.icem").write_bytes(b"ICEM...")
        (tmp_path / "scan-1.meta.json").write_text("{}")
        (tmp_path / "scan-2.icem").write_bytes(b"ICEM...")
        manifest = build_manifest(tmp_path)
        by_id = {r.file_id: r for r in manifest.records}
        assert by_id["scan-1.icem"].sidecar == "scan-1.meta.json"
        assert by_id["scan-2.icem"].sidecar is None

    def test_missing_directory_is_internal(self, tmp_path):
        with pytest.raises(IceError) as err:
            build_manifest(tmp_path / "ghost")
        assert err.value.code == "Internal"

    def test_wire_roundtrip(self, tmp_path):
        (tmp_path / "a").write_bytes(b"a")
        manifest = build_manifest(tmp_path)
        assert Manifest.from_dict(manifest.to_dict()) == manifest


class TestChunkArithmetic:
    def test_chunk_count_boundaries(self):
        assert chunk_count(0) == 0
        assert chunk_count(1) == 1
        assert chunk_count(CHUNK_SIZE - 1) == 1
        assert chunk_count(CHUNK_SIZE) == 1
        assert chunk_count(CHUNK_SIZE + 1) == 2

    @pytest.mark.parametrize("size", [1, CHUNK_SIZE - 1, CHUNK_SIZE, CHUNK_SIZE + 1])
    def test_chunk_reassembly_equals_original(self, store, size):
        server, store_dir, _ = store
        blob = bytes(i % 251 for i in range(size))
        (store_dir / "blob.bin").write_bytes(blob)
        with StoreClient(server.endpoint) as client:
            manifest = client.manifest()
            record = manifest.records[0]
            assert record.size_bytes == size
            rebuilt = b"".join(
                client.get_chunk("blob.bin", i) for i in range(chunk_count(size))
            )
        assert rebuilt == blob

    def test_one_mib_plus_one_chunk_sizes(self, store):
        server, store_dir, _ = store
        (store_dir / "big.bin").write_bytes(b"z" * (CHUNK_SIZE + 1))
        with StoreClient(server.endpoint) as client:
            client.manifest()
            assert len(client.get_chunk("big.bin", 0)) == CHUNK_SIZE
            assert len(client.get_chunk("big.bin", 1)) == 1
            with pytest.raises(RemoteError) as err:
                client.get_chunk("big.bin", 2)
            assert err.value.code == "OutOfRange"

    def test_unknown_file_not_found(self, store):
        server, _, _ = store
        with StoreClient(server.endpoint) as client:
            client.manifest()
            with pytest.raises(RemoteError) as err:
                client.get_chunk("ghost.bin", 0)
            assert err.value.code == "NotFound"

    def test_path_escape_rejected(self, store):
        server, _, _ = store
        with StoreClient(server.endpoint) as client:
            with pytest.raises(RemoteError) as err:
                client.get_chunk("../secret", 0)
            assert err.value.code == "InvalidParams"
        with pytest.raises(IceError):
            safe_file_id("/etc/passwd")
        with pytest.raises(IceError):
            safe_file_id("a/../../b")


class TestManifestGeneration:
    def test_generation_bumps_only_on_change(self, store):
        server, store_dir, _ = store
        with StoreClient(server.endpoint) as client:
            assert client.manifest().generation == 1
            assert client.manifest().generation == 1  # unchanged
            (store_dir / "new.bin").write_bytes(b"x")
            assert client.manifest().generation == 2
            assert client.manifest().generation == 2


class TestSyncOnce:
    def test_transfer_then_idempotent_second_sync(self, store):
        server, store_dir, mirror = store
        payloads = {f"f{i}.bin": bytes([i]) * (1000 + i) for i in range(3)}
        for name, blob in payloads.items():
            (store_dir / name).write_bytes(blob)
        report = sync_once(server.endpoint, mirror)
        assert report.files_examined == 3
        assert report.files_transferred == 3
        assert report.bytes_transferred == sum(len(b) for b in payloads.values())
        assert report.files_verified == 3
        assert report.mismatches == []
        # mirror byte-identical: re-hash both sides
        for name, blob in payloads.items():
            assert (mirror / name).read_bytes() == blob
            assert hash_file(mirror / name) == hash_file(store_dir / name)
        second = sync_once(server.endpoint, mirror)
        assert second.files_transferred == 0
        assert second.bytes_transferred == 0
        assert second.files_verified == 3

    def test_corrupted_local_file_is_retransferred(self, store):
        server, store_dir, mirror = store
        (store_dir / "a.bin").write_bytes(b"a" * 100)
        (store_dir / "b.bin").write_bytes(b"b" * 100)
        sync_once(server.endpoint, mirror)
        (mirror / "a.bin").write_bytes(b"garbage")
        report = sync_once(server.endpoint, mirror)
        assert report.files_transferred == 1
        assert report.bytes_transferred == 100
        assert (mirror / "a.bin").read_bytes() == b"a" * 100

    def test_subdirectories_and_empty_files(self, store):
        server, store_dir, mirror = store
        (store_dir / "sub").mkdir()
        (store_dir / "sub" / "nested.bin").write_bytes(b"n")
        (store_dir / "empty.bin").write_bytes(b"")
        report = sync_once(server.endpoint, mirror)
        assert report.files_transferred == 2
        assert (mirror / "sub" / "nested.bin").read_bytes() == b"n"
        assert (mirror / "empty.bin").read_bytes() == b""

    def test_no_partial_files_visible_under_final_name(self, store):
        server, store_dir, mirror = store
        (store_dir / "big.bin").write_bytes(b"q" * (2 * CHUNK_SIZE + 5))
        seen_sizes = []
        stop = threading.Event()

        def watcher():
            while not stop.is_set():
                target = mirror / "big.bin"
                if target.exists():
                    seen_sizes.append(target.stat().st_size)
                time.sleep(0.001)

        thread = threading.Thread(target=watcher)
        thread.start()
        try:
            sync_once(server.endpoint, mirror)
        finally:
            stop.set()
            thread.join()
        assert set(seen_sizes) <= {2 * CHUNK_SIZE + 5}

    def test_digest_mismatch_after_retries_recorded_others_unaffected(self, store, monkeypatch):
        server, store_dir, mirror = store
        (store_dir / "good.bin").write_bytes(b"g" * 50)
        (store_dir / "bad.bin").write_bytes(b"b" * 50)
        real_get_chunk = StoreClient.get_chunk

        def corrupting(self, file_id, index):
            data = real_get_chunk(self, file_id, index)
            if file_id == "bad.bin":
                return b"X" + data[1:]  # persistent transport corruption
            return data

        monkeypatch.setattr(StoreClient, "get_chunk", corrupting)
        report = sync_once(server.endpoint, mirror)
        assert report.files_examined == 2
        assert report.files_transferred == 1
        assert report.files_verified == 1
        assert [m["file_id"] for m in report.mismatches] == ["bad.bin"]
        assert (mirror / "good.bin").read_bytes() == b"g" * 50
        assert not (mirror / "bad.bin").exists()  # nothing committed under the final name

    def test_policy_denied_connection_refused(self, tmp_path):
        rules = tmp_path / "rules"
        rules.write_text("allow ops * control\n")  # data channel: nobody
        store_dir = tmp_path / "store"
        store_dir.mkdir()
        server = StoreServer(
            store_dir, port=get_free_port(), policy=policy_mod.PolicyEngine.from_file(rules)
        ).start()
        try:
            with pytest.raises(ConnectError):
                sync_once(server.endpoint, tmp_path / "mirror", principal="intruder")
        finally:
            server.stop()

    def test_denied_principal_gets_policy_denied_response(self, tmp_path):
        rules = tmp_path / "rules"
        rules.write_text("allow ops * data\n")
        store_dir = tmp_path / "store"
        store_dir.mkdir()
        server = StoreServer(
            store_dir, port=get_free_port(), policy=policy_mod.PolicyEngine.from_file(rules)
        ).start()
        try:
            with pytest.raises(RemoteError) as err:
                sync_once(server.endpoint, tmp_path / "mirror", principal="intruder")
            assert err.value.code == "PolicyDenied"
            report = sync_once(server.endpoint, tmp_path / "mirror", principal="ops")
            assert report.mismatches == []
        finally:
            server.stop()


class TestWatchAndSync:
    def test_new_file_appears_within_two_intervals(self, store):
        server, store_dir, mirror = store
        stop = threading.Event()
        reports = []
        thread = threading.Thread(
            target=watch_and_sync,
            args=(server.endpoint, mirror, 100),
            kwargs={"stop": stop, "on_report": reports.append},
            daemon=True,
        )
        thread.start()
        try:
            wait_until(lambda: len(reports) >= 1, 5, message="first sync tick")
            (store_dir / "fresh.bin").write_bytes(b"fresh")
            wait_until(lambda: (mirror / "fresh.bin").is_file(), 0.35,
                       interval_s=0.01, message="mirror pickup within 2 intervals")
            assert (mirror / "fresh.bin").read_bytes() == b"fresh"
            saved = load_sync_report(mirror)
            assert saved is not None and saved["status"] == "ok"
        finally:
            stop.set()
            thread.join(timeout=5.0)

    def test_watch_survives_store_restart(self, tmp_path):
        store_dir = tmp_path / "store"
        store_dir.mkdir()
        mirror = tmp_path / "mirror"
        port = get_free_port()
        server = StoreServer(store_dir, port=port).start()
        (store_dir / "one.bin").write_bytes(b"1")
        stop = threading.Event()
        reports = []
        thread = threading.Thread(
            target=watch_and_sync,
            args=(f"127.0.0.1:{port}", mirror, 100),
            kwargs={"stop": stop, "on_report": reports.append},
            daemon=True,
        )
        thread.start()
        try:
            wait_until(lambda: (mirror / "one.bin").is_file(), 5, message="initial sync")
            server.stop()
            wait_until(lambda: any(r["status"] == "error" for r in reports), 5,
                       message="error tick while store is down")
            server = StoreServer(store_dir, port=port).start()
            (store_dir / "two.bin").write_bytes(b"2")
            wait_until(lambda: (mirror / "two.bin").is_file(), 5,
                       message="sync resumes after restart")
        finally:
            stop.set()
            thread.join(timeout=5.0)
            server.stop()

    def test_quiet_store_yields_zero_transfer_reports(self, store):
        server, store_dir, mirror = store
        (store_dir / "static.bin").write_bytes(b"s")
        stop = threading.Event()
        reports = []
        thread = threading.Thread(
            target=watch_and_sync,
            args=(server.endpoint, mirror, 50),
            kwargs={"stop": stop, "on_report": reports.append},
            daemon=True,
        )
        thread.start()
        try:
            wait_until(lambda: len(reports) >= 4, 5, message="several ticks")
        finally:
            stop.set()
            thread.join(timeout=5.0)
        transfers = [r["report"]["files_transferred"] for r in reports if r["status"] == "ok"]
        assert transfers[0] == 1
        assert all(t == 0 for t in transfers[1:])

    def test_nonpositive_interval_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            watch_and_sync("127.0.0.1:1", tmp_path / "m", 0)

    def test_reserved_report_name_never_fetched(self, store):
        server, store_dir, mirror = store
        (store_dir / SYNC_REPORT_NAME).write_text("{\"planted\": true}")
        (store_dir / "real.bin").write_bytes(b"r")
        report = sync_once(server.endpoint, mirror)
        assert report.files_transferred == 1
        assert not (mirror / SYNC_REPORT_NAME).exists()
