"""Checkpoint format and round-trip tests.

An independent reader built from the documented layout (magic, uint32
version, uint64 header length, JSON header, packed float64 payload)
doubles as the format oracle.
"""

import json
import struct

import numpy as np
import pytest

from adaroute.checkpoint import (
    MAGIC,
    VERSION,
    Checkpoint,
    CheckpointError,
    CheckpointHeaderError,
    CheckpointShapeError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from adaroute.encoder import AdapterBank, adapter_bytes, new_adapter
from adaroute.harness import run_continual
from adaroute.router import ExpandedBatch, grow_label_space, init_state, update

HEAD = struct.Struct("<8sIQ")


def split_file(path):
    blob = path.read_bytes()
    magic, version, hlen = HEAD.unpack_from(blob, 0)
    header = blob[HEAD.size:HEAD.size + hlen]
    payload = blob[HEAD.size + hlen:]
    return magic, version, header, payload


def join_file(path, magic, version, header, payload):
    path.write_bytes(HEAD.pack(magic, version, len(header)) + header + payload)


@pytest.fixture
def small_artifacts(fast_config, rng):
    state = grow_label_space(init_state(fast_config.pipeline.expansion, 1.0), 2)
    for tid in range(2):
        feats = rng.standard_normal((6, fast_config.pipeline.expansion))
        state = update(state, ExpandedBatch.from_task_ids(feats, np.full(6, tid), 2))
    bank = AdapterBank()
    for tid in range(2):
        bank.add(
            new_adapter(
                fast_config.encoder, tid, rank=fast_config.adapter.rank, seed=tid
            )
        )
    return state, bank


class TestRoundTrip:
    def test_bitwise(self, tmp_path, small_artifacts, fast_config):
        state, bank = small_artifacts
        path = tmp_path / "run.bin"
        save_checkpoint(state, bank, fast_config, path, phase=2)
        ck = load_checkpoint(path)
        assert isinstance(ck, Checkpoint)
        assert ck.phase == 2
        assert ck.config == fast_config
        assert ck.state.lam == state.lam
        for name in ("R", "Q", "W"):
            assert getattr(ck.state, name).tobytes() == getattr(state, name).tobytes()
        assert ck.bank.task_ids == bank.task_ids
        for tid in bank.task_ids:
            assert adapter_bytes(ck.bank.get(tid)) == adapter_bytes(bank.get(tid))

    def test_empty_bank(self, tmp_path, fast_config):
        state = init_state(fast_config.pipeline.expansion, 1.0)
        path = tmp_path / "fresh.bin"
        save_checkpoint(state, AdapterBank(), fast_config, path)
        ck = load_checkpoint(path)
        assert ck.phase == 0
        assert len(ck.bank) == 0
        assert ck.state.task_count == 0

    def test_overwrite_in_place(self, tmp_path, small_artifacts, fast_config):
        state, bank = small_artifacts
        path = tmp_path / "run.bin"
        save_checkpoint(state, bank, fast_config, path, phase=1)
        save_checkpoint(state, bank, fast_config, path, phase=2)
        assert load_checkpoint(path).phase == 2

    def test_no_stray_temp_files(self, tmp_path, small_artifacts, fast_config):
        state, bank = small_artifacts
        save_checkpoint(state, bank, fast_config, tmp_path / "run.bin")
        assert [p.name for p in tmp_path.iterdir()] == ["run.bin"]


class TestFormat:
    def test_layout_read_independently(self, tmp_path, small_artifacts, fast_config):
        state, bank = small_artifacts
        path = tmp_path / "run.bin"
        save_checkpoint(state, bank, fast_config, path, phase=2)
        magic, version, header_bytes, payload = split_file(path)
        assert magic == b"ADRTCKPT" == MAGIC
        assert version == 1 == VERSION
        header = json.loads(header_bytes)
        assert header["phase"] == 2
        assert header["lam"] == state.lam
        assert header["dims"] == {
            "expansion": fast_config.pipeline.expansion,
            "tasks": 2,
        }
        total = sum(
            int(np.prod(entry["shape"])) for entry in header["arrays"]
        )
        assert len(payload) == 8 * total

    def test_first_payload_array_is_r_in_little_endian(
        self, tmp_path, small_artifacts, fast_config
    ):
        state, bank = small_artifacts
        path = tmp_path / "run.bin"
        save_checkpoint(state, bank, fast_config, path)
        _, _, header_bytes, payload = split_file(path)
        header = json.loads(header_bytes)
        assert header["arrays"][0]["name"] == "router/R"
        nbytes = state.R.size * 8
        assert payload[:nbytes] == state.R.astype("<f8").tobytes()

    def test_config_echo_rebuilds_the_config(
        self, tmp_path, small_artifacts, fast_config
    ):
        from adaroute.config import config_from_dict

        state, bank = small_artifacts
        path = tmp_path / "run.bin"
        save_checkpoint(state, bank, fast_config, path)
        _, _, header_bytes, _ = split_file(path)
        assert config_from_dict(json.loads(header_bytes)["config"]) == fast_config


class TestCorruption:
    @pytest.fixture
    def saved(self, tmp_path, small_artifacts, fast_config):
        state, bank = small_artifacts
        path = tmp_path / "run.bin"
        save_checkpoint(state, bank, fast_config, path, phase=1)
        return path

    def test_short_file(self, tmp_path):
        path = tmp_path / "stub.bin"
        path.write_bytes(b"ADRT")
        with pytest.raises(CheckpointHeaderError, match="too short"):
            load_checkpoint(path)

    def test_bad_magic(self, saved):
        magic, version, header, payload = split_file(saved)
        join_file(saved, b"NOTACKPT", version, header, payload)
        with pytest.raises(CheckpointHeaderError, match="bad magic"):
            load_checkpoint(saved)

    def test_unsupported_version(self, saved):
        magic, _, header, payload = split_file(saved)
        join_file(saved, magic, 2, header, payload)
        with pytest.raises(CheckpointVersionError, match="version 2"):
            load_checkpoint(saved)

    def test_header_length_beyond_file(self, saved):
        blob = saved.read_bytes()
        saved.write_bytes(HEAD.pack(MAGIC, VERSION, 10**9) + blob[HEAD.size:])
        with pytest.raises(CheckpointHeaderError, match="exceeds file size"):
            load_checkpoint(saved)

    def test_header_not_json(self, saved):
        magic, version, header, payload = split_file(saved)
        join_file(saved, magic, version, b"\xff" * len(header), payload)
        with pytest.raises(CheckpointHeaderError, match="not valid JSON"):
            load_checkpoint(saved)

    def test_header_missing_field(self, saved):
        magic, version, header, payload = split_file(saved)
        doc = json.loads(header)
        del doc["lam"]
        join_file(saved, magic, version, json.dumps(doc).encode(), payload)
        with pytest.raises(CheckpointHeaderError, match="missing field 'lam'"):
            load_checkpoint(saved)

    def test_truncated_payload(self, saved):
        magic, version, header, payload = split_file(saved)
        join_file(saved, magic, version, header, payload[:-8])
        with pytest.raises(CheckpointShapeError, match="truncated"):
            load_checkpoint(saved)

    def test_trailing_payload_bytes(self, saved):
        magic, version, header, payload = split_file(saved)
        join_file(saved, magic, version, header, payload + b"\x00" * 8)
        with pytest.raises(CheckpointShapeError, match="trailing"):
            load_checkpoint(saved)

    def test_dims_inconsistent_with_arrays(self, saved):
        magic, version, header, payload = split_file(saved)
        doc = json.loads(header)
        doc["dims"]["tasks"] += 1
        join_file(saved, magic, version, json.dumps(doc).encode(), payload)
        with pytest.raises(CheckpointShapeError, match="router/Q"):
            load_checkpoint(saved)

    def test_negative_shape_rejected(self, saved):
        magic, version, header, payload = split_file(saved)
        doc = json.loads(header)
        doc["arrays"][0]["shape"] = [-1, 4]
        join_file(saved, magic, version, json.dumps(doc).encode(), payload)
        with pytest.raises(CheckpointShapeError, match="invalid shape"):
            load_checkpoint(saved)

    def test_errors_share_a_base_class(self):
        for exc in (CheckpointHeaderError, CheckpointVersionError, CheckpointShapeError):
            assert issubclass(exc, CheckpointError)

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "nope.bin")


class TestResume:
    def test_resumed_run_matches_the_uninterrupted_one(
        self, tmp_path, fast_stream, fast_config
    ):
        paths = {}

        def snapshot(done, state, bank):
            p = tmp_path / f"phase{done}.bin"
            save_checkpoint(state, bank, fast_config, p, phase=done)
            paths[done] = p

        full = run_continual(fast_stream, fast_config, phase_callback=snapshot)
        ck = load_checkpoint(paths[1])
        resumed = run_continual(
            fast_stream,
            ck.config,
            start_phase=ck.phase,
            state=ck.state,
            bank=ck.bank,
        )
        assert float(np.abs(resumed.state.W - full.state.W).max()) <= 1e-12
        np.testing.assert_allclose(
            resumed.matrix.final_column(), full.matrix.final_column(), atol=1e-12
        )
        for tid in full.bank.task_ids:
            assert adapter_bytes(resumed.bank.get(tid)) == adapter_bytes(
                full.bank.get(tid)
            )
