"""
Tests for runlog.py - run manifests and the audit trail
"""

import hashlib
import json

from runlog import (
    MANIFEST_NAME,
    RunRecord,
    append_audit,
    file_sha256,
    read_manifest,
    write_manifest,
)


def _record(**kw):
    base = dict(command="extract", flags={"jobs": 2}, config_hash="ab" * 32, seed=3,
                version="0.1.0")
    base.update(kw)
    return RunRecord(**base)


class TestManifest:
    """run_manifest.json"""

    def test_round_trip(self, tmp_path):
        (tmp_path / "in.wav").write_bytes(b"RIFF")
        out = tmp_path / "out"
        (out / "feats").mkdir(parents=True)
        (out / "feats" / "u1.mel.ftr").write_bytes(b"FTR1")
        rec = _record()
        rec.add_inputs([tmp_path / "in.wav"])
        rec.add_outputs([out / "feats" / "u1.mel.ftr", out / "missing.ftr"], out)

        path = write_manifest(out, rec)
        assert path == out / MANIFEST_NAME
        back = read_manifest(path)
        assert back == rec
        assert back.timestamp
        assert back.outputs == {"feats/u1.mel.ftr": hashlib.sha256(b"FTR1").hexdigest()}
        assert back.inputs[(tmp_path / "in.wav").as_posix()] == file_sha256(tmp_path / "in.wav")

    def test_identical_runs_differ_only_in_timestamp(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first = json.loads(write_manifest(tmp_path / "a", _record()).read_text())
        second = json.loads(write_manifest(tmp_path / "b",
                                           _record(timestamp="2000-01-01T00:00:00")).read_text())
        first.pop("timestamp")
        second.pop("timestamp")
        assert first == second


class TestAudit:
    """audit.jsonl"""

    def test_appends_one_line_per_run(self, tmp_path):
        path = tmp_path / "logs" / "audit.jsonl"
        append_audit(path, _record())
        append_audit(path, _record(command="synth", status="error"))
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [line["command"] for line in lines] == ["extract", "synth"]
        assert lines[1]["status"] == "error"
        assert set(lines[0]) == {"timestamp", "command", "status", "config_hash", "seed",
                                 "n_outputs"}
        assert lines[0]["n_outputs"] == 0
