"""
Tests for cli.py - argument handling, exit codes and a full run through every command
"""

import json

import numpy as np
import pytest
import yaml

from cli import EXIT_ERROR, build_parser, flags_from_args, main
from dsp import HOP, extract_f0, read_wav
from ftr1 import read_series
from metrics import f0_rmse_cents, read_report


@pytest.fixture
def config_file(tiny_config_dict, tmp_path):
    path = tmp_path / "dsvs.yaml"
    path.write_text(yaml.safe_dump(tiny_config_dict))
    return str(path)


class TestArguments:
    """Parsing and exit codes."""

    def test_no_command_prints_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 0
        assert "corpus-gen" in capsys.readouterr().out

    def test_flags_from_args(self):
        args = build_parser().parse_args(["synth", "--utt", "s00_u000", "--singer", "singer01",
                                          "--steps", "4", "--seed", "2"])
        flags = flags_from_args(args)
        assert (flags.utt, flags.singer, flags.steps, flags.seed) == ("s00_u000", "singer01", 4, 2)
        assert flags.label is None

    def test_pipeline_error_exits_2(self, config_file, tmp_path, capsys):
        """A missing corpus is reported with its module and audited as an error."""
        with pytest.raises(SystemExit) as exc:
            main(["extract", "--config", config_file])
        assert exc.value.code == EXIT_ERROR
        assert "[ERROR] module=pipeline" in capsys.readouterr().err
        entry = json.loads((tmp_path / "features" / "audit.jsonl").read_text().splitlines()[-1])
        assert entry["status"] == "error"

    def test_bad_config_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("seeed: 1\n")
        with pytest.raises(SystemExit) as exc:
            main(["corpus-gen", "--config", str(path)])
        assert exc.value.code == EXIT_ERROR
        assert "unknown config key 'seeed'" in capsys.readouterr().err


@pytest.mark.slow
class TestEndToEnd:
    """corpus-gen through eval on a two-singer toy corpus."""

    def test_full_run(self, config_file, tmp_path):
        def dsvs(*argv):
            main([argv[0], "--config", config_file, *argv[1:]])

        dsvs("corpus-gen")
        dsvs("extract", "--jobs", "2")
        singers = json.loads((tmp_path / "features" / "singers.json").read_text())["singers"]
        assert sorted(singers) == ["singer00", "singer01"]

        dsvs("train-linguistic")
        dsvs("train-pitch")
        dsvs("train-synth")
        models = tmp_path / "models"
        for name in ("linguistic.skcp", "pitch.skcp", "diffusion.skcp"):
            assert (models / name).exists()
        assert json.loads((models / "run_manifest.json").read_text())["command"] == "train-synth"

        dsvs("synth", "--utt", "s00_u000", "--singer", "singer01", "--steps", "3")
        out = tmp_path / "out"
        wave = read_wav(out / "s00_u000.wav")
        assert wave.samples.size == 201 * HOP
        assert np.all(np.abs(wave.samples) <= 1.0)

        edits = tmp_path / "edits"
        edits.mkdir()
        (edits / "plan.tsv").write_text("0\t60\tKEEP\t-\n60\t120\tREPLACE\tw1\n120\t201\tKEEP\t-\n")
        (edits / "w1.tsv").write_text("a\t30\ni\t30\n")
        dsvs("inpaint", "--utt", "s00_u000", "--edit-script", str(edits / "plan.tsv"))
        assert (out / "s00_u000.inpaint.wav").exists()

        # label and melody named in the config; the plan's directory has no w1.tsv
        (edits / "w1.notes.tsv").write_text("".join(f"{i}\t62\n" for i in range(60)))
        plans = tmp_path / "plans"
        plans.mkdir()
        (plans / "plan.tsv").write_text((edits / "plan.tsv").read_text())
        with_table = dict(tiny_config_dict, inpaint={"replacements": {
            "w1": {"label": str(edits / "w1.tsv"), "midi": str(edits / "w1.notes.tsv")}}})
        table_config = tmp_path / "table.yaml"
        table_config.write_text(yaml.safe_dump(with_table))
        main(["inpaint", "--config", str(table_config), "--utt", "s00_u000",
              "--edit-script", str(plans / "plan.tsv")])
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "inpaint"
        assert (edits / "w1.notes.tsv").as_posix() in manifest["inputs"]

        # the corpus against itself: zero distortion, perfect pitch agreement
        dsvs("eval", "--gen-dir", str(tmp_path / "corpus" / "wav"), "--out", str(tmp_path / "ev"))
        rows = {r.name: r for r in read_report(tmp_path / "ev" / "metrics.tsv")}
        assert rows["mcd"].value == pytest.approx(0.0, abs=1e-6)
        assert rows["f0_rmse"].value == pytest.approx(0.0, abs=1e-6)
        assert rows["f0_corr"].value == pytest.approx(1.0, abs=1e-6)
        assert "s01_u001/mcd" in rows

        audit = (out / "audit.jsonl").read_text().splitlines()
        assert [json.loads(line)["command"] for line in audit] == ["synth", "inpaint", "inpaint"]

    def test_synth_audio_tracks_composed_f0(self, tiny_config_dict, tmp_path):
        """After an overfit run the rendered audio re-extracts to the contour it was driven by."""
        cfg = dict(tiny_config_dict)
        cfg["train"] = {
            "linguistic": {"steps": 200, "lr": 3e-3, "log_every": 0},
            "pitch": {"steps": 400, "lr": 3e-3, "log_every": 0},
            "synth": {"steps": 300, "lr": 2e-3, "log_every": 0, "crop_frames": 32},
        }
        path = tmp_path / "overfit.yaml"
        path.write_text(yaml.safe_dump(cfg))
        for argv in (["corpus-gen"], ["extract"], ["train-linguistic"], ["train-pitch"],
                     ["train-synth"], ["synth", "--utt", "s01_u000", "--singer", "singer01"]):
            main([argv[0], "--config", str(path), *argv[1:]])

        out = tmp_path / "out"
        target_f0 = read_series(out / "s01_u000.f0.ftr")
        target_vuv = read_series(out / "s01_u000.vuv.ftr")
        f0, vuv = extract_f0(read_wav(out / "s01_u000.wav"))
        assert len(f0) == len(target_f0)
        assert f0_rmse_cents(f0, target_f0).value < 50.0
        assert np.mean((vuv.values > 0.5) == (target_vuv.values > 0.5)) > 0.9
