import json

import jsonschema
import numpy as np
import pytest

from tagtrack import io as tio
from tagtrack.cli import EVAL_REPORT_SCHEMA, MANIFEST_NAME, RUN_MANIFEST_SCHEMA, config_hash, main
from tagtrack.synth import Sequence, export, load_dataset

# sha256 over the sorted artifact checksums of `synth --seed 0` with the default
# config, recorded at first build
DEFAULT_SYNTH_GOLDEN = "fd97cf7d1be4234d75b6db42d8423201cf42ee72071b0199b549a4ed01a4cbed"

SMALL_SYNTH = {"count": 2, "phantom": {"height": 32, "width": 32, "frames": 4}}
SMALL_TRAIN = {"steps": 4, "val_every": 2}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _manifest(out):
    m = json.loads((out / MANIFEST_NAME).read_text())
    jsonschema.validate(m, RUN_MANIFEST_SCHEMA)
    return m


def _strip_timings(m):
    return {k: v for k, v in m.items() if k != "timings"}


def _run(argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    _run(["synth", "--config", _write(root / "s.json", SMALL_SYNTH), "--seed", "3", "--out", data])
    train_cfg = _write(root / "t.json", SMALL_TRAIN)
    _run(["train", "--config", train_cfg, "--data", data, "--val", data, "--out", root / "full"])
    _run(["train", "--config", train_cfg, "--data", data, "--out", root / "a1", "--mode", "A1"])
    return root


def _digest(manifest):
    return config_hash(manifest["outputs"])


class TestSynth:
    def test_default_config_golden(self, tmp_path):
        _run(["synth", "--seed", "0", "--out", tmp_path])
        seqs = load_dataset(tmp_path)
        assert len(seqs) == 20
        assert all(s.frames.shape == (12, 64, 64) for s in seqs)
        assert _digest(_manifest(tmp_path)) == DEFAULT_SYNTH_GOLDEN

    def test_two_frames(self, tmp_path):
        _run(["synth", "--config", _write(tmp_path / "c.json", SMALL_SYNTH), "--frames", "2", "--out", tmp_path / "o"])
        seqs = load_dataset(tmp_path / "o")
        assert all(s.frames.shape == (2, 32, 32) for s in seqs)
        assert seqs[0].gt_fields.shape == (1, 2, 32, 32)

    def test_reproducible(self, tmp_path):
        cfg = _write(tmp_path / "c.json", SMALL_SYNTH)
        _run(["synth", "--config", cfg, "--seed", "5", "--out", tmp_path / "o"])
        first = _manifest(tmp_path / "o")
        _run(["synth", "--config", cfg, "--seed", "5", "--out", tmp_path / "o"])
        assert _strip_timings(_manifest(tmp_path / "o")) == _strip_timings(first)
        _run(["synth", "--config", cfg, "--seed", "6", "--out", tmp_path / "p"])
        assert _manifest(tmp_path / "p")["outputs"] != first["outputs"]

    @pytest.mark.parametrize(
        "config",
        ['{"count": 0}', '{"phantom": {"motion": "twist"}}', '{"phantom": {"bogus": 1}}', "{not json", '{"extra": 1}'],
    )
    def test_invalid_config(self, tmp_path, capsys, config):
        (tmp_path / "c.json").write_text(config)
        assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) != 0
        err = capsys.readouterr().err
        assert err.startswith("tagtrack synth: error:") and err.count("\n") == 1
        assert not (tmp_path / "o").exists()


class TestTrain:
    def test_outputs(self, workspace):
        out = workspace / "full"
        m = _manifest(out)
        assert set(m["outputs"]) == {"checkpoint/params.tgf1", "checkpoint/checkpoint.json", "loss.csv", "val.csv"}
        assert m["seed"] == 0 and m["config"]["mode"] == "full"
        header = (out / "loss.csv").read_text().splitlines()[0]
        assert header.startswith("step,loss_total,loss_kl")
        assert len((out / "loss.csv").read_text().splitlines()) == SMALL_TRAIN["steps"] + 1

    def test_mode_flag(self, workspace):
        ckpt = json.loads((workspace / "a1" / "checkpoint" / "checkpoint.json").read_text())
        assert ckpt["config"]["mode"] == "A1"

    def test_loss_csv_bitwise_reproducible(self, workspace, tmp_path):
        cfg = _write(tmp_path / "t.json", SMALL_TRAIN)
        _run(["train", "--config", cfg, "--data", workspace / "data", "--val", workspace / "data", "--out", tmp_path / "o"])
        assert (tmp_path / "o" / "loss.csv").read_bytes() == (workspace / "full" / "loss.csv").read_bytes()
        assert _manifest(tmp_path / "o")["outputs"] == _manifest(workspace / "full")["outputs"]

    def test_missing_data_dir(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) != 0
        assert "does not exist" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_bad_mode(self, workspace, tmp_path, capsys):
        assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "o"), "--mode", "A9"]) != 0
        assert capsys.readouterr().err.count("\n") == 1


class TestTrack:
    def test_outputs(self, workspace, tmp_path):
        _run(["track", "--checkpoint", workspace / "full", "--sequence", workspace / "data" / "seq000", "--out", tmp_path])
        for name in ("inf_fields.tgf1", "lag_fields.tgf1"):
            assert tio.load_tgf(tmp_path / name).shape == (3, 2, 32, 32)
        tracks = tio.load_landmarks(tmp_path / "tracked_landmarks.csv")
        seq = load_dataset(workspace / "data")[0]
        assert tracks.shape == seq.landmarks.shape
        assert np.allclose(tracks[0], seq.landmarks[0])
        figs = sorted(p.name for p in (tmp_path / "figures").iterdir())
        assert figs == [f"quiver_{n:03d}.png" for n in (1, 2, 3)] + [f"tag_grid_{n:03d}.png" for n in range(4)]
        assert not list(tmp_path.rglob("*.partial"))

    def test_checksum_stability(self, workspace, tmp_path):
        args = ["track", "--checkpoint", workspace / "full", "--sequence", workspace / "data" / "seq001"]
        _run(args + ["--out", tmp_path / "a"])
        _run(args + ["--out", tmp_path / "b"])
        assert _manifest(tmp_path / "a")["outputs"] == _manifest(tmp_path / "b")["outputs"]

    def test_bad_checkpoint(self, tmp_path, capsys):
        assert main(["track", "--checkpoint", str(tmp_path), "--sequence", str(tmp_path), "--out", str(tmp_path / "o")]) != 0
        assert "checkpoint" in capsys.readouterr().err


class TestEval:
    def test_report_and_comparison(self, workspace, tmp_path):
        _run(["eval", "--checkpoint", workspace / "full", "--checkpoint", workspace / "a1", "--data", workspace / "data",
              "--spacing", "1.5", "--out", tmp_path])
        report = json.loads((tmp_path / "report.json").read_text())
        jsonschema.validate(report, EVAL_REPORT_SCHEMA)
        assert [row["mode"] for row in report["comparison"]] == ["full", "A1"]
        assert all(s["seconds"] > 0 for s in report["sequences"])
        assert report["rms_mm"]["mean"] == pytest.approx(1.5 * report["rms_px"]["mean"])
        rows = (tmp_path / "frame_rms.csv").read_text().splitlines()
        assert rows[0] == "frame,rms_px" and len(rows) == 4
        assert (tmp_path / "comparison.csv").read_text().startswith("checkpoint,mode,rms_px_mean")
        m = _manifest(tmp_path)
        assert set(m["outputs"]) == {"report.json", "frame_rms.csv", "comparison.csv", "rms_curve.png"}

    def test_reproducible_modulo_timings(self, workspace, tmp_path):
        args = ["eval", "--checkpoint", workspace / "full", "--data", workspace / "data", "--out", tmp_path]
        _run(args)
        first = _manifest(tmp_path)
        _run(args)
        second = _manifest(tmp_path)
        # report.json holds wall-clock seconds, so only the deterministic artifacts are compared
        for key in ("frame_rms.csv", "rms_curve.png"):
            assert first["outputs"][key] == second["outputs"][key]
        assert {k: v for k, v in first.items() if k not in ("timings", "outputs")} == {
            k: v for k, v in second.items() if k not in ("timings", "outputs")
        }

    def test_missing_landmarks(self, workspace, tmp_path, capsys):
        seq = load_dataset(workspace / "data")[0]
        export(Sequence(seq.frames), tmp_path / "data" / "seq000")
        code = main(["eval", "--checkpoint", str(workspace / "full"), "--data", str(tmp_path / "data"), "--out", str(tmp_path / "o")])
        assert code != 0 and "landmarks" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()


def test_one_manifest_per_run(workspace):
    for sub in ("data", "full", "a1"):
        assert len(list((workspace / sub).rglob(MANIFEST_NAME))) == 1
