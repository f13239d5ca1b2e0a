"""
End-to-end tests for the lipfield command line on a tiny toy workspace.
"""
import json

import numpy as np
import pandas as pd
import pytest
import soundfile as sf

from app.cli import apply_overrides, build_parser, load_run_config, main
from app.container import MotionSequence, read_container, write_container
from app.data_pipeline import load_dataset_root, split_by_subject


def toy_run_config(workspace, factors=0.5):
    return {
        "seed": 0,
        "fps": 60,
        "encoder": "spectrogram",
        "workspace": str(workspace),
        "toy": {"n_subjects": 4, "n_sentences": 1, "duration": 0.5, "subdivisions": 2, "n_landmarks": 12},
        "split": {"train_n": 2, "val_n": 1, "test_n": 1},
        "hierarchy": {"factors": [factors] * 5, "spiral_lengths": [9] * 6},
        "s2l": {"hidden_size": 8, "lstm_layers": 1},
        "s2d": {"layer_channels": [4, 4, 4, 4, 4]},
        "train_s2l": {"epochs": 1, "batch_size": 2},
        "train_s2d": {"epochs": 1, "batch_size": 32},
    }


def write_config(path, data):
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A prepared and trained toy workspace shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "run.json", toy_run_config(root / "ws"))

    assert main(["prepare-data", "--toy", "--config", config]) == 0
    assert main(["train-s2l", "--config", config]) == 0
    assert main(["train-s2d", "--config", config]) == 0
    return root / "ws", config


@pytest.fixture(scope="module")
def one_second_wav(tmp_path_factory):
    t = np.arange(16000) / 16000.0
    waveform = 0.3 * np.sin(2 * np.pi * 220.0 * t) * (0.5 + 0.5 * np.sin(2 * np.pi * 3.0 * t))
    path = tmp_path_factory.mktemp("audio") / "speech.wav"
    sf.write(str(path), waveform.astype(np.float32), 16000, subtype='PCM_16')
    return str(path)


class TestParser:
    """Tests for flag parsing and config overrides."""

    def test_unknown_flag_exits_with_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["animate", "--bogus"])

        assert excinfo.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate"])

        assert excinfo.value.code == 2

    def test_bad_encoder_choice(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["animate", "--encoder", "mfcc"])

        assert excinfo.value.code == 2

    def test_flags_win_over_config(self, tmp_path):
        config = write_config(tmp_path / "run.json", toy_run_config(tmp_path))
        args = build_parser().parse_args(["train-s2l", "--config", config, "--seed", "7", "--fps", "30"])

        cfg = apply_overrides(load_run_config(args.config), args)

        assert cfg.seed == 7
        assert cfg.fps == 30.0
        assert cfg.encoder == "spectrogram"
        assert cfg.topology_path == tmp_path / "topology.json"

    def test_missing_config_is_a_single_line_error(self, tmp_path, capsys):
        code = main(["train-s2l", "--config", str(tmp_path / "absent.json")])

        err = capsys.readouterr().err.strip().splitlines()
        assert code == 1
        assert len(err) == 1
        assert err[0].startswith("error: ValueError: Config file not found")


class TestCommands:
    """prepare-data → train → animate / evaluate / render-frames."""

    def test_workspace_layout(self, workspace):
        ws, _ = workspace

        assert (ws / "topology.json").exists()
        assert (ws / "template.ply").exists()
        assert len(list((ws / "dataset" / "sequences").iterdir())) == 4
        for kind in ("s2l", "s2d"):
            assert (ws / "checkpoints" / kind / "best.pt").exists()
            history = pd.read_csv(ws / "checkpoints" / kind / "history.csv")
            assert list(history["epoch"]) == [1]

    def test_prepare_data_reports_hash(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", toy_run_config(tmp_path / "ws"))

        assert main(["prepare-data", "--toy", "--config", config]) == 0

        out = capsys.readouterr().out
        assert "hash=" in out and "sequences=4" in out

    def test_prepare_data_needs_a_source(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", toy_run_config(tmp_path / "ws"))

        assert main(["prepare-data", "--config", config]) == 1
        assert "--template" in capsys.readouterr().err

    def test_animate_one_second(self, workspace, one_second_wav, tmp_path):
        _, config = workspace
        first, second = tmp_path / "a.lms", tmp_path / "b.lms"

        assert main(["animate", "--config", config, "--audio", one_second_wav, "--out", str(first)]) == 0
        assert main(["animate", "--config", config, "--audio", one_second_wav, "--out", str(second)]) == 0

        motion = read_container(first)
        assert motion.frame_count == 60
        assert motion.fps == 60.0
        assert motion.point_count == 162
        assert np.all(np.isfinite(motion.frames))
        assert first.read_bytes() == second.read_bytes()

    def test_animate_writes_ply_frames(self, workspace, one_second_wav, tmp_path):
        _, config = workspace

        code = main(["animate", "--config", config, "--audio", one_second_wav, "--fps", "30",
                     "--out", str(tmp_path / "m.lms"), "--ply-dir", str(tmp_path / "ply")])

        assert code == 0
        assert len(list((tmp_path / "ply").glob("frame_*.ply"))) == 30

    def test_animate_missing_audio(self, workspace, tmp_path, capsys):
        _, config = workspace

        code = main(["animate", "--config", config, "--audio", str(tmp_path / "none.wav")])

        assert code == 1
        assert "Audio file not found" in capsys.readouterr().err

    def test_evaluate_ground_truth_is_zero(self, workspace, tmp_path):
        ws, config = workspace
        _, _, test = split_by_subject(load_dataset_root(ws / "dataset"), 2, 1, 1, seed=0)
        for seq in test:
            write_container(MotionSequence(frames=seq.frames, fps=seq.fps), tmp_path / "pred" / f"{seq.sequence_id}.lms")

        code = main(["evaluate", "--config", config, "--predictions", str(tmp_path / "pred"),
                     "--out", str(tmp_path / "eval.csv")])

        assert code == 0
        report = pd.read_csv(tmp_path / "eval.csv")
        model_rows = report[report["method"] == "model"]
        assert (model_rows["DE_mm"] == 0.0).all()
        assert (model_rows["LE_mm"] == 0.0).all()

    def test_evaluate_trained_pipeline(self, workspace, capsys):
        ws, config = workspace

        assert main(["evaluate", "--config", config, "--split", "val"]) == 0

        assert (ws / "eval" / "val.csv").exists()
        assert "Dense" in capsys.readouterr().out

    def test_render_frames(self, workspace, one_second_wav, tmp_path, capsys):
        _, config = workspace
        container = tmp_path / "motion.lms"
        main(["animate", "--config", config, "--audio", one_second_wav, "--out", str(container)])

        code = main(["render-frames", "--config", config, "--input", str(container),
                     "--heatmap-against", str(container), "--out", str(tmp_path / "frames")])

        assert code == 0
        assert len(list((tmp_path / "frames").glob("*.png"))) == 60
        assert "frames=60" in capsys.readouterr().out

    def test_render_rejects_other_point_count(self, workspace, tmp_path, capsys):
        _, config = workspace
        write_container(MotionSequence(frames=np.zeros((2, 5, 3)), fps=60.0), tmp_path / "small.lms")

        code = main(["render-frames", "--config", config, "--input", str(tmp_path / "small.lms")])

        assert code == 1
        assert "5 points" in capsys.readouterr().err

    def test_animate_refuses_another_topology(self, workspace, one_second_wav, tmp_path, capsys):
        _, config = workspace
        other = write_config(tmp_path / "other.json", toy_run_config(tmp_path / "other", factors=0.4))
        main(["prepare-data", "--toy", "--config", other])

        code = main(["animate", "--config", config, "--audio", one_second_wav,
                     "--topology", str(tmp_path / "other" / "topology.json")])

        assert code == 1
        assert "TopologyMismatchError" in capsys.readouterr().err
