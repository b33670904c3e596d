import json
from pathlib import Path

import numpy as np
import pytest

from mmhar.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_OK, main
from mmhar.evaluation import MetricReport
from mmhar.ingest import read_manifest

TINY_SYNTH = [
    "--synth.n_sources=2",
    "--synth.n_classes=3",
    "--synth.clips_per_class=4",
    "--synth.duration_s=1.0",
]

TINY_MODEL = [
    "--mfr.c_emb=8",
    "--mfr.hidden=8",
    "--model.d=16",
    "--model.backbone=mini",
    "--d2r.p_goal=64",
    "--d2r.r=2",
    "--d2r.q_init=0.7",
    "--tam.c_text=8",
    "--tam.hidden=8",
    "--train.batch_size=8",
    "--train.learning_rate=0.05",
]


def write_radhar_toy(src_dir: Path, n_frames=100, pts_per_frame=3):
    src_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    lines = ["Frame,X,Y,Z,Doppler,Intensity"]
    for f in range(n_frames):
        for _ in range(pts_per_frame):
            x, y, z, d = rng.normal(size=4)
            lines.append(f"{f},{x:.4f},{y:.4f},{z:.4f},{d:.4f},{abs(d):.4f}")
    (src_dir / "seq01.csv").write_text("\n".join(lines) + "\n")
    (src_dir / "labels.csv").write_text("file,action,env,subject\nseq01.csv,1,1,1\n")


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--seed", "0"] + TINY_SYNTH) == EXIT_OK
    return out


class TestPrep:
    def test_radhar_toy_100_frames_gives_5_archives(self, tmp_path, capsys):
        src = tmp_path / "raw"
        write_radhar_toy(src)
        out = tmp_path / "prep"
        code = main(["prep", "--source-dir", str(src), "--source", "radhar", "--out", str(out)])
        assert code == EXIT_OK
        rows = read_manifest(out / "manifest.csv")
        assert len(rows) == 5  # floor((100 - 60) / 10) + 1
        assert (out / "config_snapshot.json").exists()
        assert "5 archives" in capsys.readouterr().out

    def test_unknown_source_lists_supported(self, tmp_path, capsys):
        src = tmp_path / "raw"
        write_radhar_toy(src)
        code = main(["prep", "--source-dir", str(src), "--source", "sonar", "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "radhar" in err and "mri" in err and "mmfi" in err

    def test_rerun_is_idempotent(self, tmp_path):
        src = tmp_path / "raw"
        write_radhar_toy(src)
        out = tmp_path / "prep"
        main(["prep", "--source-dir", str(src), "--source", "radhar", "--out", str(out)])
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        main(["prep", "--source-dir", str(src), "--source", "radhar", "--out", str(out)])
        second = {p.name: p.read_bytes() for p in out.iterdir()}
        assert first == second


class TestSynth:
    def test_counts_and_sources(self, synth_dir):
        rows = read_manifest(synth_dir / "manifest.csv")
        assert len(rows) == 2 * 3 * 4
        assert {r.source for r in rows} == {"synth_a", "synth_b"}
        assert len({r.label for r in rows}) == 3

    def test_seed_changes_data_not_counts(self, synth_dir, tmp_path):
        other = tmp_path / "synth2"
        assert main(["synth", "--out", str(other), "--seed", "1"] + TINY_SYNTH) == EXIT_OK
        rows_a = read_manifest(synth_dir / "manifest.csv")
        rows_b = read_manifest(other / "manifest.csv")
        assert len(rows_a) == len(rows_b)
        name = rows_a[0].path
        assert (synth_dir / name).read_bytes() != (other / name).read_bytes()

    def test_malformed_config_key_named(self, tmp_path, capsys):
        code = main(["synth", "--out", str(tmp_path / "x"), "--set", "synth.bogus=3"])
        assert code == EXIT_CONFIG
        assert "synth.bogus" in capsys.readouterr().err

    def test_unknown_dotted_flag_named(self, tmp_path, capsys):
        code = main(["synth", "--out", str(tmp_path / "x"), "--frobnicate", "1"])
        assert code == EXIT_CONFIG
        assert "frobnicate" in capsys.readouterr().err

    def test_deterministic_rerun_bitwise(self, tmp_path):
        args = ["--seed", "3"] + TINY_SYNTH + ["--deterministic"]
        for sub in ("r1", "r2"):
            assert main(["synth", "--out", str(tmp_path / sub)] + args) == EXIT_OK
        files = sorted(p.name for p in (tmp_path / "r1").iterdir())
        for name in files:
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(
        [
            "train",
            "--manifest",
            str(synth_dir / "manifest.csv"),
            "--protocol",
            "random",
            "--out",
            str(out),
            "--epochs",
            "2",
            "--seed",
            "0",
        ]
        + TINY_MODEL
    )
    assert code == EXIT_OK
    return out


class TestTrainEval:
    def test_outputs_written(self, trained):
        for name in ("checkpoint.zip", "train_log.csv", "split.csv", "summary.json", "config_snapshot.json"):
            assert (trained / name).exists(), name

    def test_train_log_columns(self, trained):
        lines = (trained / "train_log.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,loss,acc,q"
        assert len(lines) == 3

    def test_ablation_flags(self, synth_dir, tmp_path):
        out = tmp_path / "ablate"
        code = main(
            [
                "train",
                "--manifest",
                str(synth_dir / "manifest.csv"),
                "--protocol",
                "random",
                "--out",
                str(out),
                "--epochs",
                "1",
                "--d2r.enabled",
                "false",
                "--tam.enabled",
                "false",
            ]
            + TINY_MODEL
        )
        assert code == EXIT_OK
        snapshot = json.loads((out / "config_snapshot.json").read_text())
        assert snapshot["config"]["d2r"]["enabled"] is False
        assert snapshot["config"]["tam"]["enabled"] is False

    def test_eval_reproduces_training_log_test_accuracy(self, synth_dir, trained, tmp_path):
        out = tmp_path / "eval"
        code = main(
            [
                "eval",
                "--checkpoint",
                str(trained / "checkpoint.zip"),
                "--manifest",
                str(synth_dir / "manifest.csv"),
                "--protocol",
                "random",
                "--split",
                str(trained / "split.csv"),
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        report = MetricReport.from_csv(out / "report.csv")
        summary = json.loads((trained / "summary.json").read_text())
        assert report.micro_acc == pytest.approx(summary["final_test_micro_acc"], abs=1e-12)

    def test_missing_checkpoint_is_format_error(self, synth_dir, tmp_path, capsys):
        code = main(
            [
                "eval",
                "--checkpoint",
                str(tmp_path / "nope.zip"),
                "--manifest",
                str(synth_dir / "manifest.csv"),
                "--protocol",
                "random",
                "--out",
                str(tmp_path / "e"),
            ]
        )
        assert code == EXIT_FORMAT

    def test_report_command(self, synth_dir, trained, tmp_path):
        eval_dir = tmp_path / "eval2"
        main(
            [
                "eval",
                "--checkpoint",
                str(trained / "checkpoint.zip"),
                "--manifest",
                str(synth_dir / "manifest.csv"),
                "--protocol",
                "random",
                "--split",
                str(trained / "split.csv"),
                "--out",
                str(eval_dir),
            ]
        )
        out = tmp_path / "cmp"
        code = main(
            [
                "report",
                "--baseline",
                str(eval_dir / "report.csv"),
                "--ours",
                str(eval_dir / "report.csv"),
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        text = (out / "improvements.csv").read_text()
        assert "micro_acc" in text

    def test_deterministic_training_checkpoint_bitwise(self, synth_dir, tmp_path):
        outs = []
        for sub in ("t1", "t2"):
            out = tmp_path / sub
            code = main(
                [
                    "train",
                    "--manifest",
                    str(synth_dir / "manifest.csv"),
                    "--protocol",
                    "random",
                    "--out",
                    str(out),
                    "--epochs",
                    "1",
                    "--seed",
                    "5",
                    "--deterministic",
                ]
                + TINY_MODEL
            )
            assert code == EXIT_OK
            outs.append(out)
        assert (outs[0] / "checkpoint.zip").read_bytes() == (outs[1] / "checkpoint.zip").read_bytes()
        assert (outs[0] / "train_log.csv").read_bytes() == (outs[1] / "train_log.csv").read_bytes()


class TestConfigPlumbing:
    def test_config_reference_lists_all_keys(self, capsys):
        assert main(["--config-reference"]) == EXIT_OK
        out = capsys.readouterr().out
        for key in ("d2r.q_init", "tam.alpha", "train.epochs", "synth.seed"):
            assert key in out

    def test_config_file_nested_json(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"synth": {"n_sources": 1, "n_classes": 2, "clips_per_class": 2, "duration_s": 1.0}}))
        out = tmp_path / "s"
        assert main(["synth", "--out", str(out), "--config", str(cfg)]) == EXIT_OK
        rows = read_manifest(out / "manifest.csv")
        assert len(rows) == 4

    def test_bad_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        assert main(["synth", "--out", str(tmp_path / "s"), "--config", str(cfg)]) == EXIT_CONFIG

    def test_scenario_file(self, tmp_path):
        scenario = {
            "profiles": [
                {
                    "source_name": "lab_radar",
                    "carrier_frequency": 60.0e9,
                    "frame_rate": 20.0,
                    "range_m": 2.0,
                    "density_scale": 500.0,
                    "noise_sigma_xyz": 0.02,
                    "noise_sigma_doppler": 0.05,
                    "doppler_quantization": 0.04,
                    "mount_height_m": 1.1,
                }
            ],
            "primitives": [
                {"name": "idle", "amplitudes": [0.01, 0.01, 0.01, 0.01], "frequency": 0.5,
                 "phases": [0, 0, 0, 0], "static_fraction": 0.9},
                {"name": "flail", "amplitudes": [0.3, 0.3, 0.1, 0.1], "frequency": 1.5,
                 "phases": [0, 3.14, 0, 0], "static_fraction": 0.4},
            ],
        }
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps(scenario))
        out = tmp_path / "s"
        code = main([
            "synth", "--out", str(out),
            "--set", f"synth.scenario_file={path}",
            "--set", "synth.n_sources=1",
            "--set", "synth.n_classes=2",
            "--set", "synth.clips_per_class=2",
            "--set", "synth.duration_s=1.0",
        ])
        assert code == EXIT_OK
        rows = read_manifest(out / "manifest.csv")
        assert {r.source for r in rows} == {"lab_radar"}
        assert len(rows) == 4

    def test_snapshot_reflects_overrides(self, tmp_path):
        out = tmp_path / "s"
        main(["synth", "--out", str(out), "--set", "synth.n_classes=2", "--set", "synth.n_sources=1", "--set", "synth.clips_per_class=2", "--set", "synth.duration_s=1.0"])
        snap = json.loads((out / "config_snapshot.json").read_text())
        assert snap["config"]["synth"]["n_classes"] == 2
