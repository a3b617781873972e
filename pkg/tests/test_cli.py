import os

import pytest

from mtvnet.cli import main
from mtvnet.volumes import read_volume


def run(argv):
    return main(argv)


def make_data(root, count=1, edge=64, seed=7, generator="trabecular", scale=2):
    code = run(["make-data", "--generator", generator, "--count", str(count),
                "--edge", str(edge), "--scale", str(scale), "--seed", str(seed),
                "--data-dir", str(root)])
    assert code == 0
    return root


class TestMakeData:
    def test_count_contract(self, tmp_path):
        make_data(tmp_path / "data", count=4, edge=32)
        hr = sorted(os.listdir(tmp_path / "data" / "hr"))
        lr = sorted(os.listdir(tmp_path / "data" / "lr"))
        assert len(hr) == 4 and len(lr) == 4
        assert hr == lr

    def test_rerun_bit_identical(self, tmp_path):
        root = make_data(tmp_path / "d1", count=2, edge=32)
        first = {f: (root / "hr" / f).read_bytes()
                 for f in os.listdir(root / "hr")}
        make_data(tmp_path / "d1", count=2, edge=32)
        for f, payload in first.items():
            assert (root / "hr" / f).read_bytes() == payload

    def test_lr_edge_scaled(self, tmp_path):
        root = make_data(tmp_path / "data", edge=32, scale=2)
        name = os.listdir(root / "lr")[0]
        assert read_volume(root / "lr" / name).shape == (16, 16, 16)

    def test_missing_scale_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["make-data", "--generator", "trabecular", "--count", "1",
                 "--edge", "32", "--data-dir", str(tmp_path)])
        assert exc.value.code == 2

    def test_env_var_data_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MTVNET_DATA_DIR", str(tmp_path / "from_env"))
        code = run(["make-data", "--generator", "ellipsoid", "--count", "1",
                    "--edge", "32", "--scale", "2"])
        assert code == 0
        assert (tmp_path / "from_env" / "hr").is_dir()


class TestTrainEval:
    @pytest.fixture
    def data_root(self, tmp_path):
        return make_data(tmp_path / "data", count=1, edge=64)

    def test_train_writes_artifacts(self, data_root, tmp_path):
        out = tmp_path / "run"
        code = run(["train", "--preset", "desk", "--steps", "3",
                    "--set", "batch_size=1", "--data-dir", str(data_root),
                    "--out", str(out), "--ckpt-interval", "0"])
        assert code == 0
        assert (out / "last.params").exists()
        assert (out / "loss_trace.csv").exists()
        assert (out / "resolved.cfg").exists()
        lines = (out / "loss_trace.csv").read_text().splitlines()
        assert lines[0] == "iter,loss,lr"
        assert len(lines) == 4

    def test_eval_with_checkpoint(self, data_root, tmp_path):
        out = tmp_path / "run"
        run(["train", "--preset", "desk", "--steps", "2",
             "--set", "batch_size=1", "--data-dir", str(data_root),
             "--out", str(out), "--ckpt-interval", "0"])
        eval_out = tmp_path / "eval"
        code = run(["eval", "--preset", "desk", "--ckpt",
                    str(out / "last.params"), "--data-dir", str(data_root),
                    "--out", str(eval_out)])
        assert code == 0
        csv = (eval_out / "metrics.csv").read_text()
        assert csv.startswith("volume,psnr_db,ssim,nrmse,slices_used")
        assert "aggregate" in csv

    def test_eval_trilinear_needs_no_checkpoint(self, data_root, tmp_path):
        code = run(["eval", "--preset", "desk", "--model", "trilinear",
                    "--data-dir", str(data_root), "--out", str(tmp_path / "e")])
        assert code == 0

    def test_missing_data_is_runtime_error(self, tmp_path, capsys):
        code = run(["eval", "--preset", "desk", "--model", "trilinear",
                    "--data-dir", str(tmp_path / "nowhere"),
                    "--out", str(tmp_path / "e")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_resume_continues_to_total(self, data_root, tmp_path):
        out = tmp_path / "run"
        run(["train", "--preset", "desk", "--steps", "4",
             "--set", "batch_size=1", "--data-dir", str(data_root),
             "--out", str(out), "--ckpt-interval", "2"])
        full_trace = (out / "loss_trace.csv").read_text()

        out2 = tmp_path / "run2"
        run(["train", "--preset", "desk", "--steps", "2",
             "--set", "batch_size=1", "--set", "total_iters=2",
             "--set", "milestone_fracs=0.5", "--data-dir", str(data_root),
             "--out", str(out2), "--ckpt-interval", "0"])
        # resuming the 4-step schedule from the 2-step checkpoint of run 1
        out3 = tmp_path / "run3"
        code = run(["train", "--preset", "desk", "--steps", "4",
                    "--set", "batch_size=1", "--data-dir", str(data_root),
                    "--out", str(out3), "--resume",
                    str(out / "iter_0000002.state"), "--ckpt-interval", "0"])
        assert code == 0
        resumed_trace = (out3 / "loss_trace.csv").read_text()
        assert resumed_trace == full_trace

    def test_config_file_with_overrides(self, data_root, tmp_path):
        cfg = tmp_path / "my.cfg"
        cfg.write_text("preset = desk\nseed = 3\n")
        out = tmp_path / "run"
        code = run(["train", "--config", str(cfg), "--steps", "2",
                    "--set", "batch_size=1", "--data-dir", str(data_root),
                    "--out", str(out), "--ckpt-interval", "0"])
        assert code == 0
        assert "seed = 3" in (out / "resolved.cfg").read_text()


class TestLamCommand:
    def test_lam_artifacts(self, tmp_path):
        data_root = make_data(tmp_path / "data", count=1, edge=64)
        out = tmp_path / "run"
        run(["train", "--preset", "desk", "--steps", "2",
             "--set", "batch_size=1", "--data-dir", str(data_root),
             "--out", str(out), "--ckpt-interval", "0"])
        lam_out = tmp_path / "lam"
        code = run(["lam", "--preset", "desk", "--ckpt",
                    str(out / "last.params"), "--data-dir", str(data_root),
                    "--steps", "8", "--box-edge", "4", "--out", str(lam_out)])
        assert code == 0
        assert (lam_out / "attribution.mtvvol").exists()
        assert (lam_out / "attribution.png").read_bytes()[:4] == b"\x89PNG"


class TestProfileCommand:
    def test_csv_row_contract(self, tmp_path):
        out = tmp_path / "prof"
        code = run(["profile", "--preset", "L3",
                    "--resolutions", "16,32,48,64,128", "--out", str(out)])
        assert code == 0
        lines = (out / "memory_profile.csv").read_text().strip().splitlines()
        assert len(lines) == 6     # header + one row per resolution
        assert (out / "memory_profile.png").exists()

    def test_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["profile", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--resolutions", "--measure", "--out", "--preset",
                     "--config", "--set"):
            assert flag in text


def test_no_partial_artifacts_left(tmp_path):
    root = make_data(tmp_path / "data", count=1, edge=32)
    leftovers = [p for p in (root / "hr").iterdir() if p.suffix != ".mtvvol"]
    assert leftovers == []
