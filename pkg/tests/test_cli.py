import hashlib
import json
import subprocess
import sys

import pytest

from nesycl import cli

TINY = ["--tasks", "2", "--classes", "2", "--train", "3", "--test", "2", "--pretrain-classes", "0", "--noise", "2"]
FAST = ["--epochs", "2", "--hidden", "8", "--extractor", "random", "--seeds", "1"]


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestGen:
    def test_minimal_stream_two_images(self, tmp_path):
        out = tmp_path / "d"
        assert run("gen", "--tasks", 1, "--classes", 1, "--train", 1, "--test", 1, "--pretrain-classes", 0, "--out-dir", out) == 0
        assert len(list(out.rglob("*.png"))) == 2
        doc = json.loads((out / "stream.json").read_text())
        assert doc["format_version"] == 1
        assert {s["split"] for s in doc["samples"]} == {"train", "test"}

    def test_regeneration_identical(self, tmp_path):
        run("gen", *TINY, "--out-dir", tmp_path / "a")
        run("gen", *TINY, "--out-dir", tmp_path / "b")
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_png_matches_raster(self, tmp_path):
        import cv2

        from nesycl.scenegen import StreamConfig, build_task_stream

        run("gen", *TINY, "--out-dir", tmp_path)
        stream = build_task_stream(StreamConfig(num_tasks=2, classes_per_task=2, train_per_class=3, test_per_class=2, pretrain_classes=0, noise_scale=2.0))
        sample = stream.tasks[1].test[0]
        doc = json.loads((tmp_path / "stream.json").read_text())
        entry = next(s for s in doc["samples"] if s["task"] == 1 and s["split"] == "test" and s["class"] == sample.label)
        img = cv2.cvtColor(cv2.imread(str(tmp_path / entry["path"])), cv2.COLOR_BGR2RGB)
        assert (img == sample.raster).all()

    def test_refuses_overwrite(self, tmp_path):
        assert run("gen", *TINY, "--out-dir", tmp_path) == 0
        assert run("gen", *TINY, "--out-dir", tmp_path) == 2
        assert run("gen", *TINY, "--out-dir", tmp_path, "--force") == 0

    def test_pretrain_split_optional(self, tmp_path):
        run("gen", "--tasks", 1, "--classes", 1, "--train", 1, "--test", 0, "--pretrain-classes", 1, "--out-dir", tmp_path / "a")
        run("gen", "--tasks", 1, "--classes", 1, "--train", 1, "--test", 0, "--pretrain-classes", 1, "--out-dir", tmp_path / "b", "--include-pretrain")
        assert len(list((tmp_path / "a").rglob("*.png"))) == 1
        assert len(list((tmp_path / "b").rglob("*.png"))) == 2


class TestConfig:
    def test_invalid_method_nonzero(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run("run", "--method", "icarl", "--out-dir", tmp_path)
        assert exc.value.code != 0

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"tasks": 1, "colour": 3}))
        assert run("gen", "--config", cfg, "--out-dir", tmp_path / "o") == 2
        assert "colour" in capsys.readouterr().err

    def test_wrong_type_attributed(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text('tasks = "many"\n')
        assert run("gen", "--config", cfg, "--out-dir", tmp_path / "o") == 2
        assert "tasks" in capsys.readouterr().err

    def test_invalid_value_attributed_to_flag(self, tmp_path, capsys):
        assert run("gen", "--tasks", 0, "--out-dir", tmp_path) == 2
        assert "--tasks" in capsys.readouterr().err

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("tasks = 3\nclasses = 1\ntrain = 1\ntest = 0\npretrain_classes = 0\n")
        run("gen", "--config", cfg, "--tasks", 1, "--out-dir", tmp_path / "o")
        doc = json.loads((tmp_path / "o" / "stream.json").read_text())
        assert doc["config"]["num_tasks"] == 1 and doc["config"]["classes_per_task"] == 1

    def test_env_seed_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NESYCL_SEED", "7")
        run("gen", "--tasks", 1, "--classes", 1, "--train", 1, "--test", 0, "--pretrain-classes", 0, "--out-dir", tmp_path / "a")
        run("gen", "--tasks", 1, "--classes", 1, "--train", 1, "--test", 0, "--pretrain-classes", 0, "--seed", 3, "--out-dir", tmp_path / "b")
        assert json.loads((tmp_path / "a" / "stream.json").read_text())["config"]["master_seed"] == 7
        assert json.loads((tmp_path / "b" / "stream.json").read_text())["config"]["master_seed"] == 3

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NESYCL_SEED", "x")
        assert run("gen", *TINY, "--out-dir", tmp_path) == 2


class TestRun:
    def test_symbolic_zero_noise_report(self, tmp_path, capsys):
        args = [*TINY, "--noise", "0", "--method", "symbolic", "--decomp", "oracle", "--seeds", "2", "--out-dir", tmp_path]
        assert run("run", *args) == 0
        assert "A_all=100.0" in capsys.readouterr().out
        report = (tmp_path / "report.csv").read_text().splitlines()
        row = dict(zip(report[0].split(","), report[1].split(",")))
        assert float(row["A_all_mean"]) == 100.0 and float(row["A_all_std"]) == 0.0

    def test_refuses_existing_without_force(self, tmp_path):
        args = [*TINY, "--method", "symbolic", "--seeds", "1", "--out-dir", tmp_path]
        assert run("run", *args) == 0
        assert run("run", *args) == 2
        assert run("run", *args, "--force") == 0

    def test_matrix_byte_identical_on_rerun(self, tmp_path):
        for name in ("a", "b"):
            assert run("run", *TINY, *FAST, "--method", "er", "--out-dir", tmp_path / name) == 0
        ma = sorted((tmp_path / "a").rglob("matrix.csv"))
        mb = sorted((tmp_path / "b").rglob("matrix.csv"))
        assert len(ma) == 1 and ma[0].read_bytes() == mb[0].read_bytes()

    def test_jobs_match_sequential(self, tmp_path):
        base = [*TINY, "--epochs", "2", "--hidden", "8", "--extractor", "random", "--seeds", "2", "--method", "finetune"]
        run("run", *base, "--out-dir", tmp_path / "a")
        run("run", *base, "--jobs", "2", "--out-dir", tmp_path / "b")
        for fa in sorted((tmp_path / "a").rglob("matrix.csv")):
            fb = tmp_path / "b" / fa.relative_to(tmp_path / "a")
            assert fa.read_bytes() == fb.read_bytes()


class TestReportAndPlot:
    @pytest.fixture()
    def results(self, tmp_path):
        out = tmp_path / "res"
        run("run", *TINY, "--method", "symbolic", "--seeds", "1", "--out-dir", out)
        run("run", *TINY, *FAST, "--method", "finetune", "--out-dir", out)
        return out

    def test_report_sorted_single_seed_std_zero(self, results, tmp_path):
        assert run("report", results, "--out-dir", tmp_path / "rep") == 0
        lines = (tmp_path / "rep" / "report.csv").read_text().splitlines()
        rows = [dict(zip(lines[0].split(","), line.split(","))) for line in lines[1:]]
        assert [r["method"] for r in rows] == ["finetune", "symbolic"]
        assert all(float(r["A_all_std"]) == 0.0 for r in rows)
        assert (tmp_path / "rep" / "report.md").read_text().startswith("| Method |")

    def test_report_refuses_overwrite(self, results):
        assert run("report", results) == 2
        assert run("report", results, "--force") == 0

    def test_plot_two_svgs_deterministic(self, results, tmp_path):
        assert run("plot", results, "--out-dir", tmp_path / "p1") == 0
        assert run("plot", results, "--out-dir", tmp_path / "p2") == 0
        names = sorted(p.name for p in (tmp_path / "p1").iterdir())
        assert names == ["curve_all_tasks.svg", "curve_last_task.svg"]
        for n in names:
            assert (tmp_path / "p1" / n).read_bytes() == (tmp_path / "p2" / n).read_bytes()
            assert (tmp_path / "p1" / n).read_text().startswith("<svg")

    def test_plot_empty_dir_errors_without_files(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run("plot", tmp_path / "empty", "--out-dir", tmp_path / "p") == 1
        assert not (tmp_path / "p").exists()

    def test_sweep_and_plot(self, tmp_path):
        out = tmp_path / "s"
        assert run("sweep", *TINY, "--method", "symbolic", "--seeds", "1", "--kind", "uncertainty", "--grid", "0,4", "--out-dir", out) == 0
        lines = (out / "sweep_uncertainty.csv").read_text().splitlines()
        assert len(lines) == 3
        assert run("plot", out, "--out-dir", tmp_path / "p") == 0
        assert (tmp_path / "p" / "sweep_uncertainty.svg").exists()

    def test_sweep_bad_grid(self, tmp_path):
        assert run("sweep", *TINY, "--kind", "uncertainty", "--grid", "a,b", "--out-dir", tmp_path) == 2


class TestSelftest:
    def test_selftest_passes(self, capsys):
        assert run("selftest") == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") == 5

    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "nesycl.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "selftest" in proc.stdout
