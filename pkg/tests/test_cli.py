"""Command-line entry point: exit codes, run directories, samples, bench, ablations, inspect."""

import csv
import re

import numpy as np
import pytest

from dissm import cli
from dissm.config import emit, load
from dissm.data import read_pnm
from dissm.model import param_count, table_config
from dissm.trainer import FINAL_CHECKPOINT, METRICS_FILE

TINY = """\
L = 3
D = 16
N = 4
p = 4
num_classes = 2
steps = 6
batch_size = 4
dataset_size = 16
ema_decay = 0.9
ckpt_every = 3
sample_steps = 5
"""


def write_cfg(path, text=TINY, **extra):
    """Write ``text`` with the keys in ``extra`` overridden or appended."""
    lines = [ln for ln in text.splitlines() if ln.split("=")[0].strip() not in extra]
    path.write_text("\n".join(lines + [f"{k} = {v}" for k, v in extra.items()]) + "\n")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "tiny.cfg")
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg, root / "run"


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


class TestTrain:
    def test_run_directory(self, trained):
        _, cfg, run = trained
        assert (run / FINAL_CHECKPOINT).exists() and (run / "step_000003.ckpt").exists()
        assert load(run / "config.txt") == load(cfg)
        assert len((run / METRICS_FILE).read_text().splitlines()) == 7

    def test_same_seed_same_metrics(self, trained, tmp_path):
        _, cfg, run = trained
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "again") == 0
        assert (tmp_path / "again" / METRICS_FILE).read_bytes() == (run / METRICS_FILE).read_bytes()

    def test_seed_flag_overrides(self, trained, tmp_path):
        _, cfg, run = trained
        assert run_cli("train", "--config", cfg, "--seed", 5, "--steps", 2, "--out", tmp_path / "s") == 0
        resolved = load(tmp_path / "s" / "config.txt")
        assert resolved.train.seed == 5 and resolved.train.steps == 2

    def test_nan_abort(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "hot.cfg", lr=1e4, lr_schedule="constant", steps=40)
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "r") == 2
        assert re.search(r"numeric abort: .*step \d+", capsys.readouterr().err)

    def test_config_errors(self, tmp_path, capsys):
        assert run_cli("train", "--config", write_cfg(tmp_path / "b.cfg", depth=3), "--out", tmp_path / "r") == 1
        assert "unknown config key" in capsys.readouterr().err
        assert run_cli("train", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "r") == 1
        assert run_cli("train", "--config", write_cfg(tmp_path / "g.cfg", H=16, W=16), "--out", tmp_path / "r") == 1

    def test_usage_errors(self, capsys):
        assert run_cli("train") == 1
        assert run_cli("fly") == 1
        assert "usage error" in capsys.readouterr().err


class TestSample:
    def test_files_and_manifest(self, trained, tmp_path):
        _, _, run = trained
        assert run_cli("sample", run / FINAL_CHECKPOINT, "--n", 4, "--seed", 3, "--out", tmp_path / "a") == 0
        rows = list(csv.DictReader((tmp_path / "a" / "manifest.csv").open()))
        assert [r["filename"] for r in rows] == [f"sample_s3_c{k % 2}_{k:04d}.pgm" for k in range(4)]
        assert {r["steps"] for r in rows} == {"5"} and {r["seed"] for r in rows} == {"3"}
        assert read_pnm(tmp_path / "a" / rows[0]["filename"]).shape == (8, 8, 1)

    def test_rerun_byte_identical(self, trained, tmp_path):
        _, _, run = trained
        for d in ("a", "b"):
            assert run_cli("sample", run / FINAL_CHECKPOINT, "--n", 4, "--out", tmp_path / d) == 0
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_class_flag(self, trained, tmp_path, capsys):
        _, _, run = trained
        assert run_cli("sample", run / FINAL_CHECKPOINT, "--n", 2, "--class", 1, "--out", tmp_path / "c") == 0
        assert sorted(p.name for p in (tmp_path / "c").glob("*.pgm"))[0].startswith("sample_s0_c1_")
        assert run_cli("sample", run / FINAL_CHECKPOINT, "--class", 2, "--out", tmp_path / "d") == 1
        assert "num_classes=2" in capsys.readouterr().err

    def test_ema_is_default(self, trained, tmp_path):
        _, _, run = trained
        run_cli("sample", run / FINAL_CHECKPOINT, "--n", 2, "--out", tmp_path / "ema")
        run_cli("sample", run / FINAL_CHECKPOINT, "--n", 2, "--raw-weights", "--out", tmp_path / "raw")
        name = "sample_s0_c0_0000.pgm"
        assert (tmp_path / "ema" / name).read_bytes() != (tmp_path / "raw" / name).read_bytes()

    def test_unconditional_scale_one_equals_omitted(self, tmp_path):
        cfg = write_cfg(tmp_path / "u.cfg", num_classes=0, steps=2)
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "run") == 0
        ck = tmp_path / "run" / FINAL_CHECKPOINT
        assert run_cli("sample", ck, "--n", 2, "--out", tmp_path / "a") == 0
        assert run_cli("sample", ck, "--n", 2, "--cfg-scale", 1, "--out", tmp_path / "b") == 0
        for name in ("sample_s0_cu_0000.pgm", "sample_s0_cu_0001.pgm", "manifest.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert run_cli("sample", ck, "--class", 0, "--out", tmp_path / "c") == 1

    def test_config_mismatch(self, trained, tmp_path, capsys):
        _, _, run = trained
        other = write_cfg(tmp_path / "o.cfg", D=32)
        assert run_cli("sample", run / FINAL_CHECKPOINT, "--config", other, "--out", tmp_path / "x") == 1
        assert "D: checkpoint=16 expected=32" in capsys.readouterr().err

    def test_bad_checkpoint(self, trained, tmp_path, capsys):
        _, _, run = trained
        blob = (run / FINAL_CHECKPOINT).read_bytes()
        (tmp_path / "t.ckpt").write_bytes(blob[: len(blob) // 2])
        assert run_cli("sample", tmp_path / "t.ckpt", "--out", tmp_path / "x") == 1
        assert "truncated or corrupt" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_bad_flags(self, trained, tmp_path):
        _, _, run = trained
        assert run_cli("sample", run / FINAL_CHECKPOINT, "--n", 0, "--out", tmp_path / "x") == 1
        assert run_cli("sample", run / FINAL_CHECKPOINT, "--steps", 0, "--out", tmp_path / "x") == 1


class TestBench:
    def test_default_sweep_rows(self, tmp_path, capsys):
        assert run_cli("bench", "--out", tmp_path) == 0
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert len(lines) == 9 and lines[0] == "kernel,J,D,N,counted_macs,formula_macs,wall_ns"
        assert "ssm: line R^2=" in capsys.readouterr().out

    def test_malformed_j(self, capsys):
        assert run_cli("bench", "--J", "64,x") == 1
        assert run_cli("bench", "--J", "64,128") == 1
        assert run_cli("bench", "--J", "64,128,256,512", "--D", 0) == 1

    def test_configs_report(self, tmp_path, capsys):
        assert run_cli("bench", "--configs", "S", "B", "--out", tmp_path) == 0
        out = capsys.readouterr().out
        assert "28.4" in out and "1.86" in out
        assert len((tmp_path / "gflops.csv").read_text().splitlines()) == 3
        assert run_cli("bench", "--configs", "Q") == 1


class TestAblate:
    def test_skip_axis(self, tmp_path, monkeypatch):
        seen = []
        real = cli.train

        def spy(cfg, data=None, out_dir=None):
            seen.append((cfg.train.seed, id(data), data.images.tobytes()))
            return real(cfg, data=data, out_dir=out_dir)

        monkeypatch.setattr(cli, "train", spy)
        cfg = write_cfg(tmp_path / "a.cfg", steps=2)
        assert run_cli("ablate", "--axis", "skip", "--config", cfg, "--out", tmp_path / "abl") == 0
        dirs = sorted(p.name for p in (tmp_path / "abl").iterdir() if p.is_dir())
        assert dirs == ["skip_add", "skip_concat", "skip_none"]
        rows = list(csv.DictReader((tmp_path / "abl" / "summary.csv").open()))
        assert [r["value"] for r in rows] == ["concat", "add", "none"]
        assert all(float(r["final_loss"]) > 0 for r in rows)
        assert len({s[0] for s in seen}) == 1 and len({s[1] for s in seen}) == 1

    def test_variant_sets(self):
        base = load_base()
        assert [v[2] for v in cli.ablation_variants("patch", base)] == ["2", "4", "8"]
        assert [v[2] for v in cli.ablation_variants("cond", base)] == ["token", "adaln"]
        tiers = cli.ablation_variants("scale", base)
        assert [c.model.L for *_, c in tiers] == [3, 5, 5]
        assert len({emit(c) for *_, c in tiers}) == 3

    def test_bad_axis(self, tmp_path):
        assert run_cli("ablate", "--axis", "depth", "--out", tmp_path) == 1


def load_base():
    from dissm.config import parse
    return parse(TINY)


class TestInspect:
    def test_small_config(self, tmp_path, capsys):
        cfg = tmp_path / "s.cfg"
        from dissm.config import RunConfig
        cfg.write_text(emit(RunConfig(model=table_config("S"))))
        assert run_cli("inspect", "--config", cfg) == 0
        out = capsys.readouterr().out
        assert "paper: 28.4M" in out
        subtotals = [int(m.replace(",", "")) for m in re.findall(r"^  (?!total)\S+\s+([\d,]+)$", out, re.M)]
        total = int(re.search(r"^  total\s+([\d,]+)", out, re.M).group(1).replace(",", ""))
        assert sum(subtotals) == total == param_count(table_config("S"))

    def test_checkpoint(self, trained, capsys):
        _, _, run = trained
        assert run_cli("inspect", run / FINAL_CHECKPOINT) == 0
        out = capsys.readouterr().out
        assert "checkpoint step 6" in out and "paper:" not in out

    def test_truncated(self, trained, tmp_path, capsys):
        _, _, run = trained
        (tmp_path / "t.ckpt").write_bytes((run / FINAL_CHECKPOINT).read_bytes()[:40])
        assert run_cli("inspect", tmp_path / "t.ckpt") == 1
        assert "v1" in capsys.readouterr().err

    def test_needs_exactly_one_source(self, trained):
        _, cfg, run = trained
        assert run_cli("inspect") == 1
        assert run_cli("inspect", run / FINAL_CHECKPOINT, "--config", cfg) == 1


def test_inputs_not_mutated(trained, tmp_path):
    _, cfg, run = trained
    before = {p: p.read_bytes() for p in run.iterdir()}
    cfg_bytes = cfg.read_bytes()
    run_cli("sample", run / FINAL_CHECKPOINT, "--n", 1, "--out", tmp_path / "x")
    run_cli("inspect", run / FINAL_CHECKPOINT)
    assert {p: p.read_bytes() for p in run.iterdir()} == before and cfg.read_bytes() == cfg_bytes
    assert np.isfinite(float(next(csv.DictReader((tmp_path / "x" / "manifest.csv").open()))["cfg_scale"]))
