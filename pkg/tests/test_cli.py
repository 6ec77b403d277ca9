import json
import subprocess
import sys

import pytest

from semtok.cli import EXIT_CONFIG, EXIT_OK, EXIT_PREREQ, build_parser, main, resolve_config

TINY = """\
# tiny smoke settings
K = 4
n_per_class = 12
eval_per_class = 10
pretrain_epochs = 1
stage1_steps = 5
stage2_steps = 5
stage3_steps = 5
batch_size = 4
diff_steps = 5
diff_dim = 32
diff_depth = 1
n_samples = 4
gen_per_class = 3
"""

PIPELINE = (["pretrain-encoder"], ["align", "--stage", "1"], ["align", "--stage", "2"], ["align", "--stage", "3"],
            ["train-diffusion"], ["sample"], ["evaluate"], ["plot"])


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory, tiny_config):
    run = tmp_path_factory.mktemp("run") / "r"
    codes = [main(cmd + ["--run", str(run), "--config", tiny_config]) for cmd in PIPELINE]
    return run, codes


def test_full_pipeline_exits_zero_and_artifacts_exist(full_run):
    run, codes = full_run
    assert codes == [EXIT_OK] * len(PIPELINE)
    manifest = json.loads((run / "manifest.json").read_text())
    assert set(manifest["phases"]) == {"encoder", "stage1", "stage2", "stage3", "diffusion", "samples",
                                       "evaluation", "plots"}
    for entry in manifest["phases"].values():
        assert entry["artifacts"]
        for rel in entry["artifacts"]:
            assert (run / rel).exists(), rel
    assert manifest["config"]["stage1_steps"] == 5
    assert len(list((run / "samples").glob("sample_*.png"))) == 4
    names = {json.loads(line)["name"] for line in (run / "records.jsonl").read_text().splitlines()}
    assert {"eval/probe_acc", "final/psnr", "diffusion/fm_probe"} <= names


def test_rerun_is_noop_and_mismatch_needs_force(full_run, tiny_config, capsys):
    run, _ = full_run
    before = (run / "checkpoints" / "stage2.ckpt").stat().st_mtime_ns
    assert main(["align", "--stage", "2", "--run", str(run), "--config", tiny_config]) == EXIT_OK
    assert "up to date" in capsys.readouterr().out
    assert (run / "checkpoints" / "stage2.ckpt").stat().st_mtime_ns == before
    assert main(["align", "--stage", "2", "--run", str(run), "--config", tiny_config, "--w_sp", "0"]) == EXIT_PREREQ
    assert "hash" in capsys.readouterr().err
    assert (run / "checkpoints" / "stage2.ckpt").stat().st_mtime_ns == before


def test_stage_without_prerequisite_exits_3(tmp_path, tiny_config, capsys):
    assert main(["align", "--stage", "2", "--run", str(tmp_path / "r"), "--config", tiny_config]) == EXIT_PREREQ
    assert capsys.readouterr().err.strip()
    assert main(["align", "--stage", "1", "--run", str(tmp_path / "r"), "--config", tiny_config]) == EXIT_PREREQ
    assert main(["train-diffusion", "--run", str(tmp_path / "r"), "--config", tiny_config]) == EXIT_PREREQ
    assert main(["sample", "--run", str(tmp_path / "r"), "--config", tiny_config]) == EXIT_PREREQ


@pytest.mark.parametrize("flags", [["--f", "7"], ["--d", "-1"], ["--cfg_channels", "99"], ["--steps", "0"],
                                   ["--batch_size", "many"]])
def test_bad_config_exits_2(tmp_path, tiny_config, flags, capsys):
    assert main(["sample", "--run", str(tmp_path / "r"), "--config", tiny_config] + flags) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert main(["pretrain-encoder", "--run", str(tmp_path / "r"), "--config", str(bad)]) == EXIT_CONFIG


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("batch_size = 8\nstage1_steps = 11\n")
    args = build_parser().parse_args(["sample", "--run", "x", "--config", str(cfg), "--stage1-steps", "12",
                                      "--cfg", "2.5"])
    rc = resolve_config(args, {"batch_size": 4, "d": 16})
    assert (rc.batch_size, rc.stage1_steps, rc.d, rc.cfg_scale) == (8, 12, 16, 2.5)
    assert rc.sample_steps == 30 and rc.cfg_channels == "3"


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "semtok", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("pretrain-encoder", "align", "train-diffusion", "sample", "evaluate", "plot"):
        assert cmd in out.stdout
