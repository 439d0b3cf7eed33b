import json
import subprocess
import sys

import pytest

from ar2diff.checkpoint import load_checkpoint, read_header
from ar2diff.cli import main
from ar2diff.manifest import find_orphans, git_blob_hash
from ar2diff.report import read_latency_csv

CONFIG = {
    "seed": 1,
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 40},
    "stages": {
        "pretrain": {"steps": 4, "batch_size": 4, "warmup_steps": 2},
        "adapt": {"steps": 3, "batch_size": 4},
        "finetune": {"steps": 3, "batch_size": 4},
    },
    "pretrain_data": {"seq_len": 40, "target_len": 12},
    "task": {"kind": "cipher", "max_len": 8, "target_window": 8},
    "task_data": {"n_train": 50, "n_test": 6},
    "paths": {"checkpoints": "ck", "logs": "lg", "reports": "rp"},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(CONFIG))
    return tmp_path


def cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def manifests(workdir, command=None):
    recs = [json.loads(p.read_text()) for p in sorted((workdir / "lg" / "manifests").glob("*.json"))]
    return [r for r in recs if command is None or r["command"] == command]


@pytest.fixture
def pipeline(workdir, capsys):
    assert cli(capsys, "pretrain", "--config", "cfg.json")[0] == 0
    assert cli(capsys, "adapt", "--config", "cfg.json", "--from", "ck/pretrain_4.ckpt")[0] == 0
    assert cli(capsys, "finetune", "--config", "cfg.json", "--from", "ck/adapt_3.ckpt")[0] == 0
    return workdir


def test_full_pipeline_layout(pipeline):
    names = sorted(p.name for p in (pipeline / "ck").iterdir() if not p.name.startswith("."))
    assert names == ["adapt_3.ckpt", "adapt_3.json", "finetune_3.ckpt", "finetune_3.json",
                     "pretrain_4.ckpt", "pretrain_4.json"]
    assert read_header(pipeline / "ck" / "finetune_3.ckpt")["meta"]["attention"] == "full"
    pre = manifests(pipeline, "pretrain")[0]
    assert pre["status"] == "ok" and pre["seeds"]["stage"] == 1
    produced = {p["path"]: p["git_oid"] for p in pre["produced"]}
    ck = str((pipeline / "ck" / "pretrain_4.ckpt").resolve())
    assert produced[ck] == git_blob_hash(ck)
    ft = manifests(pipeline, "finetune")[0]
    assert ft["consumed"][0]["path"] == str((pipeline / "ck" / "adapt_3.ckpt").resolve())


def test_adapt_zero_steps_is_relabelled_copy(pipeline, capsys):
    code, _, _ = cli(capsys, "adapt", "--config", "cfg.json", "--from", "ck/pretrain_4.ckpt", "--steps", "0")
    assert code == 0
    src, src_meta, _ = load_checkpoint(pipeline / "ck" / "pretrain_4.ckpt")
    dst, dst_meta, _ = load_checkpoint(pipeline / "ck" / "adapt_0.ckpt")
    assert dst.equal(src)
    assert (src_meta["attention"], dst_meta["attention"]) == ("causal", "full")
    assert dst_meta["kind"] == "diffusion"
    assert manifests(pipeline, "adapt")[-1]["config"]["stages"]["adapt"]["steps"] == 0
    # the relabelled copy is accepted by finetune
    assert cli(capsys, "finetune", "--config", "cfg.json", "--from", "ck/adapt_0.ckpt", "--steps", "1")[0] == 0


def test_attention_mismatch_fails_loudly(pipeline, capsys):
    code, _, err = cli(capsys, "finetune", "--config", "cfg.json", "--from", "ck/pretrain_4.ckpt")
    assert code == 1
    line = json.loads(err.strip().splitlines()[-1])
    assert line["error"] == "TrainingError" and "attention mode mismatch" in line["message"]
    code, _, err = cli(capsys, "adapt", "--config", "cfg.json", "--from", "ck/finetune_3.ckpt")
    assert code == 1 and "mismatch" in err
    assert manifests(pipeline, "finetune")[-1]["status"] == "error"


def test_decode_defaults_and_overrides(pipeline, capsys):
    code, out, _ = cli(capsys, "decode", "--config", "cfg.json", "--checkpoint", "ck/finetune_3.ckpt",
                       "--prompt", "abc")
    assert code == 0
    resp = json.loads(out)
    assert set(resp) >= {"output", "candidates", "scores", "timing_ms"}
    assert len(resp["candidates"]) == 8
    rec = manifests(pipeline, "decode")[-1]
    assert (rec["config"]["sampler"]["num_steps"], rec["config"]["sampler"]["num_samples"]) == (10, 8)
    code, out, _ = cli(capsys, "decode", "--config", "cfg.json", "--checkpoint", "ck/finetune_3.ckpt",
                       "--prompt", "abc", "--mode", "diffusion", "--num-steps", "3", "--num-samples", "2")
    assert len(json.loads(out)["candidates"]) == 2
    assert manifests(pipeline, "decode")[-1]["config"]["sampler"]["num_steps"] == 3


def test_decode_request_file_and_ar(pipeline, capsys):
    (pipeline / "req.json").write_text(json.dumps({"prompt": "ab", "mode": "ar"}))
    code, out, _ = cli(capsys, "decode", "--config", "cfg.json", "--checkpoint", "ck/pretrain_4.ckpt",
                       "--request", "req.json")
    assert code == 0
    resp = json.loads(out)
    assert "candidates" not in resp and resp["mode"] == "ar"
    (pipeline / "bad.json").write_text(json.dumps({"prompt": "ab", "beam": 3}))
    code, _, err = cli(capsys, "decode", "--config", "cfg.json", "--checkpoint", "ck/pretrain_4.ckpt",
                       "--request", "bad.json")
    assert code == 2 and "beam" in err


def test_eval_and_sweep_reports(pipeline, capsys):
    code, out, _ = cli(capsys, "eval", "--config", "cfg.json", "--checkpoint", "ck/finetune_3.ckpt",
                       "--num-steps", "2", "--num-samples", "2")
    assert code == 0 and json.loads(out)["n"] == 6
    assert (pipeline / "rp" / "eval_finetune_3_metrics.csv").exists()
    code, out, _ = cli(capsys, "sweep", "--config", "cfg.json", "--checkpoint", "ck/finetune_3.ckpt",
                       "--steps-grid", "1,2", "--samples-grid", "1,2,3", "--limit", "2")
    grid = json.loads(out)["grid"]
    assert code == 0 and len(grid) == 2 and len(grid[0]) == 3


def test_bench_writes_latency_csv(workdir, capsys):
    cfg = dict(CONFIG, model=dict(CONFIG["model"], max_seq_len=520), pretrain_data={"seq_len": 64, "target_len": 12})
    (workdir / "bench.json").write_text(json.dumps(cfg))
    code, out, _ = cli(capsys, "bench", "--config", "bench.json", "--lengths", "64,128,256,512", "--reps", "3",
                       "--num-steps", "2", "--warmup", "1")
    assert code == 0
    recs = read_latency_csv(workdir / "rp" / "bench_latency.csv")
    assert sorted({r.length for r in recs}) == [64, 128, 256, 512]
    assert {r.kind for r in recs} == {"ar", "diffusion"}


def test_no_orphans_after_runs(pipeline, capsys):
    cli(capsys, "eval", "--config", "cfg.json", "--checkpoint", "ck/finetune_3.ckpt", "--num-steps", "1",
        "--num-samples", "1")
    roots = [pipeline / d for d in ("ck", "lg", "rp")]
    assert find_orphans(roots, [pipeline / "lg"]) == []
    stray = pipeline / "ck" / "stray.ckpt"
    stray.write_bytes(b"x")
    assert find_orphans(roots, [pipeline / "lg"]) == [stray]


def test_flags_override_config(pipeline, capsys):
    cli(capsys, "pretrain", "--config", "cfg.json", "--steps", "2", "--lr", "0.01", "--seed", "5")
    rec = manifests(pipeline, "pretrain")[-1]
    assert rec["config"]["stages"]["pretrain"]["steps"] == 2
    assert rec["config"]["stages"]["pretrain"]["lr"] == 0.01
    assert rec["seeds"]["stage"] == 5
    assert (pipeline / "ck" / "pretrain_2.ckpt").exists()


def test_resume_via_cli(workdir, capsys):
    assert cli(capsys, "pretrain", "--config", "cfg.json", "--checkpoint-every", "2")[0] == 0
    full, _, _ = load_checkpoint(workdir / "ck" / "pretrain_4.ckpt")
    (workdir / "ck" / "pretrain_4.ckpt").unlink()
    assert cli(capsys, "pretrain", "--config", "cfg.json", "--resume", "ck/pretrain_2.ckpt")[0] == 0
    assert load_checkpoint(workdir / "ck" / "pretrain_4.ckpt")[0].equal(full)


def test_config_errors_are_one_json_line(workdir, capsys):
    (workdir / "bad.json").write_text(json.dumps({"sampler": {"num_stpes": 3}}))
    code, _, err = cli(capsys, "decode", "--config", "bad.json", "--checkpoint", "x", "--prompt", "a")
    assert code == 2
    lines = err.strip().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["error"] == "config"
    assert "num_stpes" in json.loads(lines[0])["message"]


def test_usage_errors(workdir, capsys):
    code, _, err = cli(capsys, "serve")
    assert code == 2 and json.loads(err)["error"] == "usage"
    code, _, err = cli(capsys, "bench", "--lengths", "a,b")
    assert code == 2
    code, _, err = cli(capsys, "decode", "--config", "cfg.json", "--checkpoint", "missing.ckpt", "--prompt", "a")
    assert code == 1 and json.loads(err)["error"] == "CheckpointError"


def test_lock_blocks_concurrent_writer(workdir, capsys):
    from filelock import FileLock

    (workdir / "ck").mkdir()
    with FileLock(str(workdir / "ck" / ".lock")):
        code, _, err = cli(capsys, "pretrain", "--config", "cfg.json")
    assert code == 1 and "locked" in err


def test_log_level_env(workdir, capsys, monkeypatch):
    monkeypatch.setenv("AR2DIFF_LOG_LEVEL", "LOUD")
    code, _, err = cli(capsys, "pretrain", "--config", "cfg.json")
    assert code == 2 and "AR2DIFF_LOG_LEVEL" in err


def test_console_script(workdir):
    proc = subprocess.run([sys.executable, "-m", "ar2diff.cli", "eval"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip())["error"] == "usage"
