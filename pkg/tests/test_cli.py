import json
import subprocess
import sys

import numpy as np
import pytest

from disaggrl import proto
from disaggrl.cli import main, write_pgm
from disaggrl.nn import NetConfig, PolicyNet, save_checkpoint


def test_memplan_prints_table_and_json(tmp_path, capsys):
    assert main(["memplan", "--json", str(tmp_path / "plan.json")]) == 0
    out = capsys.readouterr().out
    assert "160x120" in out and "320x240" in out
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert {r["resolution"]: r["dp_per_device"] for r in plan["rows"]}["160x120"] == 1024


def test_proto_dump_lists_frames_and_rejects_garbage(tmp_path, capsys):
    good = tmp_path / "cap.bin"
    good.write_bytes(proto.encode_frame(proto.Hello(1, 4, [])) + proto.encode_frame(proto.Shutdown()))
    assert main(["proto-dump", str(good)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and "Shutdown" in lines[1]
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 12)
    assert main(["proto-dump", str(bad)]) == 2


def test_env_rollout_writes_trajectory_and_frames(tmp_path):
    cfg = tmp_path / "env.json"
    cfg.write_text(json.dumps({"obs_modes": ["depth"], "width": 16, "height": 12}))
    out = tmp_path / "roll"
    assert main(["env-rollout", "--config", str(cfg), "--steps", "60", "--stop-on-done", "--out", str(out)]) == 0
    recs = [json.loads(line) for line in (out / "trajectory.jsonl").read_text().splitlines()]
    assert recs[-1]["success"] and recs[-1]["done"]  # the scripted controller solves f=0
    assert len(list(out.glob("frame_*.pgm"))) == len(recs)
    head = (out / "frame_0000.pgm").read_bytes()
    assert head.startswith(b"P5\n16 12\n255\n") and len(head) == len(b"P5\n16 12\n255\n") + 16 * 12


def test_write_pgm_scales_to_bytes(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.array([[0.0, 1.0], [0.5, 2.0]]))
    assert (tmp_path / "x.pgm").read_bytes().endswith(bytes([0, 255, 128, 255]))


def test_eval_reads_env_from_checkpoint(tmp_path, capsys):
    net = PolicyNet(NetConfig.for_obs("depth", 16, 16, conv_filters=[4], mlp_hidden=[8]))
    ckpt = tmp_path / "p.ckpt"
    save_checkpoint(net, ckpt, {"env": {"obs_modes": ["depth"], "width": 16, "height": 16}})
    assert main(["eval", "--ckpt", str(ckpt), "--episodes", "20"]) == 0
    rep = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= rep["sr"] <= 1.0 and rep["episodes"] == 20


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "disaggrl", "--help"], capture_output=True, text=True, timeout=60)
    assert r.returncode == 0
    for cmd in ("learner", "replica", "distill", "eval", "compare", "bench", "memplan", "launch", "proto-dump", "env-rollout"):
        assert cmd in r.stdout


def test_bad_address_is_usage_error():
    with pytest.raises(SystemExit):
        main(["replica", "--id", "0", "--connect", "nohost", "--envs", "2"])
