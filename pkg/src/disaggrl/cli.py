"""Command-line entry point: ``disaggrl <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("disaggrl")


def _addr(s: str) -> tuple[str, int]:
    host, _, port = s.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {s!r}")
    return host, int(port)


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _env_from(d: dict):
    from .env import EnvConfig

    # accept either a bare env config or a train/distill config that nests one
    return EnvConfig.from_dict(d["env"] if "env" in d and isinstance(d["env"], dict) else d)


# --- learner / replica ----------------------------------------------------------


def cmd_learner(a) -> int:
    from .learner.run import run_disagg, run_dp, run_single
    from .learner.trainer import TrainConfig

    d = _load_json(a.cfg)
    for key in ("seed", "iters", "replicas", "time_budget"):
        v = getattr(a, key)
        if v is not None:
            d[key] = v
    if a.mode == "dp" and a.replicas is not None:
        d.pop("replicas")  # world size, not replica count
    cfg = TrainConfig.from_dict(d)
    if a.mode == "single":
        return run_single(cfg, a.out)
    if a.mode == "disagg":
        if a.listen is None:
            raise SystemExit("learner --mode disagg needs --listen HOST:PORT")
        return run_disagg(cfg, *a.listen, a.out, a.accept_timeout)
    world = a.replicas or 2
    if a.rank == 0:
        if a.listen is None:
            raise SystemExit("dp rank 0 needs --listen HOST:PORT")
        return run_dp(cfg, 0, world, *a.listen, a.out, a.accept_timeout)
    if a.connect is None:
        raise SystemExit("dp ranks > 0 need --connect HOST:PORT")
    return run_dp(cfg, a.rank, world, *a.connect, a.out, a.accept_timeout)


def cmd_replica(a) -> int:
    from .replica import ReplicaConfig, run_replica

    env = _env_from(_load_json(a.config))
    host, port = a.connect
    return run_replica(ReplicaConfig(a.id, host, port, a.envs, env, a.seed, a.offset, a.connect_timeout))


# --- distillation / evaluation ----------------------------------------------------


def cmd_distill(a) -> int:
    from .distill import DistillConfig, distill, load_teacher

    d = _load_json(a.cfg)
    d["student_mode"] = a.student_mode
    if a.seed is not None:
        d["seed"] = a.seed
    cfg = DistillConfig(**d)
    res = distill(load_teacher(a.teacher), cfg, a.out)
    print(json.dumps({"final_sr": res.final_sr, "final": res.metrics[-1] if res.metrics else None}))
    return 0


def cmd_eval(a) -> int:
    from .evaluation import evaluate_net
    from .nn import load_checkpoint

    net, meta = load_checkpoint(a.ckpt)
    env = _env_from(_load_json(a.cfg)) if a.cfg else _env_from(meta.get("env", {}))
    res = evaluate_net(net, env, a.episodes, a.adr_fraction, a.seed)
    print(json.dumps({"ckpt": str(a.ckpt), **res.to_dict()}))
    return 0


def cmd_compare(a) -> int:
    from .distill import DistillConfig, compare_teachers, load_teacher

    d = _load_json(a.cfg)
    d.setdefault("student_mode", "stereo")
    rep = compare_teachers(
        load_teacher(a.depth_teacher, "depth"),
        load_teacher(a.state_teacher, "state"),
        DistillConfig(**d),
        seeds=range(a.seeds),
        out_dir=a.out,
    )
    for name, t in rep["teachers"].items():
        print(f"{name} teacher: mean final SR {t['mean_final_sr']:.3f}")
    print(f"depth >= state: {rep['depth_ge_state']}")
    return 0


# --- harness --------------------------------------------------------------------


def cmd_bench(a) -> int:
    from .env import EnvConfig
    from .harness.bench import bench_throughput

    env = _env_from(_load_json(a.config)) if a.config else EnvConfig(width=a.width, height=a.height)
    results = []
    for topo in a.topology:
        r = bench_throughput(topo, a.duration, env, a.envs, a.replicas, horizon=a.horizon, seed=a.seed)
        results.append(r.to_dict())
        print(f"{topo:<7} {r.steps_per_sec:10.1f} steps/s  inference {r.inference_sec:.2f}s  "
              f"env {r.env_sec:.2f}s  wire {r.wire_sec:.2f}s  wall {r.wall_sec:.2f}s")
    if a.json:
        Path(a.json).write_text(json.dumps(results, indent=2))
    return 0


def cmd_memplan(a) -> int:
    from .harness.memory import MemoryModel, format_memplan, memplan

    model = MemoryModel(**_load_json(a.model)) if a.model else MemoryModel()
    rows = memplan(model, a.devices, a.horizon, a.channels)
    print(format_memplan(rows, a.devices))
    payload = json.dumps({"model": model.to_dict(), "rows": rows}, indent=2)
    if a.json:
        Path(a.json).write_text(payload)
    else:
        print(payload)
    return 0


def cmd_launch(a) -> int:
    from .harness.launch import RunSpec, launch

    spec = RunSpec.load(a.spec)
    if a.out:
        spec.out = a.out
    if a.port is not None:
        spec.port = a.port
    res = launch(spec)
    print(json.dumps({"code": res.code, "port": res.port, "exit_codes": res.exit_codes}))
    return res.code


# --- debug tools -------------------------------------------------------------------


def cmd_proto_dump(a) -> int:
    from . import proto

    data = Path(a.file).read_bytes() if a.file != "-" else sys.stdin.buffer.read()
    off = 0
    try:
        for off, msg in proto.iter_frames(data):
            print(f"{off:>10}  {proto.describe(msg)}")
    except proto.ProtocolError as exc:
        print(f"error after offset {off}: {exc}", file=sys.stderr)
        return 2
    return 0


def write_pgm(path: Path, img: np.ndarray) -> None:
    """Binary 8-bit greyscale PGM of an image in [0, 1]."""
    h, w = img.shape
    px = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def cmd_env_rollout(a) -> int:
    from .env import EnvConfig, VecEnv, greedy_controller, render_depth_batch

    d = _load_json(a.config)
    env_cfg = _env_from(d) if d else EnvConfig()
    modes = list(dict.fromkeys([*env_cfg.obs_modes, "state"]))
    env_cfg = EnvConfig.from_dict({**env_cfg.to_dict(), "obs_modes": modes})
    adr = env_cfg.make_adr()
    adr.set_fraction(a.adr_fraction)
    env = VecEnv(env_cfg, [a.env_id], a.seed, adr)
    obs = env.reset()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(a.seed)
    with (out / "trajectory.jsonl").open("w") as fp:
        for t in range(a.steps):
            img = render_depth_batch(env.gripper, env.obj, env_cfg.width, env_cfg.height,
                                     env_cfg.gripper_radius, env_cfg.object_radius)[0, 0]
            write_pgm(out / f"frame_{t:04d}.pgm", img)
            if a.policy == "greedy":
                act = greedy_controller(obs["state"])
            else:
                act = rng.uniform(-1, 1, (1, 3)).astype(np.float32)
            s = env.state(0)
            reward, done, success, obs = env.step(act)
            fp.write(json.dumps({
                "t": t,
                "gripper": list(s.gripper),
                "object": list(s.object),
                "grasped": s.grasped,
                "action": act[0].tolist(),
                "reward": float(reward[0]),
                "done": bool(done[0]),
                "success": bool(success[0]),
            }) + "\n")
            if done[0] and a.stop_on_done:
                break
    print(f"wrote {t + 1} steps to {out}")
    return 0


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disaggrl", description="Disaggregated simulation and PPO training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("learner", help="run the learner (or one data-parallel worker)")
    s.add_argument("--listen", type=_addr)
    s.add_argument("--connect", type=_addr, help="dp rank > 0: address of rank 0")
    s.add_argument("--replicas", type=int, help="replica count (disagg) or world size (dp)")
    s.add_argument("--cfg", help="TrainConfig JSON")
    s.add_argument("--mode", choices=["disagg", "dp", "single"], default="disagg")
    s.add_argument("--rank", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--time-budget", dest="time_budget", type=float)
    s.add_argument("--accept-timeout", dest="accept_timeout", type=float, default=120.0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_learner)

    s = sub.add_parser("replica", help="run one simulator replica")
    s.add_argument("--id", type=int, required=True)
    s.add_argument("--connect", type=_addr, required=True)
    s.add_argument("--envs", type=int, required=True)
    s.add_argument("--config", help="EnvConfig JSON (or a TrainConfig holding one)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--offset", type=int, default=0)
    s.add_argument("--connect-timeout", dest="connect_timeout", type=float, default=30.0)
    s.set_defaults(fn=cmd_replica)

    s = sub.add_parser("distill", help="distill a teacher checkpoint into a student")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student-mode", dest="student_mode", choices=["stereo", "depth", "state"], default="stereo")
    s.add_argument("--cfg", help="DistillConfig JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("eval", help="greedy success rate of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--episodes", type=int, default=200)
    s.add_argument("--adr-fraction", dest="adr_fraction", type=float, default=0.0)
    s.add_argument("--cfg", help="env config; defaults to the one stored in the checkpoint")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("compare", help="depth-teacher vs state-teacher distillation")
    s.add_argument("--depth-teacher", dest="depth_teacher", required=True)
    s.add_argument("--state-teacher", dest="state_teacher", required=True)
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--cfg", help="DistillConfig JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("bench", help="frozen-policy throughput of each layout")
    s.add_argument("--topology", nargs="+", choices=["single", "disagg"], default=["single", "disagg"])
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--envs", type=int, default=256)
    s.add_argument("--replicas", type=int, default=3)
    s.add_argument("--horizon", type=int, default=16)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--config", help="EnvConfig JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("memplan", help="capacity table for both layouts")
    s.add_argument("--devices", type=int, default=4)
    s.add_argument("--horizon", type=int, default=16)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--model", help="MemoryModel JSON overriding the calibrated constants")
    s.add_argument("--json", help="write JSON here instead of printing it")
    s.set_defaults(fn=cmd_memplan)

    s = sub.add_parser("launch", help="start learner and replicas (or dp workers) from a run spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out")
    s.add_argument("--port", type=int)
    s.set_defaults(fn=cmd_launch)

    s = sub.add_parser("proto-dump", help="pretty-print a captured frame stream")
    s.add_argument("file", help="capture file, or - for stdin")
    s.set_defaults(fn=cmd_proto_dump)

    s = sub.add_parser("env-rollout", help="dump one trajectory as JSONL plus PGM depth frames")
    s.add_argument("--config", help="EnvConfig JSON")
    s.add_argument("--steps", type=int, default=40)
    s.add_argument("--policy", choices=["greedy", "random"], default="greedy")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--env-id", dest="env_id", type=int, default=0)
    s.add_argument("--adr-fraction", dest="adr_fraction", type=float, default=0.0)
    s.add_argument("--stop-on-done", dest="stop_on_done", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_env_rollout)
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if a.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stdout,
    )
    return a.fn(a)


if __name__ == "__main__":
    sys.exit(main())
