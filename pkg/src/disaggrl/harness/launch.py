"""Process launcher: learner first, then replicas (or dp workers), with supervision.

Child output is multiplexed onto our stdout with a ``[role]`` prefix and also
kept in ``<out>/logs/<role>.log``.  If any child exits nonzero (or is killed)
every other child is terminated and the launch fails.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..learner.run import EXIT_ADDR_IN_USE
from ..learner.trainer import TrainConfig

log = logging.getLogger(__name__)

EXIT_LAUNCH_FAILED = 1


def child_env() -> dict:
    env = dict(os.environ)
    # deterministic, contention-free BLAS in every child
    env.setdefault("OPENBLAS_NUM_THREADS", "1")
    env.setdefault("OMP_NUM_THREADS", "1")
    env["PYTHONUNBUFFERED"] = "1"
    return env


class Child:
    def __init__(self, role: str, argv: list[str], log_dir: Path | None = None, echo=True):
        self.role = role
        self.argv = argv
        self.listening = threading.Event()
        self.lines: list[str] = []
        self.proc = subprocess.Popen(
            argv, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, env=child_env(), start_new_session=True
        )
        self._log = (log_dir / f"{role}.log").open("w") if log_dir is not None else None
        self._echo = echo
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        for line in self.proc.stdout:
            line = line.rstrip("\n")
            self.lines.append(line)
            if "listening on" in line:
                self.listening.set()
            if self._echo:
                print(f"[{self.role}] {line}", flush=True)
            if self._log is not None:
                self._log.write(line + "\n")
                self._log.flush()

    def poll(self) -> int | None:
        return self.proc.poll()

    def terminate(self, grace: float = 5.0) -> None:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(grace)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def finish(self) -> None:
        self._reader.join(timeout=5.0)
        if self._log is not None:
            self._log.close()


def cli_argv(*args) -> list[str]:
    return [sys.executable, "-m", "disaggrl", *map(str, args)]


@dataclass
class RunSpec:
    mode: str = "disagg"  # disagg | dp
    train: dict = field(default_factory=dict)
    out: str = "runs/latest"
    host: str = "127.0.0.1"
    port: int = 29500
    workers: int = 2  # dp world size
    port_retries: int = 10
    start_timeout: float = 60.0

    @classmethod
    def load(cls, path) -> "RunSpec":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class LaunchResult:
    code: int
    port: int
    exit_codes: dict[str, int]
    attempts: list[dict]


def _spawn(spec: RunSpec, cfg: TrainConfig, cfg_path: Path, port: int, log_dir: Path, echo: bool) -> list[Child]:
    addr = f"{spec.host}:{port}"
    out = Path(spec.out)
    if spec.mode == "disagg":
        first = Child("learner", cli_argv("learner", "--listen", addr, "--replicas", cfg.replicas, "--cfg", cfg_path,
                                          "--mode", "disagg", "--seed", cfg.seed, "--iters", cfg.iters, "--out", out),
                      log_dir, echo)
    else:
        first = Child("worker0", cli_argv("learner", "--listen", addr, "--replicas", spec.workers, "--cfg", cfg_path,
                                          "--mode", "dp", "--rank", 0, "--seed", cfg.seed, "--iters", cfg.iters,
                                          "--out", out), log_dir, echo)
    children = [first]
    deadline = time.monotonic() + spec.start_timeout
    while not first.listening.wait(0.05):
        if first.poll() is not None or time.monotonic() > deadline:
            return children
    if spec.mode == "disagg":
        offset = 0
        for rid, n in enumerate(cfg.shard_sizes()):
            children.append(Child(f"replica{rid}", cli_argv("replica", "--id", rid, "--connect", addr, "--envs", n,
                                                            "--config", cfg_path, "--seed", cfg.seed, "--offset", offset),
                                  log_dir, echo))
            offset += n
    else:
        for rank in range(1, spec.workers):
            children.append(Child(f"worker{rank}", cli_argv("learner", "--connect", addr, "--replicas", spec.workers,
                                                            "--cfg", cfg_path, "--mode", "dp", "--rank", rank,
                                                            "--seed", cfg.seed, "--iters", cfg.iters, "--out", out),
                                  log_dir, echo))
    return children


def supervise(children: list[Child], poll: float = 0.1, drain: float = 30.0) -> dict[str, int]:
    """Wait for all children; on the first failure terminate the rest."""
    failed = False
    while True:
        codes = {c.role: c.poll() for c in children}
        if any(code not in (None, 0) for code in codes.values()):
            failed = True
            break
        if all(code is not None for code in codes.values()):
            break
        if codes[children[0].role] == 0:
            # learner finished cleanly; give the others a moment to see Shutdown
            end = time.monotonic() + drain
            while time.monotonic() < end and any(c.poll() is None for c in children):
                time.sleep(poll)
            break
        time.sleep(poll)
    for c in children:
        c.terminate()
        c.finish()
    codes = {c.role: c.proc.returncode for c in children}
    if failed:
        bad = {r: c for r, c in codes.items() if c not in (None, 0)}
        log.error("child failure %s; terminated the rest", bad)
    return codes


def launch(spec: RunSpec, echo: bool = True) -> LaunchResult:
    out = Path(spec.out)
    log_dir = out / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig.from_dict(spec.train)
    if spec.mode not in ("disagg", "dp"):
        raise ValueError(f"unknown mode {spec.mode!r}")
    cfg_path = out / "train.json"
    cfg_path.write_text(json.dumps(cfg.to_dict(), indent=2))
    attempts = []
    port = spec.port
    for _ in range(spec.port_retries + 1):
        children = _spawn(spec, cfg, cfg_path, port, log_dir, echo)
        first = children[0]
        if len(children) == 1:
            # the first process never started listening
            first.terminate()
            first.finish()
            if first.proc.returncode == EXIT_ADDR_IN_USE:
                attempts.append({"port": port, "result": "address in use"})
                log.warning("port %d in use, retrying on %d", port, port + 1)
                port += 1
                continue
            attempts.append({"port": port, "result": {first.role: first.proc.returncode}})
            break
        codes = supervise(children)
        attempts.append({"port": port, "result": codes})
        code = 0 if all(c == 0 for c in codes.values()) else EXIT_LAUNCH_FAILED
        (out / "launch.json").write_text(json.dumps({"port": port, "attempts": attempts, "exit_codes": codes}, indent=2))
        return LaunchResult(code, port, codes, attempts)
    (out / "launch.json").write_text(json.dumps({"attempts": attempts}, indent=2))
    return LaunchResult(EXIT_LAUNCH_FAILED, port, {}, attempts)
