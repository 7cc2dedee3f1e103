"""Simulation replica: a shard of envs driven by the learner over one socket.

Connect, announce with Hello, send the initial observations, then answer each
Actions frame with exactly one StepResult until Shutdown.  AdrUpdate frames may
arrive between steps and take effect at the next episode reset.
"""

from __future__ import annotations

import logging
import socket
import time
from dataclasses import dataclass, field

import numpy as np

from . import proto
from .env import EnvConfig, ShapeError, VecEnv, vector_step

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PROTOCOL = 2
EXIT_CONNECTION = 3


@dataclass
class ReplicaConfig:
    replica_id: int
    host: str
    port: int
    num_envs: int
    env: EnvConfig = field(default_factory=EnvConfig)
    seed: int = 0
    offset: int = 0
    connect_timeout: float = 30.0

    def __post_init__(self):
        if self.num_envs < 1:
            raise ValueError("a replica needs at least one env")
        if self.replica_id < 0 or self.offset < 0:
            raise ValueError("replica id and env offset must be non-negative")

    def env_ids(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.num_envs, dtype=np.uint64)


def obs_spec_for(cfg: EnvConfig) -> list[proto.ObsSpec]:
    return [proto.ObsSpec(name, tuple(dims), 0) for name, dims in cfg.obs_shapes().items()]


def step_once(env: VecEnv, actions) -> proto.StepResult:
    rewards, dones, successes, obs = vector_step(env, actions)
    return proto.StepResult(rewards, dones.astype(np.uint8), obs, successes.astype(np.uint8))


def serve(sess: proto.Session, env: VecEnv, replica_id: int) -> int:
    """Run the replica side of the protocol on an open session; returns steps taken."""
    sess.send(proto.Hello(replica_id, env.num_envs, obs_spec_for(env.cfg)))
    sess.send(proto.InitialObs(env.reset()))
    steps = 0
    while True:
        msg = sess.recv()
        if isinstance(msg, proto.Shutdown):
            return steps
        if isinstance(msg, proto.AdrUpdate):
            try:
                env.set_adr_fractions(msg.fractions)
            except ValueError as exc:
                raise proto.ProtocolError(f"bad AdrUpdate: {exc}") from exc
            continue
        try:
            result = step_once(env, msg.actions)
        except ShapeError as exc:
            raise proto.ProtocolError(f"bad Actions frame: {exc}") from exc
        sess.send(result)
        steps += 1


def connect(host: str, port: int, timeout: float) -> socket.socket:
    """Connect, retrying while the learner is still coming up."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.1)


def run_replica(cfg: ReplicaConfig) -> int:
    env = VecEnv(cfg.env, cfg.env_ids(), cfg.seed, cfg.env.make_adr())
    try:
        sock = connect(cfg.host, cfg.port, cfg.connect_timeout)
    except OSError as exc:
        log.error("replica %d: cannot reach learner at %s:%d: %s", cfg.replica_id, cfg.host, cfg.port, exc)
        return EXIT_CONNECTION
    sess = proto.Session(sock)
    try:
        steps = serve(sess, env, cfg.replica_id)
    except proto.ProtocolError as exc:
        log.error("replica %d: protocol error: %s", cfg.replica_id, exc)
        return EXIT_PROTOCOL
    except OSError as exc:
        log.error("replica %d: connection lost: %s", cfg.replica_id, exc)
        return EXIT_CONNECTION
    finally:
        sess.close()
    log.info("replica %d: shutdown after %d steps, %d resets", cfg.replica_id, steps, env.resets_sampled)
    return EXIT_OK
