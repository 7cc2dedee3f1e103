"""Simulation backends seen by the learner: in-process or remote replicas."""

from __future__ import annotations

import logging
import socket
import time

import numpy as np

from .. import proto
from ..env import EnvConfig, VecEnv
from ..replica import obs_spec_for

log = logging.getLogger(__name__)


class ReplicaFailure(RuntimeError):
    """A replica vanished or misbehaved; the current iteration cannot finish."""


class LocalSim:
    """All envs in the learner process (single-process and data-parallel modes)."""

    def __init__(self, cfg: EnvConfig, env_ids, seed: int):
        self.env = VecEnv(cfg, env_ids, seed, cfg.make_adr())
        self.timings = {"send": 0.0, "recv": 0.0}

    @property
    def num_envs(self) -> int:
        return self.env.num_envs

    def initial_obs(self) -> dict[str, np.ndarray]:
        return self.env.reset()

    def step(self, actions):
        return self.env.step(actions)

    def set_adr(self, fractions) -> None:
        # same f32 rounding as an AdrUpdate frame, so local and remote runs agree
        self.env.set_adr_fractions(np.asarray(fractions, dtype=np.float32))

    def close(self) -> None:
        pass


class RemoteSim:
    """Replica sessions in offset order; scatter actions, gather step results.

    All Actions frames go out before any StepResult is read, so replicas step
    concurrently; the gather completes the per-timestep barrier.
    """

    def __init__(self, sessions: list[proto.Session], hellos: list[proto.Hello], initial: list[dict]):
        self.sessions = sessions
        self.hellos = hellos
        self._initial = initial
        self.sizes = [h.num_envs for h in hellos]
        self.offsets = np.cumsum([0] + self.sizes)
        self.timings = {"send": 0.0, "recv": 0.0}

    @property
    def num_envs(self) -> int:
        return int(self.offsets[-1])

    @classmethod
    def accept(
        cls,
        listener: socket.socket,
        num_replicas: int,
        expect: EnvConfig | None = None,
        timeout: float = 120.0,
        recv_timeout: float | None = 600.0,
    ) -> "RemoteSim":
        listener.settimeout(timeout)
        pending = []
        try:
            for _ in range(num_replicas):
                conn, addr = listener.accept()
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn.settimeout(recv_timeout)
                sess = proto.Session(conn)
                hello = sess.recv()
                log.info("replica %d connected from %s with %d envs", hello.replica_id, addr, hello.num_envs)
                pending.append((hello, sess))
        except socket.timeout as exc:
            for _, s in pending:
                s.close()
            raise ReplicaFailure(f"only {len(pending)} of {num_replicas} replicas connected") from exc
        pending.sort(key=lambda p: p[0].replica_id)
        ids = [h.replica_id for h, _ in pending]
        if ids != list(range(num_replicas)):
            raise ReplicaFailure(f"replica ids must be 0..{num_replicas - 1}, got {ids}")
        if expect is not None:
            want = obs_spec_for(expect)
            for h, _ in pending:
                if h.obs_spec != want:
                    raise ReplicaFailure(f"replica {h.replica_id} obs spec {h.obs_spec} != {want}")
        initial = []
        for h, s in pending:
            msg = s.recv()
            initial.append(msg.obs)
        return cls([s for _, s in pending], [h for h, _ in pending], initial)

    def initial_obs(self) -> dict[str, np.ndarray]:
        return _concat(self._initial)

    def step(self, actions):
        t0 = time.perf_counter()
        try:
            for sess, lo, hi in zip(self.sessions, self.offsets[:-1], self.offsets[1:]):
                sess.send(proto.Actions(np.ascontiguousarray(actions[lo:hi], dtype=np.float32)))
            t1 = time.perf_counter()
            results = [sess.recv() for sess in self.sessions]
        except (OSError, proto.ProtocolError) as exc:
            raise ReplicaFailure(f"replica failed mid-rollout: {exc}") from exc
        t2 = time.perf_counter()
        self.timings["send"] += t1 - t0
        self.timings["recv"] += t2 - t1
        rewards = np.concatenate([r.rewards for r in results])
        dones = np.concatenate([r.dones for r in results]).astype(bool)
        successes = np.concatenate([r.successes for r in results]).astype(bool)
        return rewards, dones, successes, _concat([r.obs for r in results])

    def set_adr(self, fractions) -> None:
        msg = proto.AdrUpdate(np.asarray(fractions, dtype=np.float32))
        for sess in self.sessions:
            sess.send(msg)

    def close(self) -> None:
        for sess in self.sessions:
            try:
                if sess.state is not proto.ProtocolState.CLOSED:
                    sess.send(proto.Shutdown())
            except OSError:
                pass
            sess.close()


def _concat(parts: list[dict]) -> dict[str, np.ndarray]:
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def listen(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen()
    return sock
