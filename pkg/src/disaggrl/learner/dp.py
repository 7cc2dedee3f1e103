"""Data-parallel baseline: every worker simulates and trains; worker 0 averages gradients.

Peers send ``Grads`` for each minibatch step to the hub, the hub sums all
workers' vectors in rank order, divides by W and broadcasts ``AvgGrads``.
Every worker, the hub included, applies the broadcast vector, so weights stay
bit-identical.
"""

from __future__ import annotations

import logging
import socket

import numpy as np

from .. import proto
from ..replica import connect

log = logging.getLogger(__name__)


class PeerFailure(RuntimeError):
    pass


def mean_of(vectors: list[np.ndarray]) -> np.ndarray:
    total = np.zeros(vectors[0].shape, np.float64)
    for v in vectors:
        total += v
    return (total / len(vectors)).astype(np.float32)


class LocalComm:
    """W=1: averaging is the identity."""

    rank = 0
    world = 1

    def average(self, step_id: int, flat: np.ndarray) -> np.ndarray:
        return flat

    def close(self) -> None:
        pass


def _expect(sock: socket.socket, kind: type, step_id: int | None = None):
    try:
        msg = proto.recv_message(sock)
    except (OSError, proto.ProtocolError) as exc:
        raise PeerFailure(f"peer lost: {exc}") from exc
    if not isinstance(msg, kind):
        raise PeerFailure(f"expected {kind.__name__}, got {type(msg).__name__}")
    if step_id is not None and msg.step_id != step_id:
        raise PeerFailure(f"gradient step {msg.step_id} arrived while at step {step_id}")
    return msg


class HubComm:
    rank = 0

    def __init__(self, listener: socket.socket, world: int, timeout: float = 120.0):
        self.world = world
        self.peers: list[socket.socket] = [None] * (world - 1)
        listener.settimeout(timeout)
        for _ in range(world - 1):
            try:
                conn, _ = listener.accept()
            except socket.timeout as exc:
                raise PeerFailure("not all data-parallel workers connected") from exc
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = _expect(conn, proto.Hello)
            if not 1 <= hello.replica_id < world or self.peers[hello.replica_id - 1] is not None:
                raise PeerFailure(f"bad worker rank {hello.replica_id}")
            self.peers[hello.replica_id - 1] = conn

    def average(self, step_id: int, flat: np.ndarray) -> np.ndarray:
        vectors = [flat] + [_expect(p, proto.Grads, step_id).flat for p in self.peers]
        if any(v.shape != flat.shape for v in vectors):
            raise PeerFailure("gradient vectors differ in length")
        avg = mean_of(vectors)
        msg = proto.AvgGrads(step_id, avg)
        for p in self.peers:
            proto.send_message(p, msg)
        return avg

    def close(self) -> None:
        for p in self.peers:
            try:
                proto.send_message(p, proto.Shutdown())
                p.close()
            except OSError:
                pass


class PeerComm:
    def __init__(self, host: str, port: int, rank: int, world: int, num_envs: int, timeout: float = 30.0):
        self.rank, self.world = rank, world
        self.sock = connect(host, port, timeout)
        proto.send_message(self.sock, proto.Hello(rank, num_envs, []))

    def average(self, step_id: int, flat: np.ndarray) -> np.ndarray:
        try:
            proto.send_message(self.sock, proto.Grads(step_id, flat))
        except OSError as exc:
            raise PeerFailure(f"hub lost: {exc}") from exc
        return _expect(self.sock, proto.AvgGrads, step_id).flat.copy()

    def close(self) -> None:
        try:
            self.sock.settimeout(5.0)
            _expect(self.sock, proto.Shutdown)
        except PeerFailure:
            pass
        self.sock.close()
