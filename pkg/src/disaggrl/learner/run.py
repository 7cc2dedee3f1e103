"""Learner process entry points for the three topologies."""

from __future__ import annotations

import errno
import json
import logging
from pathlib import Path

import numpy as np

from .dp import HubComm, PeerComm, PeerFailure
from .sim import LocalSim, RemoteSim, ReplicaFailure, listen
from .trainer import TrainConfig, Trainer

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ADDR_IN_USE = 4
EXIT_PEER_FAILURE = 5


def _listen_or_none(host: str, port: int):
    try:
        sock = listen(host, port)
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            log.error("address %s:%d already in use", host, port)
            return None
        raise
    log.info("listening on %s:%d", host, sock.getsockname()[1])
    return sock


def run_single(cfg: TrainConfig, out=None) -> int:
    sim = LocalSim(cfg.env, np.arange(cfg.num_envs), cfg.seed)
    Trainer(cfg, sim, out).run()
    return EXIT_OK


def run_disagg(cfg: TrainConfig, host: str, port: int, out=None, accept_timeout: float = 120.0) -> int:
    listener = _listen_or_none(host, port)
    if listener is None:
        return EXIT_ADDR_IN_USE
    sim = None
    try:
        sim = RemoteSim.accept(listener, cfg.replicas, cfg.env, timeout=accept_timeout)
        if sim.num_envs != cfg.num_envs:
            log.warning("replicas provide %d envs, config asks for %d", sim.num_envs, cfg.num_envs)
        Trainer(cfg, sim, out).run()
    except ReplicaFailure as exc:
        # no recovery path exists for a lost replica: abort the run
        log.error("aborting: %s", exc)
        return EXIT_PEER_FAILURE
    finally:
        if sim is not None:
            sim.close()
        listener.close()
    return EXIT_OK


def run_dp(cfg: TrainConfig, rank: int, world: int, host: str, port: int, out=None, accept_timeout: float = 120.0) -> int:
    """One data-parallel worker.  Rank 0 listens and averages; the others connect."""
    if cfg.time_budget is not None or cfg.stop_at_fraction is not None:
        raise ValueError("data-parallel runs must stop on an iteration count so every worker stops together")
    listener = None
    if rank == 0:
        listener = _listen_or_none(host, port)
        if listener is None:
            return EXIT_ADDR_IN_USE
    comm = None
    try:
        comm = HubComm(listener, world, accept_timeout) if rank == 0 else PeerComm(host, port, rank, world, cfg.num_envs)
        n = cfg.num_envs
        sim = LocalSim(cfg.env, np.arange(rank * n, (rank + 1) * n), cfg.seed)
        wdir = Path(out) / f"worker{rank}" if out is not None else None
        tr = Trainer(cfg, sim, wdir, comm=comm)
        tr.run()
        if wdir is not None:
            (wdir / "checksums.json").write_text(json.dumps(tr.checksums))
    except (PeerFailure, OSError) as exc:
        log.error("worker %d aborting: %s", rank, exc)
        return EXIT_PEER_FAILURE
    finally:
        if comm is not None:
            comm.close()
        if listener is not None:
            listener.close()
    return EXIT_OK
