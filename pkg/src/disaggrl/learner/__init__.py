"""Learner process: experience buffer, GAE/PPO, ADR control, data-parallel baseline."""

from .buffer import ExperienceBuffer, RolloutState, collect_rollout, policy_act
from .dp import HubComm, LocalComm, PeerComm, PeerFailure, mean_of
from .gae import compute_gae, normalize
from .ppo import PpoConfig, PpoError, minibatch, ppo_loss_and_grads, ppo_update
from .sim import LocalSim, RemoteSim, ReplicaFailure, listen
from .trainer import MetricsWriter, TrainConfig, Trainer, param_checksum, read_metrics

__all__ = [
    "ExperienceBuffer",
    "HubComm",
    "LocalComm",
    "LocalSim",
    "MetricsWriter",
    "PeerComm",
    "PeerFailure",
    "PpoConfig",
    "PpoError",
    "RemoteSim",
    "ReplicaFailure",
    "RolloutState",
    "TrainConfig",
    "Trainer",
    "collect_rollout",
    "compute_gae",
    "listen",
    "mean_of",
    "minibatch",
    "normalize",
    "param_checksum",
    "policy_act",
    "ppo_loss_and_grads",
    "ppo_update",
    "read_metrics",
]
