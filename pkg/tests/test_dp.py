import threading

import numpy as np
import pytest

from disaggrl.env import EnvConfig
from disaggrl.learner import (
    ExperienceBuffer,
    LocalSim,
    PpoConfig,
    TrainConfig,
    Trainer,
    compute_gae,
    minibatch,
    normalize,
    ppo_loss_and_grads,
)
from disaggrl.learner.dp import HubComm, LocalComm, PeerComm, PeerFailure, mean_of
from disaggrl.learner.sim import listen
from disaggrl.nn import NetConfig, PolicyNet, flatten_grads


def small_cfg(**kw) -> TrainConfig:
    env = EnvConfig(obs_modes=("depth",), width=16, height=16)
    base = dict(
        env=env,
        net=NetConfig.for_obs("depth", 16, 16, conv_filters=[4, 8], mlp_hidden=[16], seed=5),
        ppo=PpoConfig(horizon=8, epochs=2, minibatches=2),
        num_envs=8,
        iters=2,
        seed=3,
        adr=True,
    )
    base.update(kw)
    return TrainConfig(**base)


def run_dp_threads(cfg: TrainConfig, world: int = 2, same_envs: bool = False):
    """Run ``world`` workers as threads; returns their trainers."""
    listener = listen("127.0.0.1", 0)
    port = listener.getsockname()[1]
    trainers: dict[int, Trainer] = {}
    errors = []

    def worker(rank):
        try:
            comm = HubComm(listener, world, 20) if rank == 0 else PeerComm("127.0.0.1", port, rank, world, cfg.num_envs)
            n = cfg.num_envs
            ids = np.arange(n) if same_envs else np.arange(rank * n, (rank + 1) * n)
            tr = Trainer(cfg, LocalSim(cfg.env, ids, cfg.seed), comm=comm)
            trainers[rank] = tr
            while not tr.done():
                tr.step()
            comm.close()
        except Exception as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(r,), daemon=True) for r in range(world)]
    for th in threads:
        th.start()
    for th in threads:
        th.join(120)
    listener.close()
    if errors:
        raise errors[0]
    return [trainers[r] for r in range(world)]


def test_mean_of_is_rank_ordered_f64_sum():
    vs = [np.array([1e8, 1.0], np.float32), np.array([-1e8, 1.0], np.float32), np.array([0.0, 1.0], np.float32)]
    np.testing.assert_array_equal(mean_of(vs), np.array([0.0, 1.0], np.float32))


def test_world_one_is_identity():
    cfg = small_cfg()
    a = Trainer(cfg, LocalSim(cfg.env, np.arange(8), cfg.seed))
    b = Trainer(cfg, LocalSim(cfg.env, np.arange(8), cfg.seed), comm=LocalComm())
    for _ in range(2):
        a.step(), b.step()
    assert a.checksums == b.checksums
    np.testing.assert_array_equal(a.net.get_flat(), b.net.get_flat())


def test_two_workers_stay_bit_identical():
    tr = run_dp_threads(small_cfg())
    assert len(tr[0].checksums) == 2 * 2 * 2
    assert tr[0].checksums == tr[1].checksums
    np.testing.assert_array_equal(tr[0].net.get_flat(), tr[1].net.get_flat())


def test_equal_gradients_average_to_themselves():
    listener = listen("127.0.0.1", 0)
    port = listener.getsockname()[1]
    g = np.random.default_rng(0).standard_normal(257).astype(np.float32)
    out = {}

    def hub():
        h = HubComm(listener, 2, 10)
        out["hub"] = h.average(7, g)
        h.close()

    th = threading.Thread(target=hub, daemon=True)
    th.start()
    peer = PeerComm("127.0.0.1", port, 1, 2, 4)
    got = peer.average(7, g.copy())
    peer.close()
    th.join(10)
    listener.close()
    np.testing.assert_array_equal(got, g)
    np.testing.assert_array_equal(out["hub"], g)


def _random_buffer(net: PolicyNet, H: int, N: int, rng) -> ExperienceBuffer:
    c = net.cfg
    main_shape = (c.image_channels, *c.image_hw) if c.image_channels else (c.vector_dim,)
    buf = ExperienceBuffer.allocate(H, N, main_shape, c.proprio_dim, c.action_dim, net.hidden_size)
    buf.main[...] = rng.random(buf.main.shape)
    buf.proprio[...] = rng.standard_normal(buf.proprio.shape)
    buf.actions[...] = rng.standard_normal(buf.actions.shape)
    buf.values[...] = rng.standard_normal(buf.values.shape)
    buf.rewards[...] = rng.standard_normal(buf.rewards.shape)
    buf.dones[...] = rng.random((H, N)) < 0.1
    buf.bootstrap_values[...] = rng.standard_normal(N)
    mean, log_std, *_ = net.forward(buf.main.reshape(H * N, *main_shape), buf.proprio.reshape(H * N, -1))
    a = buf.actions.reshape(H * N, -1).astype(np.float64)
    var = np.exp(2 * log_std.astype(np.float64))
    logp = (-0.5 * ((a - mean) ** 2 / var + 2 * log_std + np.log(2 * np.pi))).sum(axis=1)
    buf.log_probs[...] = (logp + 0.1 * rng.standard_normal(H * N)).reshape(H, N)
    return buf


def shard_gradient_gap(net: PolicyNet, buf: ExperienceBuffer, world: int, cfg: PpoConfig) -> float:
    """Max |mean of per-shard gradients - union gradient| for equal disjoint env shards."""
    adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap_values, cfg.gamma, cfg.lam)
    adv = normalize(adv)
    union, _ = ppo_loss_and_grads(net, minibatch(buf, adv, ret, np.arange(buf.num_envs)), cfg)
    shards = np.array_split(np.arange(buf.num_envs), world)
    parts = [flatten_grads(ppo_loss_and_grads(net, minibatch(buf, adv, ret, s), cfg)[0]) for s in shards]
    return float(np.abs(mean_of(parts).astype(np.float64) - flatten_grads(union)).max())


@pytest.mark.parametrize("world", [2, 4])
def test_disjoint_shard_average_equals_union_gradient(world):
    rng = np.random.default_rng(world)
    net = PolicyNet(NetConfig.for_obs("depth", 16, 16, conv_filters=[4, 8], mlp_hidden=[16], seed=1))
    buf = _random_buffer(net, 8, 16, rng)
    assert shard_gradient_gap(net, buf, world, PpoConfig()) < 1e-6


def test_hub_detects_lost_peer():
    listener = listen("127.0.0.1", 0)
    port = listener.getsockname()[1]
    out = {}

    def hub():
        try:
            h = HubComm(listener, 2, 10)
            h.average(0, np.zeros(3, np.float32))
        except PeerFailure as exc:
            out["err"] = exc

    th = threading.Thread(target=hub, daemon=True)
    th.start()
    peer = PeerComm("127.0.0.1", port, 1, 2, 4)
    peer.sock.close()
    th.join(10)
    listener.close()
    assert isinstance(out.get("err"), PeerFailure)


def test_dp_rejects_time_budget():
    from disaggrl.learner.run import run_dp

    with pytest.raises(ValueError):
        run_dp(small_cfg(time_budget=10.0), 0, 2, "127.0.0.1", 0)
