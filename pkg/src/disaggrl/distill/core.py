"""On-policy teacher -> student distillation with annealed teacher mixing.

Each iteration rolls the mixed policy for a few steps: every env executes the
teacher's mean action with probability beta and the student's otherwise.  At
every visited state we store the student's observation, the teacher's mean
action and the object position.  The student regresses onto the aggregated
data with

    L = mean ||mu_student - mu_teacher||^2 + aux_weight * mean ||aux - object_xy||^2

Only action means are supervised.  The teacher never receives gradients.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..env import OBS_MODES, EnvConfig, VecEnv
from ..evaluation import evaluate_net
from ..nn import AdamState, NetConfig, PolicyNet, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class DistillConfig:
    student_mode: str = "stereo"
    env: EnvConfig = field(default_factory=EnvConfig)
    student_net: NetConfig | None = None
    num_envs: int = 64
    iterations: int = 40
    rollout_steps: int = 16
    epochs: int = 2
    batch_size: int = 256
    max_samples: int = 50_000
    lr: float = 1e-3
    max_grad_norm: float = 1.0
    aux_weight: float = 0.1
    anneal_frac: float = 0.5  # beta goes 1 -> 0 linearly over this share of iterations
    beta: float | None = None  # fixed beta overrides the schedule
    adr_fraction: float = 0.0
    init_from_teacher: bool = False
    eval_every: int = 10
    eval_episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        if isinstance(self.student_net, dict):
            self.student_net = NetConfig.from_dict(self.student_net)
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.student_mode not in ("depth", "stereo", "state"):
            raise ConfigError(f"unknown student mode {self.student_mode!r}")

    def beta_at(self, it: int) -> float:
        if self.beta is not None:
            return self.beta
        span = max(1.0, self.anneal_frac * self.iterations)
        return float(max(0.0, 1.0 - it / span))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env"] = self.env.to_dict()
        d["student_net"] = self.student_net.to_dict() if self.student_net else None
        return d


def student_config(teacher: PolicyNet, cfg: DistillConfig) -> NetConfig:
    """Same trunk and heads as the teacher, encoder input swapped for the student's modality."""
    if cfg.student_net is not None:
        sc = cfg.student_net
    else:
        t = teacher.cfg.to_dict()
        for k in ("obs_key", "image_channels", "image_hw", "vector_dim"):
            t.pop(k)
        t["seed"] = cfg.seed
        sc = NetConfig.for_obs(cfg.student_mode, cfg.env.width, cfg.env.height, **t)
    if sc.obs_key != cfg.student_mode:
        raise ConfigError(f"student network reads {sc.obs_key!r}, student mode is {cfg.student_mode!r}")
    if sc.recurrent:
        raise ConfigError("recurrent students are not supported; use an mlp trunk")
    return sc


@dataclass
class DistillResult:
    student: PolicyNet
    metrics: list[dict]
    states: list[np.ndarray]  # per-iteration (gripper, object) samples, for distribution checks

    @property
    def final_sr(self) -> float | None:
        evals = [m["eval_sr"] for m in self.metrics if "eval_sr" in m]
        return evals[-1] if evals else None


class _Dataset:
    def __init__(self, cap: int):
        self.cap = cap
        self.parts: dict[str, list[np.ndarray]] = {"main": [], "proprio": [], "target": [], "obj": []}

    def add(self, **arrays) -> None:
        for k, v in arrays.items():
            self.parts[k].append(np.array(v, np.float32))
        while sum(len(a) for a in self.parts["main"]) > self.cap:
            for k in self.parts:
                self.parts[k].pop(0)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.concatenate(v) for k, v in self.parts.items()}


def distill_loss_and_grads(student: PolicyNet, main, proprio, target, obj, aux_weight: float):
    B = len(main)
    mean, _, value, aux, _ = student.forward(main, proprio, keep_cache=True)
    d = mean - target
    action_mse = float((d * d).sum(axis=1).mean())
    loss = action_mse
    d_aux = None
    if aux is not None and aux_weight:
        e = aux - obj
        loss += aux_weight * float((e * e).sum(axis=1).mean())
        d_aux = (2.0 * aux_weight / B) * e
    grads = student.backward(
        ((2.0 / B) * d).astype(np.float32),
        np.zeros(student.cfg.action_dim, np.float32),
        np.zeros(B, np.float32),
        None if d_aux is None else d_aux.astype(np.float32),
    )
    return loss, action_mse, grads


def _mean_action(net: PolicyNet, obs, hidden):
    main, proprio = net.inputs_from_obs(obs)
    mean, _, _, _, hidden_out = net.forward(main, proprio, hidden if net.cfg.recurrent else None)
    return mean.astype(np.float32), hidden_out


def distill(teacher: PolicyNet, cfg: DistillConfig, out_dir=None, student: PolicyNet | None = None) -> DistillResult:
    if teacher.cfg.obs_key not in OBS_MODES:
        raise ConfigError(f"teacher reads unknown observation {teacher.cfg.obs_key!r}")
    sc = student_config(teacher, cfg)
    if student is None:
        student = PolicyNet(sc)
        if cfg.init_from_teacher:
            if sc.to_dict() | {"seed": 0} != teacher.cfg.to_dict() | {"seed": 0}:
                raise ConfigError("init_from_teacher needs an identical student architecture and modality")
            student.set_flat(teacher.get_flat())
    elif student.cfg.obs_key != cfg.student_mode:
        raise ConfigError(f"student checkpoint reads {student.cfg.obs_key!r}, student mode is {cfg.student_mode!r}")

    modes = tuple(dict.fromkeys([cfg.student_mode, teacher.cfg.obs_key]))
    env_cfg = EnvConfig.from_dict({**cfg.env.to_dict(), "obs_modes": list(modes)})
    adr = env_cfg.make_adr()
    adr.set_fraction(cfg.adr_fraction)
    env = VecEnv(env_cfg, np.arange(cfg.num_envs), cfg.seed, adr)
    obs = env.reset()
    t_hidden = teacher.initial_hidden(cfg.num_envs)
    rng = np.random.default_rng([cfg.seed, 17])
    adam = AdamState(lr=cfg.lr)
    data = _Dataset(cfg.max_samples)
    out = Path(out_dir) if out_dir is not None else None
    metrics, states = [], []
    mpath = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mpath = out / "metrics.jsonl"
        mpath.write_text("")
    t_start = time.perf_counter()

    for it in range(cfg.iterations):
        beta = cfg.beta_at(it)
        sq_err = []
        for _ in range(cfg.rollout_steps):
            t_act, t_hidden = _mean_action(teacher, obs, t_hidden)
            s_act, _ = _mean_action(student, obs, None)
            main, proprio = student.inputs_from_obs(obs)
            data.add(main=main, proprio=proprio, target=t_act, obj=env.obj)
            states.append(np.concatenate([env.gripper, env.obj], axis=1))
            sq_err.append(((s_act - t_act) ** 2).sum(axis=1))
            use_teacher = rng.random(cfg.num_envs) < beta
            action = np.where(use_teacher[:, None], t_act, s_act)
            _, done, _, obs = env.step(action)
            if teacher.cfg.recurrent:
                t_hidden = t_hidden * (~done)[:, None]
        rollout_mse = float(np.mean(sq_err))

        ds = data.arrays()
        n = len(ds["main"])
        losses = []
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo : lo + cfg.batch_size]
                loss, _, grads = distill_loss_and_grads(
                    student, ds["main"][idx], ds["proprio"][idx], ds["target"][idx], ds["obj"][idx], cfg.aux_weight
                )
                clip_grad_norm(grads, cfg.max_grad_norm)
                adam_step(student.params, grads, adam)
                losses.append(loss)
        rec = {
            "iter": it + 1,
            "beta": beta,
            "action_mse": rollout_mse,
            "train_loss": float(np.mean(losses)) if losses else 0.0,
            "samples": n,
            "wall_sec": time.perf_counter() - t_start,
        }
        if cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations):
            ev = evaluate_net(student, cfg.env, cfg.eval_episodes, cfg.adr_fraction, seed=cfg.seed + 7919)
            rec["eval_sr"] = ev.sr
            rec["eval_ci95"] = [ev.low, ev.high]
        metrics.append(rec)
        log.info("distill iter %d beta %.2f mse %.4f %s", rec["iter"], beta, rollout_mse,
                 f"sr {rec['eval_sr']:.2f}" if "eval_sr" in rec else "")
        if mpath is not None:
            with mpath.open("a") as fp:
                fp.write(json.dumps(rec) + "\n")
    if out is not None:
        save_checkpoint(student, out / "student.ckpt", {"distill": cfg.to_dict()})
        (out / "report.json").write_text(json.dumps({"final": metrics[-1] if metrics else None}, indent=2))
    return DistillResult(student, metrics, states)


def load_teacher(path, expect_mode: str | None = None) -> PolicyNet:
    net, _ = load_checkpoint(path)
    if expect_mode is not None and net.cfg.obs_key != expect_mode:
        raise ConfigError(f"{path} holds a {net.cfg.obs_key!r} policy, expected {expect_mode!r}")
    return net
