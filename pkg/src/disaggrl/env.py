"""Vectorized 2D reach-grasp-lift environment with depth/stereo rendering and ADR.

A gripper disc starts above an object disc.  The policy moves the gripper in
the plane, closes the grip near the object, and must lift it above y = 0.8.
All per-env randomness comes from :mod:`disaggrl.rng`, keyed by the global env
index and episode counter, so any partition of envs across processes yields
bit-identical per-env trajectories.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import rng

GRIPPER_START = (0.5, 0.9)
OBJECT_Y0 = 0.1
LIFT_HEIGHT = 0.8
ACTION_DIM = 3
PROPRIO_DIM = 7
STATE_DIM = 5
NOISE_DRAW_BASE = 64
OBS_MODES = ("depth", "stereo", "state")


class ShapeError(ValueError):
    pass


@dataclass
class AdrParam:
    name: str
    initial: tuple[float, float]
    terminal: tuple[float, float]
    fraction: float = 0.0

    def __post_init__(self):
        self.initial = tuple(float(v) for v in self.initial)
        self.terminal = tuple(float(v) for v in self.terminal)
        (lo0, hi0), (lot, hit) = self.initial, self.terminal
        if not (lot <= lo0 <= hi0 <= hit):
            raise ValueError(f"{self.name}: initial range must sit inside terminal range")

    def current_range(self, fraction: float | None = None) -> tuple[float, float]:
        f = self.fraction if fraction is None else fraction
        (lo0, hi0), (lot, hit) = self.initial, self.terminal
        return lo0 + f * (lot - lo0), hi0 + f * (hit - hi0)


def default_adr_params() -> list[AdrParam]:
    return [
        AdrParam("object_spawn_halfwidth", (0.05, 0.05), (0.05, 0.45)),
        AdrParam("action_noise_sigma", (0.0, 0.0), (0.0, 0.05)),
        AdrParam("grasp_radius", (0.08, 0.08), (0.04, 0.10)),
        AdrParam("step_scale", (0.05, 0.05), (0.03, 0.07)),
    ]


class AdrState:
    """Threshold-gated curriculum with one global fraction shared by all params."""

    def __init__(
        self,
        params: list[AdrParam] | None = None,
        window: int = 512,
        threshold: float = 0.4,
        step_size: float = 0.05,
    ):
        self.params = params if params is not None else default_adr_params()
        self.window = deque(maxlen=window)
        self.threshold = threshold
        self.step_size = step_size
        self._hits = 0

    @property
    def fraction(self) -> float:
        return self.params[0].fraction if self.params else 0.0

    def fractions(self) -> np.ndarray:
        return np.array([p.fraction for p in self.params], dtype=np.float32)

    def set_fraction(self, f: float) -> None:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"ADR fraction {f} outside [0, 1]")
        for p in self.params:
            p.fraction = f

    def copy(self) -> "AdrState":
        out = AdrState([replace(p) for p in self.params], self.window.maxlen, self.threshold, self.step_size)
        out.window.extend(self.window)
        out._hits = self._hits
        return out

    def pct_terminal(self) -> float:
        return float(np.mean([p.fraction >= 1.0 for p in self.params])) if self.params else 0.0


def adr_update(adr: AdrState, episode_results) -> AdrState:
    """Push per-episode success flags; widen ranges when a full window clears the threshold.

    Mutates and returns ``adr``.  The fraction never decreases.
    """
    cap = adr.window.maxlen
    for ok in episode_results:
        ok = bool(ok)
        if len(adr.window) == cap:
            adr._hits -= adr.window[0]
        adr.window.append(ok)
        adr._hits += ok
        if len(adr.window) == cap and adr._hits >= adr.threshold * cap:
            f = min(1.0, round(adr.fraction + adr.step_size, 12))
            adr.set_fraction(max(f, adr.fraction))
            adr.window.clear()
            adr._hits = 0
    return adr


@dataclass
class RewardCoefs:
    distance: float = 0.1
    grasp: float = 0.25
    lift: float = 0.5
    success: float = 5.0
    # Pay the grasp bonus only for the first grasp of an episode.  Paying every
    # grasp makes grasp/release cycling worth more than lifting.
    grasp_once: bool = True
    # "height" pays lift*y every grasped step, which makes hovering just under
    # the success height worth more than succeeding; "progress" pays lift*dy
    # for grasped motion, which telescopes to at most lift*(0.8 - 0.1).
    lift_mode: str = "progress"

    def __post_init__(self):
        if self.lift_mode not in ("height", "progress"):
            raise ValueError(f"unknown lift_mode {self.lift_mode!r}")


@dataclass
class EnvConfig:
    obs_modes: tuple[str, ...] = ("depth",)
    width: int = 32
    height: int = 32
    t_max: int = 100
    stereo_baseline: float = 0.05
    gripper_radius: float = 0.03
    object_radius: float = 0.04
    reward: RewardCoefs = field(default_factory=RewardCoefs)
    adr: list[dict] | None = None
    adr_window: int = 512
    adr_threshold: float = 0.4
    adr_step: float = 0.05

    def __post_init__(self):
        if isinstance(self.obs_modes, str):
            self.obs_modes = (self.obs_modes,)
        self.obs_modes = tuple(self.obs_modes)
        for m in self.obs_modes:
            if m not in OBS_MODES:
                raise ValueError(f"unknown observation mode {m!r}")
        if isinstance(self.reward, dict):
            self.reward = RewardCoefs(**self.reward)
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")

    @property
    def obs_mode(self) -> str:
        return self.obs_modes[0]

    def make_adr(self) -> AdrState:
        params = (
            [AdrParam(d["name"], d["initial"], d["terminal"]) for d in self.adr]
            if self.adr is not None
            else default_adr_params()
        )
        return AdrState(params, self.adr_window, self.adr_threshold, self.adr_step)

    def obs_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for m in self.obs_modes:
            if m == "depth":
                shapes[m] = (1, self.height, self.width)
            elif m == "stereo":
                shapes[m] = (6, self.height, self.width)
            else:
                shapes[m] = (STATE_DIM,)
        shapes["proprio"] = (PROPRIO_DIM,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs_modes"] = list(self.obs_modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "obs_mode" in d:
            d["obs_modes"] = (d.pop("obs_mode"),) + tuple(
                m for m in d.pop("extra_obs_modes", ()) if m != d.get("obs_mode")
            )
        return cls(**d)


@dataclass
class WorldState:
    """One environment's state, the scalar view of a :class:`VecEnv` row."""

    gripper: tuple[float, float]
    object: tuple[float, float]
    grasped: bool
    t: int
    episode_params: dict[str, float]
    env_id: int
    episode: int
    seed: int
    prev_action: tuple[float, float, float] = (0.0, 0.0, 0.0)
    grasp_paid: bool = False


# --- rendering ---------------------------------------------------------------


def _pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width
    ys = 1.0 - (np.arange(height, dtype=np.float64) + 0.5) / height
    return xs, ys


def _discs(centers: np.ndarray, radius: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx = xs[None, None, :] - centers[:, 0, None, None]
    dy = ys[None, :, None] - centers[:, 1, None, None]
    return dx * dx + dy * dy <= radius * radius


def render_depth_batch(gripper, obj, width, height, gripper_radius=0.03, object_radius=0.04):
    gripper = np.asarray(gripper, dtype=np.float64).reshape(-1, 2)
    obj = np.asarray(obj, dtype=np.float64).reshape(-1, 2)
    xs, ys = _pixel_grid(width, height)
    img = np.ones((len(gripper), 1, height, width), dtype=np.float32)
    img[:, 0][_discs(obj, object_radius, xs, ys)] = 0.5
    img[:, 0][_discs(gripper, gripper_radius, xs, ys)] = 0.3
    return img


def render_stereo_batch(gripper, obj, width, height, baseline=0.05, gripper_radius=0.03, object_radius=0.04):
    gripper = np.asarray(gripper, dtype=np.float64).reshape(-1, 2)
    obj = np.asarray(obj, dtype=np.float64).reshape(-1, 2)
    xs, ys = _pixel_grid(width, height)
    img = np.zeros((len(gripper), 6, height, width), dtype=np.float32)
    for block, shift in ((0, -baseline / 2), (3, baseline / 2)):
        sx = xs + shift
        g = _discs(gripper, gripper_radius, sx, ys)
        o = _discs(obj, object_radius, sx, ys) & ~g
        img[:, block][o] = 1.0
        img[:, block + 1][g] = 1.0
    return img


def render_depth(state: WorldState, width: int, height: int, cfg: EnvConfig | None = None) -> np.ndarray:
    cfg = cfg or EnvConfig()
    return render_depth_batch(state.gripper, state.object, width, height, cfg.gripper_radius, cfg.object_radius)[0]


def render_stereo(state: WorldState, width: int, height: int, baseline: float = 0.05, cfg: EnvConfig | None = None) -> np.ndarray:
    cfg = cfg or EnvConfig()
    return render_stereo_batch(
        state.gripper, state.object, width, height, baseline, cfg.gripper_radius, cfg.object_radius
    )[0]


# --- vectorized environment ----------------------------------------------------


class VecEnv:
    """``N`` environments stored as arrays; global ids ``env_ids``.

    ``step`` auto-resets finished envs: the returned observation for such an env
    is the first observation of its next episode, while reward/done/success
    describe the episode that just ended.
    """

    def __init__(self, cfg: EnvConfig, env_ids, seed: int, adr: AdrState | None = None):
        self.cfg = cfg
        self.env_ids = np.asarray(env_ids, dtype=np.uint64).reshape(-1)
        self.seed = int(seed)
        self.adr = adr if adr is not None else cfg.make_adr()
        n = len(self.env_ids)
        self.episode = np.zeros(n, dtype=np.int64)
        self.t = np.zeros(n, dtype=np.int64)
        self.gripper = np.zeros((n, 2))
        self.obj = np.zeros((n, 2))
        self.grasped = np.zeros(n, dtype=bool)
        self.grasp_paid = np.zeros(n, dtype=bool)
        self.params = np.zeros((n, len(self.adr.params)))
        self.prev_action = np.zeros((n, ACTION_DIM), dtype=np.float32)
        self.resets_sampled = 0

    @property
    def num_envs(self) -> int:
        return len(self.env_ids)

    def _col(self, name: str) -> int:
        for k, p in enumerate(self.adr.params):
            if p.name == name:
                return k
        raise KeyError(f"ADR table has no parameter {name!r}")

    def param(self, name: str) -> np.ndarray:
        return self.params[:, self._col(name)]

    def set_adr_fractions(self, fractions) -> None:
        fractions = np.asarray(fractions, dtype=np.float64).reshape(-1)
        if len(fractions) != len(self.adr.params):
            raise ShapeError(f"{len(fractions)} ADR fractions for {len(self.adr.params)} params")
        for p, f in zip(self.adr.params, fractions.tolist()):
            if f < p.fraction:
                raise ValueError(f"ADR fraction for {p.name} may not decrease")
            p.fraction = f

    def _reset_rows(self, idx: np.ndarray) -> None:
        if len(idx) == 0:
            return
        ids, eps = self.env_ids[idx], self.episode[idx].astype(np.uint64)
        for k, p in enumerate(self.adr.params):
            lo, hi = p.current_range()
            u = rng.uniform(self.seed, ids, eps, k)
            self.params[idx, k] = lo + u * (hi - lo)
        u = rng.uniform(self.seed, ids, eps, len(self.adr.params))
        w = self.params[idx, self._col("object_spawn_halfwidth")]
        self.obj[idx, 0] = np.clip(0.5 + (2.0 * u - 1.0) * w, 0.0, 1.0)
        self.obj[idx, 1] = OBJECT_Y0
        self.gripper[idx] = GRIPPER_START
        self.grasped[idx] = False
        self.grasp_paid[idx] = False
        self.t[idx] = 0
        self.prev_action[idx] = 0.0
        self.resets_sampled += len(idx)

    def reset(self) -> dict[str, np.ndarray]:
        self.episode[:] = 0
        self._reset_rows(np.arange(self.num_envs))
        return self.observe()

    def observe(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        out = {}
        for m in cfg.obs_modes:
            if m == "depth":
                out[m] = render_depth_batch(
                    self.gripper, self.obj, cfg.width, cfg.height, cfg.gripper_radius, cfg.object_radius
                )
            elif m == "stereo":
                out[m] = render_stereo_batch(
                    self.gripper, self.obj, cfg.width, cfg.height, cfg.stereo_baseline,
                    cfg.gripper_radius, cfg.object_radius,
                )
            else:
                out[m] = np.concatenate(
                    [self.gripper, self.obj, self.grasped[:, None]], axis=1
                ).astype(np.float32)
        out["proprio"] = np.concatenate(
            [
                self.gripper,
                self.grasped[:, None],
                self.prev_action,
                (self.t / cfg.t_max)[:, None],
            ],
            axis=1,
        ).astype(np.float32)
        return out

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict[str, np.ndarray]]:
        actions = np.asarray(actions, dtype=np.float32)
        if actions.shape != (self.num_envs, ACTION_DIM):
            raise ShapeError(f"actions shape {actions.shape}, expected {(self.num_envs, ACTION_DIM)}")
        cfg, rc = self.cfg, self.cfg.reward
        a = np.clip(actions, -1.0, 1.0).astype(np.float64)
        ids, eps = self.env_ids, self.episode.astype(np.uint64)
        draw = np.uint64(NOISE_DRAW_BASE) + np.uint64(2) * self.t.astype(np.uint64)
        nx, ny = rng.normal_pair(self.seed, ids, eps, draw)
        sigma = self.param("action_noise_sigma")
        scale = self.param("step_scale")
        radius = self.param("grasp_radius")
        executed = a[:, :2] + sigma[:, None] * np.stack([nx, ny], axis=1)
        self.gripper = np.clip(self.gripper + scale[:, None] * executed, 0.0, 1.0)

        grip = a[:, 2] > 0.5
        diff = self.gripper - self.obj
        near = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]) <= radius
        grasp_event = ~self.grasped & grip & near
        release = self.grasped & ~grip
        self.grasped = (self.grasped | grasp_event) & ~release
        y_before = self.obj[:, 1].copy()
        self.obj[release, 1] = OBJECT_Y0
        self.obj[self.grasped] = self.gripper[self.grasped]

        bonus = grasp_event & ~self.grasp_paid if rc.grasp_once else grasp_event
        self.grasp_paid |= grasp_event

        diff = self.gripper - self.obj
        dist = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1])
        success = self.grasped & (self.obj[:, 1] >= LIFT_HEIGHT)
        reward = (
            -rc.distance * dist
            + rc.grasp * bonus
            + rc.lift * self.grasped * (self.obj[:, 1] - y_before if rc.lift_mode == "progress" else self.obj[:, 1])
            + rc.success * success
        )
        self.t += 1
        done = success | (self.t >= cfg.t_max)
        self.prev_action = a.astype(np.float32)

        finished = np.flatnonzero(done)
        self.episode[finished] += 1
        self._reset_rows(finished)
        return reward.astype(np.float32), done, success, self.observe()

    # scalar views

    def state(self, i: int) -> WorldState:
        return WorldState(
            gripper=tuple(self.gripper[i].tolist()),
            object=tuple(self.obj[i].tolist()),
            grasped=bool(self.grasped[i]),
            t=int(self.t[i]),
            episode_params={p.name: float(self.params[i, k]) for k, p in enumerate(self.adr.params)},
            env_id=int(self.env_ids[i]),
            episode=int(self.episode[i]),
            seed=self.seed,
            prev_action=tuple(self.prev_action[i].tolist()),
            grasp_paid=bool(self.grasp_paid[i]),
        )

    @classmethod
    def from_states(cls, cfg: EnvConfig, states: list[WorldState], adr: AdrState | None = None) -> "VecEnv":
        if len({s.seed for s in states}) > 1:
            raise ValueError("all states must share one global seed")
        env = cls(cfg, [s.env_id for s in states], states[0].seed, adr)
        for i, s in enumerate(states):
            env.gripper[i] = s.gripper
            env.obj[i] = s.object
            env.grasped[i] = s.grasped
            env.t[i] = s.t
            env.episode[i] = s.episode
            env.params[i] = [s.episode_params[p.name] for p in env.adr.params]
            env.prev_action[i] = s.prev_action
            env.grasp_paid[i] = s.grasp_paid
        return env


def _row(obs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v[0] for k, v in obs.items()}


def reset(env_id: int, episode: int, adr: AdrState, cfg: EnvConfig | None = None, seed: int = 0):
    """Start episode ``episode`` of env ``env_id``; returns ``(WorldState, obs)``."""
    cfg = cfg or EnvConfig()
    env = VecEnv(cfg, [env_id], seed, adr)
    env.episode[0] = episode
    env._reset_rows(np.arange(1))
    return env.state(0), _row(env.observe())


def step(state: WorldState, action, adr: AdrState | None = None, cfg: EnvConfig | None = None):
    """Scalar step: ``(state', reward, done, success, obs)`` with auto-reset."""
    cfg = cfg or EnvConfig()
    env = VecEnv.from_states(cfg, [state], adr)
    r, d, s, obs = env.step(np.asarray(action, dtype=np.float32).reshape(1, ACTION_DIM))
    return env.state(0), float(r[0]), bool(d[0]), bool(s[0]), _row(obs)


def vector_step(env: VecEnv, actions):
    return env.step(actions)


def greedy_controller(state_obs: np.ndarray, grip_distance: float = 0.035) -> np.ndarray:
    """Scripted expert on the state vector (gripper xy, object xy, grasped).

    Descends onto the object, closes the grip once closer than the smallest
    terminal grasp radius, then lifts straight up.
    """
    g, o, grasped = state_obs[:, :2], state_obs[:, 2:4], state_obs[:, 4] > 0.5
    d = o - g
    dist = np.sqrt((d * d).sum(axis=1))
    act = np.zeros((len(state_obs), ACTION_DIM), dtype=np.float32)
    act[:, :2] = np.where(grasped[:, None], np.array([0.0, 1.0]), np.clip(d / 0.05, -1.0, 1.0))
    act[:, 2] = np.where(grasped | (dist <= grip_distance), 1.0, -1.0)
    return act


__all__ = [
    "AdrParam",
    "AdrState",
    "EnvConfig",
    "RewardCoefs",
    "ShapeError",
    "VecEnv",
    "WorldState",
    "adr_update",
    "default_adr_params",
    "greedy_controller",
    "render_depth",
    "render_depth_batch",
    "render_stereo",
    "render_stereo_batch",
    "reset",
    "step",
    "vector_step",
]
