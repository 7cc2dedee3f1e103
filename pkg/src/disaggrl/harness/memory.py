"""Closed-form memory accounting and layout capacity planning.

All quantities are integer bytes, and every count comes from exact integer
floor division.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

DTYPE_SIZES = {"f32": 4, "f16": 2, "u8": 1, "i32": 4, "f64": 8}

GB = 10**9

# per-step scalars stored beside the image: action (3), log-prob, value,
# reward, done, success
STEP_SCALARS = 8
PROPRIO = 7


class UsageError(ValueError):
    pass


def buffer_bytes(width: int, height: int, num_envs: int, horizon: int, channels: int = 1, dtype: str = "f32") -> int:
    """Bytes of the image block of an experience buffer."""
    for name, v in (("width", width), ("height", height), ("num_envs", num_envs), ("horizon", horizon), ("channels", channels)):
        if not isinstance(v, int) or v < 1:
            raise UsageError(f"{name} must be a positive integer, got {v!r}")
    if dtype not in DTYPE_SIZES:
        raise UsageError(f"unknown dtype {dtype!r}")
    # python ints never overflow; the explicit int() guards against numpy scalars
    return int(num_envs) * int(horizon) * int(channels) * int(width) * int(height) * DTYPE_SIZES[dtype]


@dataclass(frozen=True)
class MemoryModel:
    budget: int = 48 * GB
    # fitted by disaggrl.harness.calibrate; derived values, not measurements
    asset_cache: int = 14_027_821_570
    sim_base: int = 0  # s0, bytes per env independent of resolution
    sim_per_pixel: int = 632  # s1, bytes per env per rendered pixel
    learner_fixed: int = 20_286_228_601
    value_bytes: int = 4  # 0 removes the buffer cost entirely
    proprio: int = PROPRIO
    step_scalars: int = STEP_SCALARS

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not isinstance(v, int) or v < 0:
                raise UsageError(f"{k} must be a non-negative integer, got {v!r}")

    def per_env_sim(self, width: int, height: int) -> int:
        return self.sim_base + self.sim_per_pixel * width * height

    def buffer_per_env(self, width: int, height: int, horizon: int, channels: int = 1) -> int:
        return horizon * (channels * width * height + self.proprio + self.step_scalars) * self.value_bytes

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Layout:
    kind: str  # data_parallel | disaggregated
    devices: int = 4

    def __post_init__(self):
        if self.kind not in ("data_parallel", "disaggregated"):
            raise UsageError(f"unknown layout {self.kind!r}")
        if self.devices < 1 or (self.kind == "disaggregated" and self.devices < 2):
            raise UsageError("disaggregation needs at least two devices")

    @property
    def sim_devices(self) -> int:
        return self.devices if self.kind == "data_parallel" else self.devices - 1


@dataclass(frozen=True)
class Capacity:
    layout: Layout
    per_device: int  # envs per simulating device
    total: int
    binding: str  # which constraint set the count
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "layout": self.layout.kind,
            "devices": self.layout.devices,
            "per_device": self.per_device,
            "total": self.total,
            "binding": self.binding,
            "reason": self.reason,
        }


def _floor_div(num: int, den: int) -> int | None:
    """Largest N >= 0 with N*den <= num, or None when unbounded (den == 0, num >= 0)."""
    if num < 0:
        return 0
    if den == 0:
        return None
    return num // den


def max_envs(layout: Layout, model: MemoryModel, width: int, height: int, horizon: int = 16, channels: int = 1) -> Capacity:
    B, A, L = model.budget, model.asset_cache, model.learner_fixed
    sim = model.per_env_sim(width, height)
    buf = model.buffer_per_env(width, height, horizon, channels)
    if layout.kind == "data_parallel":
        if A + L > B:
            return Capacity(layout, 0, 0, "infeasible", "asset cache plus learner overhead exceed the budget")
        n = _floor_div(B - A - L, sim + buf)
        if n is None:
            raise UsageError("per-env cost is zero; capacity is unbounded")
        return Capacity(layout, n, n * layout.devices, "device")
    if A > B or L > B:
        return Capacity(layout, 0, 0, "infeasible", "asset cache or learner overhead exceeds the budget")
    sims = layout.sim_devices
    n_sim = _floor_div(B - A, sim)
    n_learn = _floor_div(B - L, sims * buf)
    if n_sim is None and n_learn is None:
        raise UsageError("per-env cost is zero; capacity is unbounded")
    if n_learn is None or (n_sim is not None and n_sim <= n_learn):
        n, binding = n_sim, "simulator"
    else:
        n, binding = n_learn, "learner"
    return Capacity(layout, n, n * sims, binding)


def fits(layout: Layout, model: MemoryModel, n: int, width: int, height: int, horizon: int = 16, channels: int = 1) -> bool:
    """Budget check for ``n`` envs per simulating device; the oracle for :func:`max_envs`."""
    B, A, L = model.budget, model.asset_cache, model.learner_fixed
    sim = model.per_env_sim(width, height)
    buf = model.buffer_per_env(width, height, horizon, channels)
    if layout.kind == "data_parallel":
        return A + n * (sim + buf) + L <= B
    return A + n * sim <= B and layout.sim_devices * n * buf + L <= B


REFERENCE_RESOLUTIONS = [(160, 120), (320, 240)]


def memplan(model: MemoryModel | None = None, devices: int = 4, horizon: int = 16, channels: int = 1,
            resolutions=REFERENCE_RESOLUTIONS) -> list[dict]:
    model = model or MemoryModel()
    rows = []
    for w, h in resolutions:
        dp = max_envs(Layout("data_parallel", devices), model, w, h, horizon, channels)
        dis = max_envs(Layout("disaggregated", devices), model, w, h, horizon, channels)
        rows.append({
            "resolution": f"{w}x{h}",
            "dp_per_device": dp.per_device,
            "dp_total": dp.total,
            "disagg_per_sim_device": dis.per_device,
            "disagg_total": dis.total,
            "ratio": dis.total / dp.total if dp.total else float("inf"),
            "disagg_binding": dis.binding,
            "buffer_bytes_512": buffer_bytes(w, h, 512, horizon, channels),
        })
    return rows


def format_memplan(rows: list[dict], devices: int = 4) -> str:
    head = f"{'Resolution':<12}{'DP (' + str(devices) + 'x sim+learn)':>22}{'Disagg (' + str(devices - 1) + 'x sim + 1x learn)':>32}{'Ratio':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        dp = f"{r['dp_total']} ({r['dp_per_device']}/dev)"
        dis = f"{r['disagg_total']} ({r['disagg_per_sim_device']}/dev)"
        lines.append(f"{r['resolution']:<12}{dp:>22}{dis:>32}{r['ratio']:>8.2f}")
    return "\n".join(lines)
