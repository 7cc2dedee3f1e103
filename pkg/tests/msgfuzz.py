"""Random valid protocol messages and a corpus of illegal session traces."""

from __future__ import annotations

import numpy as np

from disaggrl import proto

_DTYPES = [np.dtype("<f4"), np.dtype("<i4"), np.dtype("u1")]


def random_tensor(rng: np.random.Generator, dtype=None, max_ndim: int = 3, max_dim: int = 5) -> np.ndarray:
    dt = dtype if dtype is not None else _DTYPES[rng.integers(3)]
    shape = tuple(int(d) for d in rng.integers(0, max_dim + 1, rng.integers(0, max_ndim + 1)))
    n = int(np.prod(shape, dtype=np.int64))
    if dt.kind == "f":
        # arbitrary bit patterns, NaN payloads included
        raw = rng.integers(0, 2**32, n, dtype=np.uint64).astype(np.uint32).view(np.float32)
    elif dt.kind == "i":
        raw = rng.integers(-(2**31), 2**31, n, dtype=np.int64).astype(np.int32)
    else:
        raw = rng.integers(0, 256, n).astype(np.uint8)
    return raw.astype(dt).reshape(shape)


def random_name(rng: np.random.Generator) -> str:
    alphabet = "abcdefghijklmnopqrstuvwxyz_0123456789é漢"
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), rng.integers(0, 12)))


def random_obs(rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {f"{random_name(rng)}{i}": random_tensor(rng) for i in range(rng.integers(0, 4))}


def random_message(rng: np.random.Generator) -> proto.Message:
    kind = int(rng.integers(8))
    n = int(rng.integers(0, 6))
    if kind == 0:
        specs = [
            proto.ObsSpec(random_name(rng), tuple(int(d) for d in rng.integers(0, 2**32, rng.integers(0, 4), dtype=np.uint64)),
                          int(rng.integers(0, 3)))
            for _ in range(rng.integers(0, 4))
        ]
        return proto.Hello(int(rng.integers(0, 2**32, dtype=np.uint64)), int(rng.integers(0, 2**32, dtype=np.uint64)), specs)
    if kind == 1:
        return proto.InitialObs(random_obs(rng))
    if kind == 2:
        return proto.Actions(random_tensor(rng, np.dtype("<f4")))
    if kind == 3:
        return proto.StepResult(
            random_tensor(rng, np.dtype("<f4")).reshape(-1)[:n],
            rng.integers(0, 2, n).astype(np.uint8),
            random_obs(rng),
            rng.integers(0, 2, n).astype(np.uint8),
        )
    if kind == 4:
        return proto.AdrUpdate(random_tensor(rng, np.dtype("<f4"), max_ndim=1))
    if kind in (5, 6):
        cls = proto.Grads if kind == 5 else proto.AvgGrads
        return cls(int(rng.integers(0, 2**63, dtype=np.uint64)) * 2 + int(rng.integers(2)), random_tensor(rng, np.dtype("<f4"), 1, 64))
    return proto.Shutdown()


def _m(kind: str) -> proto.Message:
    z = np.zeros((1,), np.float32)
    return {
        "Hello": proto.Hello(0, 1, []),
        "InitialObs": proto.InitialObs({"proprio": np.zeros((1, 7), np.float32)}),
        "Actions": proto.Actions(np.zeros((1, 3), np.float32)),
        "StepResult": proto.StepResult(z, np.zeros(1, np.uint8), {}, np.zeros(1, np.uint8)),
        "AdrUpdate": proto.AdrUpdate(z),
        "Shutdown": proto.Shutdown(),
        "Grads": proto.Grads(0, z),
        "AvgGrads": proto.AvgGrads(0, z),
    }[kind]


# every trace is legal up to its last message, which must be rejected
ILLEGAL_TRACES: list[list[str]] = [
    ["InitialObs"],
    ["Actions"],
    ["StepResult"],
    ["AdrUpdate"],
    ["Grads"],
    ["Hello", "Hello"],
    ["Hello", "Actions"],
    ["Hello", "StepResult"],
    ["Hello", "InitialObs", "InitialObs"],
    ["Hello", "InitialObs", "StepResult"],
    ["Hello", "InitialObs", "Hello"],
    ["Hello", "InitialObs", "Actions", "Actions"],
    ["Hello", "InitialObs", "Actions", "InitialObs"],
    ["Hello", "InitialObs", "Actions", "StepResult", "StepResult"],
    ["Hello", "InitialObs", "Actions", "AdrUpdate", "Actions"],
    ["Hello", "InitialObs", "AdrUpdate", "StepResult"],
    ["Hello", "InitialObs", "Actions", "Grads"],
    ["Hello", "InitialObs", "Actions", "StepResult", "AvgGrads"],
    ["Hello", "Shutdown", "Actions"],
    ["Hello", "InitialObs", "Shutdown", "StepResult"],
    ["Hello", "InitialObs", "Actions", "StepResult", "Shutdown", "Shutdown"],
    ["Shutdown", "Hello"],
]

LEGAL_TRACES: list[list[str]] = [
    ["Hello", "InitialObs", "Actions", "StepResult", "Actions", "StepResult", "Shutdown"],
    ["Hello", "InitialObs", "AdrUpdate", "Actions", "AdrUpdate", "StepResult", "Shutdown"],
    ["Hello", "Shutdown"],
    ["Shutdown"],
    ["Hello", "AdrUpdate", "InitialObs", "Actions", "StepResult"],
]


def messages(trace: list[str]) -> list[proto.Message]:
    return [_m(k) for k in trace]
