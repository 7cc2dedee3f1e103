"""Binary wire protocol between simulator replicas, DP workers and the learner.

Frame layout (all integers little-endian)::

    magic    4 bytes  b"DSRL"
    version  u8       1
    msg_type u8
    length   u32      payload byte count
    payload  length bytes

Tensors travel as ``dtype:u8 ndims:u8 dims:u32*ndims data`` with row-major
little-endian element data.  Named tensor sets are ``count:u32`` followed by
``name_len:u16 name:utf-8 tensor`` records.  A ``ProtocolError`` is fatal for
the connection: there is no resynchronisation.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Union

import numpy as np

MAGIC = b"DSRL"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}
_MAX_NDIMS = 255


class ProtocolError(Exception):
    """Malformed or unexpected bytes on the wire. Closes the session."""


class IncompleteFrame(ProtocolError):
    """Not enough bytes yet; the caller may retry once more data arrives."""


class EncodingError(ValueError):
    pass


class SessionError(ProtocolError):
    def __init__(self, state: "ProtocolState", msg: "Message", expected: str):
        self.state = state
        self.msg_type = msg.msg_type
        super().__init__(
            f"in state {state.name}: expected {expected}, got {type(msg).__name__}"
        )


class MsgType(enum.IntEnum):
    HELLO = 1
    INITIAL_OBS = 2
    ACTIONS = 3
    STEP_RESULT = 4
    ADR_UPDATE = 5
    GRADS = 6
    AVG_GRADS = 7
    SHUTDOWN = 8


def _tensor_eq(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def _obs_eq(a: dict, b: dict) -> bool:
    return list(a) == list(b) and all(_tensor_eq(a[k], b[k]) for k in a)


def as_wire_array(x, dtype) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


# --- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class ObsSpec:
    name: str
    dims: tuple[int, ...]
    dtype: int = 0


@dataclass(eq=False)
class Hello:
    replica_id: int
    num_envs: int
    obs_spec: list[ObsSpec] = field(default_factory=list)
    msg_type = MsgType.HELLO

    def __eq__(self, other):
        return (
            isinstance(other, Hello)
            and (self.replica_id, self.num_envs) == (other.replica_id, other.num_envs)
            and list(self.obs_spec) == list(other.obs_spec)
        )


@dataclass(eq=False)
class InitialObs:
    obs: dict[str, np.ndarray]
    msg_type = MsgType.INITIAL_OBS

    def __eq__(self, other):
        return isinstance(other, InitialObs) and _obs_eq(self.obs, other.obs)


@dataclass(eq=False)
class Actions:
    actions: np.ndarray
    msg_type = MsgType.ACTIONS

    def __eq__(self, other):
        return isinstance(other, Actions) and _tensor_eq(self.actions, other.actions)


@dataclass(eq=False)
class StepResult:
    rewards: np.ndarray
    dones: np.ndarray
    obs: dict[str, np.ndarray]
    successes: np.ndarray
    msg_type = MsgType.STEP_RESULT

    def __eq__(self, other):
        return (
            isinstance(other, StepResult)
            and _tensor_eq(self.rewards, other.rewards)
            and _tensor_eq(self.dones, other.dones)
            and _tensor_eq(self.successes, other.successes)
            and _obs_eq(self.obs, other.obs)
        )


@dataclass(eq=False)
class AdrUpdate:
    fractions: np.ndarray
    msg_type = MsgType.ADR_UPDATE

    def __eq__(self, other):
        return isinstance(other, AdrUpdate) and _tensor_eq(self.fractions, other.fractions)


@dataclass(eq=False)
class Grads:
    step_id: int
    flat: np.ndarray
    msg_type = MsgType.GRADS

    def __eq__(self, other):
        return (
            type(other) is type(self)
            and self.step_id == other.step_id
            and _tensor_eq(self.flat, other.flat)
        )


@dataclass(eq=False)
class AvgGrads(Grads):
    msg_type = MsgType.AVG_GRADS


@dataclass
class Shutdown:
    msg_type = MsgType.SHUTDOWN


Message = Union[Hello, InitialObs, Actions, StepResult, AdrUpdate, Grads, AvgGrads, Shutdown]


# --- payload primitives ---------------------------------------------------------


def _dtype_code(dt: np.dtype) -> int:
    for code, wire in DTYPE_CODES.items():
        if dt.kind == wire.kind and dt.itemsize == wire.itemsize:
            return code
    raise EncodingError(f"unsupported tensor dtype {dt}")


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _dtype_code(arr.dtype)
    if arr.ndim > _MAX_NDIMS:
        raise EncodingError("too many dimensions")
    return encode_raw_tensor(code, arr.shape, np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())


def encode_raw_tensor(code: int, dims: tuple[int, ...], data: bytes) -> bytes:
    """Encode pre-serialised element bytes, validating the length against dims."""
    if code not in DTYPE_CODES:
        raise EncodingError(f"unknown dtype code {code}")
    expected = int(np.prod(dims, dtype=np.int64)) * DTYPE_CODES[code].itemsize
    if len(data) != expected:
        raise EncodingError(f"tensor data is {len(data)} bytes, dims imply {expected}")
    return struct.pack(f"<BB{len(dims)}I", code, len(dims), *dims) + data


def _encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise EncodingError("name too long")
    return struct.pack("<H", len(raw)) + raw


def _encode_obs(obs: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(obs))]
    for name, arr in obs.items():
        parts.append(_encode_str(name))
        parts.append(encode_tensor(arr))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ProtocolError("payload shorter than its contents require")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensor(self) -> np.ndarray:
        code, ndims = self.unpack("<BB")
        if code not in DTYPE_CODES:
            raise ProtocolError(f"unknown tensor dtype code {code}")
        dims = self.unpack(f"<{ndims}I") if ndims else ()
        dt = DTYPE_CODES[code]
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        raw = self.take(n)
        return np.frombuffer(raw, dtype=dt).reshape(dims).copy()

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("name is not valid utf-8") from exc

    def obs(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            name = self.string()
            out[name] = self.tensor()
        return out


def encode_payload(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        parts = [struct.pack("<III", msg.replica_id, msg.num_envs, len(msg.obs_spec))]
        for spec in msg.obs_spec:
            parts.append(_encode_str(spec.name))
            parts.append(struct.pack(f"<B{len(spec.dims)}IB", len(spec.dims), *spec.dims, spec.dtype))
        return b"".join(parts)
    if isinstance(msg, InitialObs):
        return _encode_obs(msg.obs)
    if isinstance(msg, Actions):
        return encode_tensor(msg.actions)
    if isinstance(msg, StepResult):
        return b"".join(
            [
                encode_tensor(msg.rewards),
                encode_tensor(msg.dones),
                _encode_obs(msg.obs),
                encode_tensor(msg.successes),
            ]
        )
    if isinstance(msg, AdrUpdate):
        return encode_tensor(msg.fractions)
    if isinstance(msg, Grads):  # includes AvgGrads
        return struct.pack("<Q", msg.step_id) + encode_tensor(msg.flat)
    if isinstance(msg, Shutdown):
        return b""
    raise EncodingError(f"not a protocol message: {msg!r}")


def decode_payload(msg_type: int, payload: memoryview) -> Message:
    r = _Reader(payload)
    if msg_type == MsgType.HELLO:
        replica_id, num_envs, count = r.unpack("<III")
        specs = []
        for _ in range(count):
            name = r.string()
            (nd,) = r.unpack("<B")
            dims = r.unpack(f"<{nd}I") if nd else ()
            (dtype,) = r.unpack("<B")
            specs.append(ObsSpec(name, tuple(dims), dtype))
        msg: Message = Hello(replica_id, num_envs, specs)
    elif msg_type == MsgType.INITIAL_OBS:
        msg = InitialObs(r.obs())
    elif msg_type == MsgType.ACTIONS:
        msg = Actions(r.tensor())
    elif msg_type == MsgType.STEP_RESULT:
        rewards = r.tensor()
        dones = r.tensor()
        obs = r.obs()
        msg = StepResult(rewards, dones, obs, r.tensor())
    elif msg_type == MsgType.ADR_UPDATE:
        msg = AdrUpdate(r.tensor())
    elif msg_type in (MsgType.GRADS, MsgType.AVG_GRADS):
        (step_id,) = r.unpack("<Q")
        cls = Grads if msg_type == MsgType.GRADS else AvgGrads
        msg = cls(step_id, r.tensor())
    elif msg_type == MsgType.SHUTDOWN:
        msg = Shutdown()
    else:
        raise ProtocolError(f"unknown msg_type {msg_type}")
    if r.pos != len(payload):
        raise ProtocolError(
            f"payload_len {len(payload)} but message body is {r.pos} bytes"
        )
    return msg


# --- framing --------------------------------------------------------------------


def encode_frame(msg: Message) -> bytes:
    payload = encode_payload(msg)
    return HEADER.pack(MAGIC, VERSION, int(msg.msg_type), len(payload)) + payload


def _check_header(buf) -> tuple[int, int]:
    n = len(buf)
    if bytes(buf[: min(n, 4)]) != MAGIC[: min(n, 4)]:
        raise ProtocolError(f"bad magic {bytes(buf[:4])!r}")
    if n >= 5 and buf[4] != VERSION:
        raise ProtocolError(f"unsupported version {buf[4]}")
    if n >= 6 and buf[5] not in MsgType._value2member_map_:
        raise ProtocolError(f"unknown msg_type {buf[5]}")
    if n < HEADER_SIZE:
        raise IncompleteFrame(f"have {n} of {HEADER_SIZE} header bytes")
    _, _, msg_type, length = HEADER.unpack_from(buf)
    return msg_type, length


def decode_frame(data) -> tuple[Message, int]:
    """Decode one frame from the start of ``data``.

    Returns the message and the number of bytes consumed (header + payload).
    Raises ``IncompleteFrame`` when ``data`` holds only part of a frame.
    """
    buf = memoryview(data).cast("B")
    msg_type, length = _check_header(buf)
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise IncompleteFrame(f"have {len(buf)} of {end} frame bytes")
    return decode_payload(msg_type, buf[HEADER_SIZE:end]), end


def iter_frames(data: bytes) -> Iterator[tuple[int, Message]]:
    """Yield ``(offset, message)`` for every frame in a captured byte stream."""
    pos = 0
    view = memoryview(data)
    while pos < len(view):
        msg, used = decode_frame(view[pos:])
        yield pos, msg
        pos += used


# --- stream transport -------------------------------------------------------------


class ConnectionLost(ConnectionError):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytearray:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionLost(f"peer closed after {got} of {n} bytes")
        got += k
    return buf


def send_message(sock: socket.socket, msg: Message) -> int:
    frame = encode_frame(msg)
    sock.sendall(frame)
    return len(frame)


def recv_message(sock: socket.socket) -> Message:
    header = _recv_exact(sock, HEADER_SIZE)
    msg_type, length = _check_header(header)
    payload = _recv_exact(sock, length) if length else bytearray()
    return decode_payload(msg_type, memoryview(payload))


def read_message(fp: BinaryIO) -> Message | None:
    """Read one frame from a file-like object; ``None`` at clean EOF."""
    header = fp.read(HEADER_SIZE)
    if not header:
        return None
    msg_type, length = _check_header(header)
    payload = fp.read(length)
    if len(payload) < length:
        raise IncompleteFrame("stream ended inside a frame")
    return decode_payload(msg_type, memoryview(payload))


# --- session state machine ----------------------------------------------------------


class ProtocolState(enum.Enum):
    AWAIT_HELLO = "AwaitHello"
    AWAIT_INITIAL_OBS = "AwaitInitialObs"
    AWAIT_ACTIONS = "AwaitActions"
    AWAIT_STEP_RESULT = "AwaitStepResult"
    CLOSED = "Closed"


_TRANSITIONS = {
    (ProtocolState.AWAIT_HELLO, MsgType.HELLO): ProtocolState.AWAIT_INITIAL_OBS,
    (ProtocolState.AWAIT_INITIAL_OBS, MsgType.INITIAL_OBS): ProtocolState.AWAIT_ACTIONS,
    (ProtocolState.AWAIT_ACTIONS, MsgType.ACTIONS): ProtocolState.AWAIT_STEP_RESULT,
    (ProtocolState.AWAIT_STEP_RESULT, MsgType.STEP_RESULT): ProtocolState.AWAIT_ACTIONS,
}
_EXPECTED = {
    ProtocolState.AWAIT_HELLO: "Hello",
    ProtocolState.AWAIT_INITIAL_OBS: "InitialObs",
    ProtocolState.AWAIT_ACTIONS: "Actions",
    ProtocolState.AWAIT_STEP_RESULT: "StepResult",
    ProtocolState.CLOSED: "nothing (session closed)",
}
_RUNNING = {
    ProtocolState.AWAIT_INITIAL_OBS,
    ProtocolState.AWAIT_ACTIONS,
    ProtocolState.AWAIT_STEP_RESULT,
}


def session_step(state: ProtocolState, msg: Message) -> ProtocolState:
    """Advance the replica<->learner session for one message in either direction."""
    kind = msg.msg_type
    if state is ProtocolState.CLOSED:
        raise SessionError(state, msg, _EXPECTED[state])
    if kind == MsgType.SHUTDOWN:
        return ProtocolState.CLOSED
    if kind == MsgType.ADR_UPDATE and state in _RUNNING:
        return state
    nxt = _TRANSITIONS.get((state, kind))
    if nxt is None:
        raise SessionError(state, msg, _EXPECTED[state])
    return nxt


class Session:
    """A socket plus the protocol state it is in. Single owner only."""

    def __init__(self, sock: socket.socket, state: ProtocolState = ProtocolState.AWAIT_HELLO):
        self.sock = sock
        self.state = state
        self.bytes_sent = 0

    def send(self, msg: Message) -> None:
        self.state = session_step(self.state, msg)
        self.bytes_sent += send_message(self.sock, msg)

    def recv(self) -> Message:
        try:
            msg = recv_message(self.sock)
            self.state = session_step(self.state, msg)
        except ProtocolError:
            self.state = ProtocolState.CLOSED
            raise
        return msg

    def close(self) -> None:
        self.state = ProtocolState.CLOSED
        try:
            self.sock.close()
        except OSError:
            pass


def describe(msg: Message) -> str:
    """One-line human summary, used by the proto-dump tool."""

    def t(a: np.ndarray) -> str:
        return f"{a.dtype.name}{list(a.shape)}"

    if isinstance(msg, Hello):
        specs = ", ".join(f"{s.name}:{list(s.dims)}/{s.dtype}" for s in msg.obs_spec)
        return f"Hello replica_id={msg.replica_id} num_envs={msg.num_envs} obs=[{specs}]"
    if isinstance(msg, InitialObs):
        return "InitialObs " + " ".join(f"{k}={t(v)}" for k, v in msg.obs.items())
    if isinstance(msg, Actions):
        return f"Actions {t(msg.actions)}"
    if isinstance(msg, StepResult):
        obs = " ".join(f"{k}={t(v)}" for k, v in msg.obs.items())
        return (
            f"StepResult rewards={t(msg.rewards)} sum={float(msg.rewards.sum()):.4f} "
            f"dones={int(msg.dones.sum())} successes={int(msg.successes.sum())} {obs}"
        )
    if isinstance(msg, AdrUpdate):
        return f"AdrUpdate fractions={msg.fractions.tolist()}"
    if isinstance(msg, Grads):
        return f"{type(msg).__name__} step_id={msg.step_id} flat={t(msg.flat)}"
    return type(msg).__name__
