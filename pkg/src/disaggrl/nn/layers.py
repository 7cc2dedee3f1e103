"""Layers with hand-written backward passes.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(cache, dy) -> (dx, grads)`` where ``grads`` maps the layer's local
parameter names to arrays shaped like the parameters.  Caches are plain tuples,
so one layer can be run for several time steps before any backward pass.
Layers are dtype-agnostic: they compute in whatever dtype the inputs and
parameters carry (float32 in normal use).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix of ``shape`` (rows, cols) scaled by ``gain``."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q[:rows, :cols]).astype(np.float32)


class Layer:
    name: str = "layer"
    params: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = np.sqrt(2.0), name="linear"):
        super().__init__()
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.params = {
            "W": orthogonal((n_out, n_in), gain, rng).T.copy(),
            "b": np.zeros(n_out, dtype=np.float32),
        }

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected [N x {self.n_in}], got {list(x.shape)}")
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, cache, dy):
        x = cache
        return dy @ self.params["W"].T, {"W": x.T @ dy, "b": dy.sum(axis=0)}


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dy):
        return dy * cache, {}


class Tanh(Layer):
    name = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, dy):
        return dy * (1 - cache * cache), {}


class Conv2d(Layer):
    """Direct im2col convolution on NCHW input, square kernel."""

    def __init__(self, c_in, c_out, rng, kernel=3, stride=2, padding=1, gain=np.sqrt(2.0), name="conv"):
        super().__init__()
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.k, self.s, self.p = kernel, stride, padding
        w = orthogonal((c_out, c_in * kernel * kernel), gain, rng)
        self.params = {
            "W": w.reshape(c_out, c_in, kernel, kernel),
            "b": np.zeros(c_out, dtype=np.float32),
        }

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (h + 2 * self.p - self.k) // self.s + 1, (w + 2 * self.p - self.k) // self.s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected [N x {self.c_in} x H x W], got {list(x.shape)}")
        n, c, h, w = x.shape
        k, s, p = self.k, self.s, self.p
        ho, wo = self.out_hw(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((n, ho, wo, c, k, k), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[..., i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s].transpose(0, 2, 3, 1)
        cols = cols.reshape(n * ho * wo, c * k * k)
        wmat = self.params["W"].reshape(self.c_out, -1)
        y = cols @ wmat.T + self.params["b"]
        y = y.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, cache, dy, need_dx: bool = True):
        cols, xshape = cache
        n, c, h, w = xshape
        k, s, p = self.k, self.s, self.p
        ho, wo = dy.shape[2], dy.shape[3]
        dyt = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        wmat = self.params["W"].reshape(self.c_out, -1)
        grads = {"W": (dyt.T @ cols).reshape(self.params["W"].shape), "b": dyt.sum(axis=0)}
        if not need_dx:  # first layer: nothing consumes the image gradient
            return None, grads
        dcols = (dyt @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w], grads


class LayerNorm(Layer):
    """Normalizes over every non-batch axis, elementwise affine over that shape."""

    def __init__(self, shape: tuple[int, ...], eps: float = 1e-5, name="ln"):
        super().__init__()
        self.name = name
        self.shape = tuple(shape)
        self.eps = eps
        self.params = {
            "gamma": np.ones(self.shape, dtype=np.float32),
            "beta": np.zeros(self.shape, dtype=np.float32),
        }

    def normalize(self, x):
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        return xc * inv, inv

    def forward(self, x):
        if x.shape[1:] != self.shape:
            raise ShapeError(f"{self.name}: expected [N x {self.shape}], got {list(x.shape)}")
        xhat, inv = self.normalize(x)
        return xhat * self.params["gamma"] + self.params["beta"], (xhat, inv)

    def backward(self, cache, dy):
        xhat, inv = cache
        axes = tuple(range(1, dy.ndim))
        grads = {"gamma": (dy * xhat).sum(axis=0), "beta": dy.sum(axis=0)}
        dxhat = dy * self.params["gamma"]
        dx = inv * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return dx, grads


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GRUCell(Layer):
    """Gated recurrent unit; gate order (reset, update, candidate)."""

    def __init__(self, n_in: int, n_hidden: int, rng, name="gru"):
        super().__init__()
        self.name = name
        self.n_in, self.n_hidden = n_in, n_hidden
        h = n_hidden
        self.params = {
            "Wx": np.concatenate([orthogonal((h, n_in), 1.0, rng).T for _ in range(3)], axis=1),
            "Wh": np.concatenate([orthogonal((h, h), 1.0, rng) for _ in range(3)], axis=1),
            "bx": np.zeros(3 * h, dtype=np.float32),
            "bh": np.zeros(3 * h, dtype=np.float32),
        }

    state_size = property(lambda self: self.n_hidden)

    def forward(self, x, h):
        if x.shape[1] != self.n_in or h.shape[1] != self.n_hidden:
            raise ShapeError(f"{self.name}: bad input/hidden shapes {list(x.shape)}, {list(h.shape)}")
        H = self.n_hidden
        gx = x @ self.params["Wx"] + self.params["bx"]
        gh = h @ self.params["Wh"] + self.params["bh"]
        r = _sigmoid(gx[:, :H] + gh[:, :H])
        z = _sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
        ghn = gh[:, 2 * H :]
        n = np.tanh(gx[:, 2 * H :] + r * ghn)
        h_new = (1 - z) * n + z * h
        return h_new, h_new, (x, h, r, z, n, ghn)

    def backward(self, cache, dout, dstate):
        """``dout`` and ``dstate`` both flow into the new hidden state."""
        x, h, r, z, n, ghn = cache
        dh_new = dout if dstate is None else dout + dstate
        dn = dh_new * (1 - z)
        dz = dh_new * (h - n)
        dan = dn * (1 - n * n)
        dar = dan * ghn * r * (1 - r)
        daz = dz * z * (1 - z)
        dgx = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        grads = {"Wx": x.T @ dgx, "Wh": h.T @ dgh, "bx": dgx.sum(axis=0), "bh": dgh.sum(axis=0)}
        dx = dgx @ self.params["Wx"].T
        dh = dh_new * z + dgh @ self.params["Wh"].T
        return dx, dh, grads


class LSTMCell(Layer):
    """Long short-term memory cell; the state vector is ``concat(h, c)``."""

    def __init__(self, n_in: int, n_hidden: int, rng, name="lstm"):
        super().__init__()
        self.name = name
        self.n_in, self.n_hidden = n_in, n_hidden
        h = n_hidden
        b = np.zeros(4 * h, dtype=np.float32)
        b[h : 2 * h] = 1.0  # forget-gate bias
        self.params = {
            "Wx": np.concatenate([orthogonal((h, n_in), 1.0, rng).T for _ in range(4)], axis=1),
            "Wh": np.concatenate([orthogonal((h, h), 1.0, rng) for _ in range(4)], axis=1),
            "b": b,
        }

    state_size = property(lambda self: 2 * self.n_hidden)

    def forward(self, x, state):
        H = self.n_hidden
        if x.shape[1] != self.n_in or state.shape[1] != 2 * H:
            raise ShapeError(f"{self.name}: bad input/state shapes {list(x.shape)}, {list(state.shape)}")
        h, c = state[:, :H], state[:, H:]
        a = x @ self.params["Wx"] + h @ self.params["Wh"] + self.params["b"]
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = _sigmoid(a[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        return h_new, np.concatenate([h_new, c_new], axis=1), (x, h, c, i, f, g, o, tc)

    def backward(self, cache, dout, dstate):
        x, h, c, i, f, g, o, tc = cache
        H = self.n_hidden
        dh = dout.copy()
        dc = np.zeros_like(c)
        if dstate is not None:
            dh += dstate[:, :H]
            dc += dstate[:, H:]
        dc = dc + dh * o * (1 - tc * tc)
        da = np.concatenate(
            [
                dc * g * i * (1 - i),
                dc * c * f * (1 - f),
                dc * i * (1 - g * g),
                dh * tc * o * (1 - o),
            ],
            axis=1,
        )
        grads = {"Wx": x.T @ da, "Wh": h.T @ da, "b": da.sum(axis=0)}
        dx = da @ self.params["Wx"].T
        dh_prev = da @ self.params["Wh"].T
        return dx, np.concatenate([dh_prev, dc * f], axis=1), grads
