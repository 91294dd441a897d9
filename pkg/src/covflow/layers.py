"""Invertible layers with exact per-sample log-determinants.

Parameters live as float64 numpy arrays in ``layer.params``.  ``forward``
takes an optional mapping of the same names to autodiff tensors so a
training step can differentiate through it; without one the stored arrays
are used as constants.  ``inverse`` works on plain arrays.
"""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(x)


def channel_view(v: Tensor, shape) -> Tensor:
    """Broadcast a per-channel vector (C,) over an NCHW shape."""
    return ad.broadcast_to(ad.reshape(v, (1, v.shape[0], 1, 1)), shape)


def per_sample_sum(x: Tensor) -> Tensor:
    return ad.sum(x, axis=tuple(range(1, x.ndim)))


class Layer:
    kind = "layer"
    conditional = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def tensors(self, p: Mapping[str, Tensor] | None) -> dict[str, Tensor]:
        if p is not None:
            return dict(p)
        return {k: ad.constant(v) for k, v in self.params.items()}

    def forward(self, x: Tensor, cond: Tensor | None = None, p=None) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, z: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def check(self):
        """Raise if the layer's invariants are violated."""


class SignalDependentLayer(Layer):
    """Elementwise scaling of the high band by a positive function of the low band.

    ``z = x * sqrt(softplus(beta1) * x_low + softplus(beta2))``, per channel.
    """

    kind = "sdl"
    conditional = True

    def __init__(self, channels: int, identity=False):
        super().__init__()
        # softplus(-50) ~ 2e-22 gives scale == 1 to float64 precision
        b1 = -50.0 if identity else -4.0
        self.params = {
            "beta1": np.full(channels, b1),
            "beta2": np.full(channels, math.log(math.e - 1.0)),
        }

    def scale_sq(self, cond: Tensor, p: Mapping[str, Tensor]) -> Tensor:
        shape = cond.shape
        a = channel_view(ad.softplus(p["beta1"]), shape)
        b = channel_view(ad.softplus(p["beta2"]), shape)
        return a * cond + b

    def forward(self, x, cond=None, p=None):
        if cond is None:
            raise ValueError("signal-dependent layer needs the low-frequency component")
        x, cond = _as_tensor(x), _as_tensor(cond)
        if x.shape != cond.shape:
            raise ad.ShapeError(f"high {x.shape} and low {cond.shape} shapes differ")
        p = self.tensors(p)
        s2 = self.scale_sq(cond, p)
        if not np.all(s2.data > 0):
            raise AssertionError("signal-dependent scale must be strictly positive")
        logs = ad.affine(ad.log(s2), 0.5, 0.0)
        return x * ad.exp(logs), per_sample_sum(logs)

    def inverse(self, z, cond=None):
        if cond is None:
            raise ValueError("signal-dependent layer needs the low-frequency component")
        with ad.no_grad():
            s2 = self.scale_sq(ad.constant(cond), self.tensors(None)).data
        return z / np.sqrt(s2)


class Conv1x1(Layer):
    """Invertible 1x1 convolution, ``W = P L U`` with a fixed permutation P."""

    kind = "conv1x1"

    def __init__(self, channels: int, rng: np.random.Generator | None = None, identity=False):
        super().__init__()
        c = channels
        if identity or rng is None:
            perm, lower, upper = np.eye(c), np.eye(c), np.eye(c)
        else:
            q, _ = np.linalg.qr(rng.standard_normal((c, c)))
            perm, lower, upper = scipy.linalg.lu(q)
        diag = np.diag(upper)
        self.params = {
            "lower": np.tril(lower, -1),
            "upper": np.triu(upper, 1),
            "log_s": np.log(np.abs(diag)),
        }
        self.buffers = {"perm": perm, "sign": np.sign(diag)}
        c = channels
        self._lmask = np.tril(np.ones((c, c)), -1)
        self._umask = np.triu(np.ones((c, c)), 1)

    @property
    def channels(self) -> int:
        return self.params["log_s"].shape[0]

    def weight(self, p: Mapping[str, Tensor]) -> Tensor:
        c = self.channels
        eye = ad.constant(np.eye(c))
        lower = p["lower"] * ad.constant(self._lmask) + eye
        diag = ad.constant(np.diag(self.buffers["sign"])) * ad.broadcast_to(
            ad.reshape(ad.exp(p["log_s"]), (1, c)), (c, c)) * eye
        upper = p["upper"] * ad.constant(self._umask) + diag
        return ad.constant(self.buffers["perm"]) @ (lower @ upper)

    def weight_matrix(self) -> np.ndarray:
        with ad.no_grad():
            return self.weight(self.tensors(None)).data

    def log_abs_det(self) -> float:
        return float(np.sum(self.params["log_s"]))

    def check(self):
        if self.log_abs_det() < math.log(1e-12):
            raise ValueError("1x1 mixing matrix is numerically singular (|det| < 1e-12)")

    def forward(self, x, cond=None, p=None):
        x = _as_tensor(x)
        c = self.channels
        if x.ndim != 4 or x.shape[1] != c:
            raise ad.ShapeError(f"expected (N, {c}, H, W) input, got {x.shape}")
        self.check()
        p = self.tensors(p)
        w = ad.reshape(self.weight(p), (c, c, 1, 1))
        n, _, h, wd = x.shape
        logdet = ad.affine(ad.sum(p["log_s"]), float(h * wd), 0.0)
        return ad.conv2d(x, w), ad.broadcast_to(ad.reshape(logdet, (1,)), (n,))

    def inverse(self, z, cond=None):
        self.check()
        w_inv = np.linalg.inv(self.weight_matrix())
        return np.einsum("oc,nchw->nohw", w_inv, z)


def checkerboard(height: int, width: int, parity: int) -> np.ndarray:
    """Binary (1, 1, H, W) mask; 1 marks positions passed through unchanged."""
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return ((ii + jj) % 2 == parity % 2).astype(np.float64)[None, None]


def _conv_init(rng, cout, cin, k, zero=False):
    if zero:
        return np.zeros((cout, cin, k, k))
    return rng.standard_normal((cout, cin, k, k)) * math.sqrt(1.0 / (cin * k * k))


class GatedResNet:
    """Conditioner network mapping masked input (+ conditioning) to (s, t).

    A 3x3 input conv, ``blocks`` gated residual blocks, and a zero-initialized
    3x3 output head producing scale and shift logits.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int, blocks: int,
                 rng: np.random.Generator):
        self.out_channels = out_channels
        self.blocks = blocks
        self.hidden = hidden
        p = {
            "in.w": _conv_init(rng, hidden, in_channels, 3),
            "in.b": np.zeros(hidden),
        }
        for i in range(blocks):
            p[f"block{i}.conv1.w"] = _conv_init(rng, hidden, hidden, 3)
            p[f"block{i}.conv1.b"] = np.zeros(hidden)
            p[f"block{i}.conv2.w"] = _conv_init(rng, 2 * hidden, hidden, 3) * 0.1
            p[f"block{i}.conv2.b"] = np.zeros(2 * hidden)
        p["out.w"] = _conv_init(rng, 2 * out_channels, hidden, 3, zero=True)
        p["out.b"] = np.zeros(2 * out_channels)
        p["s_scale"] = np.ones(out_channels)
        self.params = p

    @staticmethod
    def _conv(x, w, b):
        y = ad.conv2d(x, w)
        return y + channel_view(b, y.shape)

    def __call__(self, x: Tensor, cond: Tensor | None, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
        inp = x if cond is None else ad.concat([x, cond], axis=1)
        h = self._conv(inp, p["in.w"], p["in.b"])
        hid = self.hidden
        for i in range(self.blocks):
            a = ad.tanh(self._conv(ad.tanh(h), p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"]))
            c = self._conv(a, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"])
            h = h + c[:, :hid] * ad.sigmoid(c[:, hid:])
        out = self._conv(ad.tanh(h), p["out.w"], p["out.b"])
        co = self.out_channels
        s = channel_view(p["s_scale"], (out.shape[0], co) + out.shape[2:]) * ad.tanh(out[:, :co])
        return s, out[:, co:]


class Coupling(Layer):
    """Affine coupling over a checkerboard mask, optionally conditioned."""

    kind = "coupling"

    def __init__(self, channels: int, height: int, width: int, parity: int, hidden: int,
                 blocks: int, rng: np.random.Generator, cond_channels: int = 0):
        super().__init__()
        self.conditional = cond_channels > 0
        self.parity = parity % 2
        self.mask = checkerboard(height, width, parity)
        self.net = GatedResNet(channels + cond_channels, channels, hidden, blocks, rng)
        self.params = self.net.params
        self.buffers = {"mask": self.mask}

    def conditioner(self, masked_x, cond=None, p=None):
        return self.net(_as_tensor(masked_x), None if cond is None else _as_tensor(cond), self.tensors(p))

    def _cond(self, cond):
        if self.conditional and cond is None:
            raise ValueError("conditional coupling needs the conditioning input")
        return _as_tensor(cond) if self.conditional else None

    def _masks(self, shape):
        if shape[-2:] != self.mask.shape[-2:]:
            raise ad.ShapeError(f"mask {self.mask.shape[-2:]} does not match input {shape}")
        m = np.broadcast_to(self.mask, shape)
        return ad.constant(m), ad.constant(1.0 - m)

    def forward(self, x, cond=None, p=None):
        x = _as_tensor(x)
        keep, act = self._masks(x.shape)
        s, t = self.net(x * keep, self._cond(cond), self.tensors(p))
        if s.shape != x.shape:
            raise ad.ShapeError(f"conditioner produced {s.shape} for input {x.shape}")
        s, t = s * act, t * act
        y = x * keep + (x * ad.exp(s) + t) * act
        return y, per_sample_sum(s)

    def inverse(self, z, cond=None):
        with ad.no_grad():
            zt = ad.constant(z)
            keep, act = self._masks(zt.shape)
            s, t = self.net(zt * keep, self._cond(cond), self.tensors(None))
            s, t = (s * act).data, (t * act).data
        m = keep.data
        return z * m + (z - t) * np.exp(-s) * (1.0 - m)
