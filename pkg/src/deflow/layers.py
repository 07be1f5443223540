"""Invertible flow layers: forward, exact inverse, analytic log-determinant.

Activations travel as :class:`LayerIO`: an [N,C,H,W] tensor plus a
per-sample accumulated log|det| and optional conditioning features.  Every
layer guarantees that inverse(forward(io)) restores the activation to
64-bit round-trip accuracy, and that the accumulated logdet is the exact
analytic log-determinant of the applied map.

A flow step applies actnorm, then the invertible 1x1 convolution, then the
conditional affine coupling and the affine injector in their inverted form
(the encode direction runs those two layers' inverse maps, with the logdet
signs flipped accordingly).  Exactness is enforced by round-trip and dense
Jacobian tests rather than by convention.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RandomStream

# bound on |log s| for coupling/injector scales: s = exp(ALPHA * tanh(raw))
ALPHA = 2.0


class LayerIO:
    """Activation batch with accumulated per-sample log|det| and condition."""

    def __init__(self, act: Tensor, logdet: Tensor | None = None,
                 cond: Tensor | None = None):
        self.act = act
        if logdet is None:
            logdet = Tensor(np.zeros(act.shape[0]))
        self.logdet = logdet
        self.cond = cond

    def with_act(self, act: Tensor, logdet: Tensor | None = None) -> "LayerIO":
        return LayerIO(act, self.logdet if logdet is None else logdet, self.cond)


def _require_cond(io: LayerIO, layer: str) -> Tensor:
    if io.cond is None:
        raise ValueError(f"{layer} requires condition features, got none")
    if io.cond.shape[0] != io.act.shape[0] or io.cond.shape[2:] != io.act.shape[2:]:
        raise ValueError(
            f"{layer}: condition {io.cond.shape} not aligned with "
            f"activation {io.act.shape}"
        )
    return io.cond


class Actnorm:
    """Per-channel affine map out = exp(log_scale) * act + bias.

    Parameters are data-initialized on the first forward batch so that the
    output has zero mean and unit variance per channel.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.log_scale = Tensor(np.zeros(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.initialized = False

    def parameters(self):
        return [("log_scale", self.log_scale), ("bias", self.bias)]

    def init_from_batch(self, act: np.ndarray) -> None:
        mean = act.mean(axis=(0, 2, 3))
        std = act.std(axis=(0, 2, 3))
        std = np.maximum(std, 1e-8)
        self.log_scale.data[:] = -np.log(std)
        self.bias.data[:] = -mean / std
        self.initialized = True

    def _per_channel(self, t: Tensor) -> Tensor:
        return t.reshape((1, self.channels, 1, 1))

    def _logdet_term(self, io: LayerIO) -> Tensor:
        h, w = io.act.shape[2], io.act.shape[3]
        return self.log_scale.sum() * float(h * w)

    def forward(self, io: LayerIO) -> LayerIO:
        if not self.initialized:
            self.init_from_batch(io.act.data)
        out = io.act * self._per_channel(self.log_scale.exp()) \
            + self._per_channel(self.bias)
        return io.with_act(out, io.logdet + self._logdet_term(io))

    def inverse(self, io: LayerIO) -> LayerIO:
        if not self.initialized:
            raise RuntimeError("actnorm inverse before data-dependent init")
        out = (io.act - self._per_channel(self.bias)) \
            * self._per_channel((-self.log_scale).exp())
        return io.with_act(out, io.logdet - self._logdet_term(io))


class InvConv1x1:
    """Invertible 1x1 convolution in LU-decomposed parametrization.

    W = P @ L @ (U + diag(sign * exp(log_diag))) with a permutation P fixed
    at construction, unit-lower L and strictly-upper U free, so W stays
    invertible by construction and log|det W| = sum(log_diag).
    """

    def __init__(self, channels: int, stream: RandomStream):
        self.channels = channels
        c = channels
        perm = stream.spawn("perm").permutation(c)
        p = np.zeros((c, c))
        p[perm, np.arange(c)] = 1.0  # column j of identity lands on row perm[j]
        self._perm_matrix = p
        signs = np.where(stream.spawn("sign").bernoulli(0.5, (c,)), 1.0, -1.0)
        self._diag_sign = signs
        self.lower = Tensor(np.zeros((c, c)), requires_grad=True)
        self.upper = Tensor(np.zeros((c, c)), requires_grad=True)
        self.log_diag = Tensor(np.zeros(c), requires_grad=True)
        self._mask_low = np.tril(np.ones((c, c)), -1)
        self._mask_up = np.triu(np.ones((c, c)), 1)
        self._eye = np.eye(c)

    def parameters(self):
        return [("lower", self.lower), ("upper", self.upper),
                ("log_diag", self.log_diag)]

    def weight(self) -> Tensor:
        l = self.lower * Tensor(self._mask_low) + Tensor(self._eye)
        diag = Tensor(self._eye) * (Tensor(self._diag_sign) * self.log_diag.exp())
        u = self.upper * Tensor(self._mask_up) + diag
        return Tensor(self._perm_matrix) @ l @ u

    def _logdet_term(self, io: LayerIO) -> Tensor:
        h, w = io.act.shape[2], io.act.shape[3]
        return self.log_diag.sum() * float(h * w)

    @staticmethod
    def _per_location(act: Tensor):
        n, c, h, w = act.shape
        flat = act.transpose((0, 2, 3, 1)).reshape((n * h * w, c))
        return flat, (n, c, h, w)

    @staticmethod
    def _from_locations(flat: Tensor, shape) -> Tensor:
        n, c, h, w = shape
        return flat.reshape((n, h, w, c)).transpose((0, 3, 1, 2))

    def forward(self, io: LayerIO) -> LayerIO:
        flat, shape = self._per_location(io.act)
        out = flat @ self.weight().transpose((1, 0))
        return io.with_act(self._from_locations(out, shape),
                           io.logdet + self._logdet_term(io))

    def inverse(self, io: LayerIO) -> LayerIO:
        # evaluation path: permutation transpose then two triangular solves
        n, c, h, w = io.act.shape
        rhs = io.act.data.transpose(0, 2, 3, 1).reshape(-1, c).T  # [C, NHW]
        rhs = self._perm_matrix.T @ rhs
        l = self._mask_low * self.lower.data + self._eye
        u = self._mask_up * self.upper.data \
            + self._eye * (self._diag_sign * np.exp(self.log_diag.data))
        z = _solve_lower_unit(l, rhs)
        x = _solve_upper(u, z)
        out = Tensor(x.T.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        return io.with_act(out, io.logdet - self._logdet_term(io))


def _solve_lower_unit(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution for unit-lower-triangular l, matrix rhs."""
    x = b.copy()
    for i in range(l.shape[0]):
        x[i] -= l[i, :i] @ x[:i]
    return x


def _solve_upper(u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution for upper-triangular u, matrix rhs."""
    n = u.shape[0]
    x = b.copy()
    for i in range(n - 1, -1, -1):
        x[i] -= u[i, i + 1:] @ x[i + 1:]
        x[i] /= u[i, i]
    return x


class Subnet:
    """conv3x3 -> tanh -> conv3x3 scale/bias network.

    The final layer is zero-initialized so the owning coupling or injector
    starts as the identity map.
    """

    def __init__(self, c_in: int, hidden: int, c_out: int, stream: RandomStream):
        std = 1.0 / np.sqrt(9.0 * c_in)
        self.kernel1 = Tensor(stream.spawn("k1").normal((hidden, c_in, 3, 3), std=std),
                              requires_grad=True)
        self.bias1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.kernel2 = Tensor(np.zeros((c_out, hidden, 3, 3)), requires_grad=True)
        self.bias2 = Tensor(np.zeros(c_out), requires_grad=True)

    def parameters(self):
        return [("kernel1", self.kernel1), ("bias1", self.bias1),
                ("kernel2", self.kernel2), ("bias2", self.bias2)]

    def __call__(self, x: Tensor) -> Tensor:
        hidden = ad.conv2d(x, self.kernel1, self.bias1).tanh()
        return ad.conv2d(hidden, self.kernel2, self.bias2)


def _scale_and_bias(raw: Tensor, channels: int):
    """Split subnet output into (log_scale, bias); scale bounded via tanh."""
    s_raw = ad.narrow(raw, 1, 0, channels)
    bias = ad.narrow(raw, 1, channels, channels)
    log_s = s_raw.tanh() * ALPHA
    return log_s, bias


class ConditionalAffineCoupling:
    """Transforms the second channel half by a scale/bias computed from the
    first half and the condition features."""

    def __init__(self, channels: int, cond_channels: int, hidden: int,
                 stream: RandomStream):
        if channels % 2:
            raise ValueError(f"coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.half = channels // 2
        self.subnet = Subnet(self.half + cond_channels, hidden, channels, stream)

    def parameters(self):
        return [("subnet." + n, t) for n, t in self.subnet.parameters()]

    def _split(self, act: Tensor):
        return (ad.narrow(act, 1, 0, self.half),
                ad.narrow(act, 1, self.half, self.half))

    def _transform(self, a1: Tensor, cond: Tensor):
        raw = self.subnet(ad.concat([a1, cond], axis=1))
        return _scale_and_bias(raw, self.half)

    def forward(self, io: LayerIO) -> LayerIO:
        cond = _require_cond(io, "affine coupling")
        a1, a2 = self._split(io.act)
        log_s, bias = self._transform(a1, cond)
        out = ad.concat([a1, a2 * log_s.exp() + bias], axis=1)
        return io.with_act(out, io.logdet + log_s.sum(axis=(1, 2, 3)))

    def inverse(self, io: LayerIO) -> LayerIO:
        cond = _require_cond(io, "affine coupling")
        a1, a2 = self._split(io.act)
        log_s, bias = self._transform(a1, cond)
        out = ad.concat([a1, (a2 - bias) * (-log_s).exp()], axis=1)
        return io.with_act(out, io.logdet - log_s.sum(axis=(1, 2, 3)))


class AffineInjector:
    """Per-entry scale and bias for every channel, computed from the
    condition features alone; exactly invertible given the same condition."""

    def __init__(self, channels: int, cond_channels: int, hidden: int,
                 stream: RandomStream):
        self.channels = channels
        self.subnet = Subnet(cond_channels, hidden, 2 * channels, stream)

    def parameters(self):
        return [("subnet." + n, t) for n, t in self.subnet.parameters()]

    def _transform(self, cond: Tensor):
        return _scale_and_bias(self.subnet(cond), self.channels)

    def forward(self, io: LayerIO) -> LayerIO:
        cond = _require_cond(io, "affine injector")
        log_s, bias = self._transform(cond)
        out = io.act * log_s.exp() + bias
        return io.with_act(out, io.logdet + log_s.sum(axis=(1, 2, 3)))

    def inverse(self, io: LayerIO) -> LayerIO:
        cond = _require_cond(io, "affine injector")
        log_s, bias = self._transform(cond)
        out = (io.act - bias) * (-log_s).exp()
        return io.with_act(out, io.logdet - log_s.sum(axis=(1, 2, 3)))


def squeeze(io: LayerIO) -> LayerIO:
    """2x2 space-to-depth: [N,C,H,W] -> [N,4C,H/2,W/2], volume preserving.

    Output channel 4c+k holds input channel c at block offset k, ordered
    top-left, top-right, bottom-left, bottom-right.
    """
    n, c, h, w = io.act.shape
    if h % 2 or w % 2:
        raise ValueError(f"squeeze needs even spatial extents, got {h}x{w}")
    out = io.act.reshape((n, c, h // 2, 2, w // 2, 2)) \
        .transpose((0, 1, 3, 5, 2, 4)) \
        .reshape((n, 4 * c, h // 2, w // 2))
    return io.with_act(out)


def unsqueeze(io: LayerIO) -> LayerIO:
    n, c, h, w = io.act.shape
    if c % 4:
        raise ValueError(f"unsqueeze needs channels divisible by 4, got {c}")
    out = io.act.reshape((n, c // 4, 2, 2, h, w)) \
        .transpose((0, 1, 4, 2, 5, 3)) \
        .reshape((n, c // 4, 2 * h, 2 * w))
    return io.with_act(out)


def split(io: LayerIO):
    """First channel half continues through the flow; the second half is
    emitted as a latent group."""
    n, c, h, w = io.act.shape
    if c % 2:
        raise ValueError(f"split needs an even channel count, got {c}")
    kept = ad.narrow(io.act, 1, 0, c // 2)
    latent = ad.narrow(io.act, 1, c // 2, c // 2)
    return io.with_act(kept), latent


def unsplit(io: LayerIO, latent: Tensor) -> LayerIO:
    return io.with_act(ad.concat([io.act, latent], axis=1))


class FlowStep:
    """Actnorm, 1x1 convolution, then coupling and injector in inverted form."""

    def __init__(self, channels: int, cond_channels: int, hidden: int,
                 stream: RandomStream):
        self.actnorm = Actnorm(channels)
        self.inv_conv = InvConv1x1(channels, stream.spawn("conv"))
        self.coupling = ConditionalAffineCoupling(
            channels, cond_channels, hidden, stream.spawn("coupling"))
        self.injector = AffineInjector(
            channels, cond_channels, hidden, stream.spawn("injector"))

    def parameters(self):
        out = []
        for prefix, layer in (("actnorm", self.actnorm),
                              ("inv_conv", self.inv_conv),
                              ("coupling", self.coupling),
                              ("injector", self.injector)):
            out += [(f"{prefix}.{n}", t) for n, t in layer.parameters()]
        return out

    def forward(self, io: LayerIO) -> LayerIO:
        io = self.actnorm.forward(io)
        io = self.inv_conv.forward(io)
        io = self.coupling.inverse(io)
        io = self.injector.inverse(io)
        return io

    def inverse(self, io: LayerIO) -> LayerIO:
        io = self.injector.forward(io)
        io = self.coupling.forward(io)
        io = self.inv_conv.inverse(io)
        io = self.actnorm.inverse(io)
        return io
