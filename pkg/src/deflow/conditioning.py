"""Domain-invariant conditioning: downsample-and-noise, plus the encoder.

The conditioning image h = bicubic_downsample(x, f) + noise carries scene
content while hiding which domain the input came from (stochastic
degradations live in the high frequencies that the downsampling removes;
the added noise masks what little leaks through).  A small jointly-trained
convolutional encoder turns the raw conditioning image into feature maps,
which are nearest-neighbor resized to match each flow level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RandomStream

ALLOWED_FACTORS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ConditionSpec:
    down_factor: int = 4
    noise_sigma: float = 0.03
    disabled: bool = False

    def __post_init__(self):
        if self.down_factor not in ALLOWED_FACTORS:
            raise ValueError(
                f"down_factor must be one of {ALLOWED_FACTORS}, "
                f"got {self.down_factor}"
            )
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic interpolation kernel (a = -0.5)."""
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (a + 2.0) * t[near] ** 3 - (a + 3.0) * t[near] ** 2 + 1.0
    out[far] = a * (t[far] ** 3 - 5.0 * t[far] ** 2 + 8.0 * t[far] - 4.0)
    return out


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    period = 2 * n - 2 if n > 1 else 1
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _downsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-stochastic matrix applying the antialiased bicubic kernel along
    one axis; output sample o is centered at input position f*o + (f-1)/2."""
    n_out = n_in // factor
    center = (factor - 1) / 2.0
    # taps must cover the full kernel support |j - center| < 2f
    lo = math.floor(center - 2 * factor) + 1
    hi = math.ceil(center + 2 * factor) - 1
    taps = np.arange(lo, hi + 1)
    weights = _cubic((taps - center) / factor) / factor
    weights /= weights.sum()
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = _reflect_index(o * factor + taps, n_in)
        np.add.at(mat[o], src, weights)
    return mat


def bicubic_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Separable bicubic downsampling of [N,C,H,W] (reflect-padded borders)."""
    img = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return img.copy()
    h, w = img.shape[-2], img.shape[-1]
    if h % factor or w % factor:
        raise ValueError(
            f"down factor {factor} does not divide spatial extents {h}x{w}"
        )
    dh = _downsample_matrix(h, factor)
    dw = _downsample_matrix(w, factor)
    tmp = np.einsum("oh,...hw->...ow", dh, img)
    return np.einsum("pw,...ow->...op", dw, tmp)


def make_condition(img: np.ndarray, spec: ConditionSpec,
                   stream: RandomStream) -> np.ndarray:
    """Raw conditioning image: downsample plus i.i.d. Gaussian noise
    (resampled per call), or zeros when conditioning is disabled."""
    img = np.asarray(img, dtype=np.float64)
    shape = img.shape[:-2] + (img.shape[-2] // spec.down_factor,
                              img.shape[-1] // spec.down_factor)
    if spec.disabled:
        return np.zeros(shape)
    out = bicubic_downsample(img, spec.down_factor)
    if spec.noise_sigma > 0:
        out = out + stream.normal(out.shape, std=spec.noise_sigma)
    return out


class ConditionEncoder:
    """Three 3x3 convolutions with tanh between, mapping the raw conditioning
    image to feature maps of the configured hidden width."""

    def __init__(self, in_channels: int, hidden: int, stream: RandomStream):
        self.in_channels = in_channels
        self.hidden = hidden

        def kernel(c_in, c_out, tag):
            std = 1.0 / np.sqrt(9.0 * c_in)
            return Tensor(stream.spawn(tag).normal((c_out, c_in, 3, 3), std=std),
                          requires_grad=True)

        self.kernel1 = kernel(in_channels, hidden, "k1")
        self.bias1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.kernel2 = kernel(hidden, hidden, "k2")
        self.bias2 = Tensor(np.zeros(hidden), requires_grad=True)
        self.kernel3 = kernel(hidden, hidden, "k3")
        self.bias3 = Tensor(np.zeros(hidden), requires_grad=True)

    def parameters(self):
        return [("kernel1", self.kernel1), ("bias1", self.bias1),
                ("kernel2", self.kernel2), ("bias2", self.bias2),
                ("kernel3", self.kernel3), ("bias3", self.bias3)]

    def __call__(self, raw: Tensor) -> Tensor:
        x = ad.conv2d(raw, self.kernel1, self.bias1).tanh()
        x = ad.conv2d(x, self.kernel2, self.bias2).tanh()
        return ad.conv2d(x, self.kernel3, self.bias3)


def encode_condition(raw: np.ndarray, encoder: ConditionEncoder,
                     level_shapes) -> list:
    """Per-level condition features, spatially aligned by nearest-neighbor
    resizing to each flow level's extents."""
    feat = encoder(Tensor(raw))
    out = []
    for h, w in level_shapes:
        resized = ad.nn_resize(feat, (h, w))
        if resized.shape[2:] != (h, w):
            raise RuntimeError(
                f"condition alignment failed: got {resized.shape[2:]}, "
                f"need {(h, w)}"
            )
        out.append(resized)
    return out
