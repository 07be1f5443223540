"""The full degradation model: flow stack, latent shifts, conditioning.

The flow is a multi-level composition: each level squeezes 2x2 blocks into
channels, runs a configurable number of flow steps, and (except for the
last level) splits off half the channels as a latent group.  Encoding a
batch yields the latent groups plus the per-sample log|det|; the two domain
densities differ only in the latent base distribution (standard normal for
the clean domain, mean/covariance-shifted for the degraded domain).

Degraded samples are drawn by encoding a clean image, adding the sampled
latent shift scaled by the temperature, and decoding with the same
conditioning features.
"""

from __future__ import annotations

import math

import numpy as np

from . import layers, shift as shift_mod
from .autodiff import Tensor
from .conditioning import ConditionEncoder, ConditionSpec, encode_condition, \
    make_condition
from .layers import LayerIO
from .rng import RandomStream

LN_2PI = math.log(2.0 * math.pi)


class DeFlowModel:
    def __init__(self, in_channels: int = 3, levels: int = 2, flow_steps: int = 4,
                 hidden_width: int = 64, cond_spec: ConditionSpec | None = None,
                 shift_mode: str = "full", seed: int = 0):
        if levels < 1:
            raise ValueError("need at least one level")
        self.in_channels = in_channels
        self.levels = levels
        self.flow_steps = flow_steps
        self.hidden_width = hidden_width
        self.cond_spec = cond_spec if cond_spec is not None else ConditionSpec()
        self.shift_mode = shift_mode
        self.seed = seed

        stream = RandomStream(seed).spawn("model-init")
        self.encoder = ConditionEncoder(in_channels, hidden_width,
                                        stream.spawn("cond-encoder"))
        self.level_steps = []
        self.group_channels = []
        channels = in_channels
        for lvl in range(levels):
            channels *= 4
            steps = [
                layers.FlowStep(channels, hidden_width, hidden_width,
                                stream.spawn("step", lvl, k))
                for k in range(flow_steps)
            ]
            self.level_steps.append(steps)
            if lvl < levels - 1:
                self.group_channels.append(channels // 2)
                channels //= 2
        self.group_channels.append(channels)

        latent_mode = shift_mod.DIAGONAL if shift_mode == "diagonal" else shift_mod.FULL
        self.shifts = [shift_mod.LatentShift(c, latent_mode)
                       for c in self.group_channels]

    # -- parameter bookkeeping -------------------------------------------------

    def parameters(self):
        """All named parameters: flow, shifts, condition encoder."""
        return (self.flow_parameters() + self.shift_parameters()
                + self.encoder_parameters())

    def flow_parameters(self):
        out = []
        for lvl, steps in enumerate(self.level_steps):
            for k, step in enumerate(steps):
                out += [(f"flow.level{lvl}.step{k}.{n}", t)
                        for n, t in step.parameters()]
        return out

    def shift_parameters(self):
        out = []
        for g, s in enumerate(self.shifts):
            out += [(f"shift.group{g}.{n}", t) for n, t in s.parameters()]
        return out

    def encoder_parameters(self):
        return [(f"cond.{n}", t) for n, t in self.encoder.parameters()]

    def trainable_parameters(self):
        """Parameter selection honoring the shift mode."""
        params = self.flow_parameters() + self.encoder_parameters()
        if self.shift_mode != "frozen-zero":
            params += self.shift_parameters()
        return params

    @property
    def actnorm_initialized(self) -> bool:
        return all(step.actnorm.initialized
                   for steps in self.level_steps for step in steps)

    # -- conditioning ------------------------------------------------------------

    def level_shapes(self, h: int, w: int):
        return [(h // 2 ** (lvl + 1), w // 2 ** (lvl + 1))
                for lvl in range(self.levels)]

    def input_extents_valid(self, h: int, w: int) -> bool:
        div = 2 ** self.levels
        return h % div == 0 and w % div == 0

    def condition_features(self, img: np.ndarray, stream: RandomStream):
        """Raw conditioning image -> per-level feature tensors.

        With conditioning disabled the features are exactly zero (the
        encoder is bypassed, so trained biases cannot leak through).
        """
        n, _, h, w = img.shape
        shapes = self.level_shapes(h, w)
        if self.cond_spec.disabled:
            return [Tensor(np.zeros((n, self.hidden_width, lh, lw)))
                    for lh, lw in shapes]
        raw = make_condition(img, self.cond_spec, stream)
        return encode_condition(raw, self.encoder, shapes)

    # -- flow passes -------------------------------------------------------------

    def encode(self, x, cond_features):
        """x -> (latent groups, per-sample logdet) given condition features."""
        act = x if isinstance(x, Tensor) else Tensor(x)
        n, c, h, w = act.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {c}")
        if not self.input_extents_valid(h, w):
            raise ValueError(
                f"spatial extents {h}x{w} must be divisible by {2 ** self.levels}"
            )
        if cond_features is None:
            raise ValueError("encode requires condition features (may be zeros)")
        io = LayerIO(act)
        groups = []
        for lvl, steps in enumerate(self.level_steps):
            io = layers.squeeze(io)
            io.cond = cond_features[lvl]
            for step in steps:
                io = step.forward(io)
            if lvl < self.levels - 1:
                io, latent = layers.split(io)
                groups.append(latent)
        groups.append(io.act)
        return groups, io.logdet

    def decode(self, groups, cond_features) -> Tensor:
        """Exact inverse of encode for the same condition features."""
        io = LayerIO(groups[-1])
        for lvl in range(self.levels - 1, -1, -1):
            if lvl < self.levels - 1:
                io = layers.unsplit(io, groups[lvl])
            io.cond = cond_features[lvl]
            for step in reversed(self.level_steps[lvl]):
                io = step.inverse(io)
            io = layers.unsqueeze(io)
        return io.act

    # -- objectives ----------------------------------------------------------------

    def marginal_nll(self, batch_x: np.ndarray, batch_y: np.ndarray,
                     stream: RandomStream, cond_x: np.ndarray | None = None,
                     cond_y: np.ndarray | None = None):
        """Mean NLL of the clean batch plus mean NLL of the degraded batch,
        each conditioned on its own conditioning image.

        cond_x/cond_y are the images the conditioning is computed from; they
        default to the flow inputs and differ only when the flow runs on
        channel-normalized data (the conditioning keeps the [0,1] pixel
        scale its noise level is calibrated for).

        Returns (loss, nll_x, nll_y) as scalar tensors.
        """
        if batch_x.shape[0] == 0 or batch_y.shape[0] == 0:
            raise ValueError("marginal_nll needs nonempty batches")
        feats_x = self.condition_features(
            batch_x if cond_x is None else cond_x, stream.spawn("hx"))
        zx, logdet_x = self.encode(batch_x, feats_x)
        nll_x = -(shift_mod.logp_zx(zx) + logdet_x).mean()
        feats_y = self.condition_features(
            batch_y if cond_y is None else cond_y, stream.spawn("hy"))
        zy, logdet_y = self.encode(batch_y, feats_y)
        nll_y = -(shift_mod.logp_zy(zy, self.shifts) + logdet_y).mean()
        return nll_x + nll_y, nll_x, nll_y

    def paired_cond_nll(self, batch_x: np.ndarray, batch_y: np.ndarray,
                        stream: RandomStream) -> Tensor:
        """Mean conditional NLL of index-aligned pairs: the degraded side's
        logdet plus the latent conditional density."""
        if batch_x.shape[0] != batch_y.shape[0]:
            raise ValueError(
                f"paired batches must align, got {batch_x.shape[0]} vs "
                f"{batch_y.shape[0]} samples"
            )
        cond_x = self.condition_features(batch_x, stream.spawn("hx"))
        zx, _ = self.encode(batch_x, cond_x)
        cond_y = self.condition_features(batch_y, stream.spawn("hy"))
        zy, logdet_y = self.encode(batch_y, cond_y)
        logp = shift_mod.logp_cond_latent(zy, zx, self.shifts)
        return -(logp + logdet_y).mean()

    # -- sampling --------------------------------------------------------------------

    def degrade(self, x: np.ndarray, tau: float, stream: RandomStream,
                cond_img: np.ndarray | None = None) -> np.ndarray:
        """Sample degraded versions: encode, add the scaled latent shift,
        decode with the same conditioning features."""
        cond = self.condition_features(x if cond_img is None else cond_img,
                                       stream.spawn("h"))
        groups, _ = self.encode(x, cond)
        shapes = [g.shape for g in groups]
        u = shift_mod.sample_u(self.shifts, shapes, tau, stream.spawn("u"))
        shifted = [Tensor(g.data + ug) for g, ug in zip(groups, u)]
        return self.decode(shifted, cond).data

    def estimate_shift_posthoc(self, batch_x: np.ndarray, batch_y: np.ndarray,
                               stream: RandomStream,
                               cond_x: np.ndarray | None = None,
                               cond_y: np.ndarray | None = None) -> None:
        """Infer the domain shift from latent statistics of the two domains
        (used after training with the shift frozen at zero)."""
        feats_x = self.condition_features(
            batch_x if cond_x is None else cond_x, stream.spawn("hx"))
        zx, _ = self.encode(batch_x, feats_x)
        feats_y = self.condition_features(
            batch_y if cond_y is None else cond_y, stream.spawn("hy"))
        zy, _ = self.encode(batch_y, feats_y)
        shift_mod.estimate_shift_from_latents(
            self.shifts, [g.data for g in zx], [g.data for g in zy])

    # -- config echo -------------------------------------------------------------------

    def architecture(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "levels": self.levels,
            "flow_steps": self.flow_steps,
            "hidden_width": self.hidden_width,
            "shift_mode": self.shift_mode,
            "cond_down_factor": self.cond_spec.down_factor,
            "cond_noise_sigma": self.cond_spec.noise_sigma,
            "cond_disabled": self.cond_spec.disabled,
        }
