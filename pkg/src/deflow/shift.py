"""Gaussian domain shift in latent space.

The degraded domain's latent is the clean domain's latent plus an
independent Gaussian u ~ N(mu, M M^T), with one (mu, M) pair shared across
all spatial locations of a latent group.  Each split output of the flow
plus the final latent gets its own shift, so every latent dimension is
shiftable.  Densities are computed with a fresh dense factorization of the
small per-group covariance on every call; nothing is cached.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RandomStream

LN_2PI = math.log(2.0 * math.pi)

FULL = "full"
DIAGONAL = "diagonal"


class LatentShift:
    """Shift parameters for one latent group.

    mode "full" keeps a dense factor M with covariance M M^T; mode
    "diagonal" keeps a vector m with covariance diag(m**2).  Both start at
    exactly zero so the two domain densities coincide at initialization.
    A covariance that is exactly zero is a stationary point of the
    likelihood (the density depends on M only through M M^T), so training
    calls ``kick`` once to break that symmetry.
    """

    def __init__(self, channels: int, mode: str = FULL):
        if mode not in (FULL, DIAGONAL):
            raise ValueError(f"unknown shift mode {mode!r}")
        self.channels = channels
        self.mode = mode
        self.mu = Tensor(np.zeros(channels), requires_grad=True)
        shape = (channels, channels) if mode == FULL else (channels,)
        self.cov_factor = Tensor(np.zeros(shape), requires_grad=True)

    def parameters(self):
        return [("mu", self.mu), ("cov_factor", self.cov_factor)]

    def kick(self, stream: RandomStream, scale: float = 1e-3) -> None:
        self.cov_factor.data += stream.normal(self.cov_factor.shape, std=scale)

    def is_zero(self) -> bool:
        return not (self.mu.data.any() or self.cov_factor.data.any())

    def covariance(self) -> np.ndarray:
        m = self.cov_factor.data
        if self.mode == FULL:
            return m @ m.T
        return np.diag(m * m)

    def set_from_moments(self, mu: np.ndarray, cov: np.ndarray) -> None:
        """Install externally estimated moments (post-hoc shift inference).

        The covariance is projected to the nearest PSD matrix and stored
        through its symmetric square root (or per-channel standard
        deviations in diagonal mode).
        """
        self.mu.data[:] = mu
        if self.mode == DIAGONAL:
            self.cov_factor.data[:] = np.sqrt(np.maximum(np.diag(cov), 0.0))
            return
        sym = 0.5 * (cov + cov.T)
        vals, vecs = np.linalg.eigh(sym)
        vals = np.maximum(vals, 0.0)
        self.cov_factor.data[:] = (vecs * np.sqrt(vals)) @ vecs.T


def _per_location(z: Tensor):
    n, c, h, w = z.shape
    return z.transpose((0, 2, 3, 1)).reshape((n * h * w, c)), (n, c, h, w)


def logp_zx(groups) -> Tensor:
    """Per-sample log-density of the latent groups under N(0, I)."""
    total = None
    dims = 0
    for z in groups:
        n, c, h, w = z.shape
        dims += c * h * w
        term = (z * z).sum(axis=(1, 2, 3)) * (-0.5)
        total = term if total is None else total + term
    return total + (-0.5 * LN_2PI * dims)


def logp_zy(groups, shifts) -> Tensor:
    """Per-sample log-density under N(mu, I + M M^T), location-wise."""
    total = None
    for z, shift in zip(groups, shifts):
        n, c, h, w = z.shape
        locs = h * w
        flat, _ = _per_location(z)
        centered = flat - shift.mu
        if shift.mode == FULL:
            m = shift.cov_factor
            cov = Tensor(np.eye(c)) + m @ m.transpose((1, 0))
            quad_mat = ad.matrix_inverse(cov)
            quad = (centered * (centered @ quad_mat)).sum(axis=1)
            ld = ad.logdet(cov)
        else:
            var = shift.cov_factor * shift.cov_factor + 1.0
            quad = (centered * centered / var).sum(axis=1)
            ld = var.log().sum()
        per_sample = quad.reshape((n, locs)).sum(axis=1) * (-0.5)
        const = (ld + c * LN_2PI) * (-0.5 * locs)
        term = per_sample + const
        total = term if total is None else total + term
    return total


def logp_cond_latent(zy_groups, zx_groups, shifts) -> Tensor:
    """Per-sample log-density of z_y under N(z_x + mu, M M^T).

    Requires every group's shift covariance to be nonsingular; a singular
    covariance makes the conditional density degenerate.
    """
    total = None
    for zy, zx, shift in zip(zy_groups, zx_groups, shifts):
        n, c, h, w = zy.shape
        locs = h * w
        cov_np = shift.covariance()
        try:
            np.linalg.cholesky(cov_np)
        except np.linalg.LinAlgError:
            raise ValueError(
                "latent shift covariance is singular; the conditional "
                "density is degenerate"
            ) from None
        fy, _ = _per_location(zy)
        fx, _ = _per_location(zx)
        centered = fy - fx - shift.mu
        if shift.mode == FULL:
            m = shift.cov_factor
            cov = m @ m.transpose((1, 0))
            quad = (centered * (centered @ ad.matrix_inverse(cov))).sum(axis=1)
            ld = ad.logdet(cov)
        else:
            var = shift.cov_factor * shift.cov_factor
            quad = (centered * centered / var).sum(axis=1)
            ld = var.log().sum()
        per_sample = quad.reshape((n, locs)).sum(axis=1) * (-0.5)
        term = per_sample + (ld + c * LN_2PI) * (-0.5 * locs)
        total = term if total is None else total + term
    return total


def sample_u(shifts, shapes, tau: float, stream: RandomStream):
    """Draw the latent shift tau * (M @ u_tilde + mu) independently at every
    spatial location of every group; plain arrays, evaluation only."""
    if tau < 0:
        raise ValueError(f"temperature must be nonnegative, got {tau}")
    out = []
    for g, (shift, shape) in enumerate(zip(shifts, shapes)):
        n, c, h, w = shape
        base = stream.spawn("u", g).normal((n, h, w, c))
        m = shift.cov_factor.data
        if shift.mode == FULL:
            u = base @ m.T + shift.mu.data
        else:
            u = base * m + shift.mu.data
        out.append(tau * u.transpose(0, 3, 1, 2))
    return out


def estimate_shift_from_latents(shifts, x_groups, y_groups) -> None:
    """Post-hoc domain shift: channel-wise mean and covariance of each
    domain's latents, differenced, installed into the shift parameters."""
    for shift, zx, zy in zip(shifts, x_groups, y_groups):
        fx = zx.transpose(0, 2, 3, 1).reshape(-1, zx.shape[1])
        fy = zy.transpose(0, 2, 3, 1).reshape(-1, zy.shape[1])
        mu = fy.mean(axis=0) - fx.mean(axis=0)
        cov = np.cov(fy.T, bias=True) - np.cov(fx.T, bias=True)
        cov = np.atleast_2d(cov)
        shift.set_from_moments(mu, cov)
