"""Quantitative scoring of a trained degradation model on oracle corpora.

The paired ground truth of an oracle corpus never enters training; here it
is compared against the statistics of residuals sampled from the model:
per-channel means and variances, the channel covariance, and the lag-1
spatial autocorrelation.  Held-out likelihoods complete the picture: a
model that learned the domain shift must assign the degraded domain a
strictly better density than a shift-free baseline.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ChannelStats, Corpus, dequantize_5bit
from .model import DeFlowModel
from .rng import RandomStream
from .shift import logp_zx, logp_zy


@dataclass
class ResidualStats:
    mean: np.ndarray          # per channel
    variance: np.ndarray      # per channel
    covariance: np.ndarray    # channel x channel
    lag1_autocorr: float      # spatial, averaged over axes and channels
    count: int                # pixels pooled

    def __post_init__(self):
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12):
            raise ValueError("residual covariance must be symmetric")
        if np.abs(np.diag(self.covariance) - self.variance).max() > 1e-10:
            raise ValueError("covariance diagonal must equal the variances")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def compute_residual_stats(residuals) -> ResidualStats:
    """Pool [C,H,W] residual maps into moment statistics."""
    flats = [r.reshape(r.shape[0], -1) for r in residuals]
    pooled = np.concatenate(flats, axis=1)
    cov = np.atleast_2d(np.cov(pooled, bias=True))
    num = 0.0
    den = 0.0
    for r in residuals:
        centered = r - r.mean(axis=(1, 2), keepdims=True)
        num += (centered[:, :, :-1] * centered[:, :, 1:]).sum()
        num += (centered[:, :-1, :] * centered[:, 1:, :]).sum()
        den += 2.0 * (centered ** 2).sum()
    lag1 = num / den if den > 0 else 0.0
    return ResidualStats(mean=pooled.mean(axis=1), variance=pooled.var(axis=1),
                         covariance=cov, lag1_autocorr=float(lag1),
                         count=pooled.shape[1])


def degrade_images(model: DeFlowModel, images: np.ndarray, tau: float,
                   stream: RandomStream,
                   normalization: ChannelStats | None = None) -> np.ndarray:
    """Model sampling with optional channel de/re-normalization around it.

    The conditioning is always computed from the raw [0,1]-scale image; only
    the flow input/output pass through the normalization.
    """
    flow_in = images
    if normalization is not None:
        flow_in = (images - normalization.mean_x[None, :, None, None]) \
            / normalization.std_x[None, :, None, None]
    out = model.degrade(flow_in, tau, stream, cond_img=images)
    if normalization is not None:
        out = out * normalization.std_y[None, :, None, None] \
            + normalization.mean_y[None, :, None, None]
    return out


def residual_stats(model: DeFlowModel, clean_set, tau: float, n_samples: int,
                   stream: RandomStream,
                   normalization: ChannelStats | None = None) -> ResidualStats:
    """Statistics of degrade(x) - x over the clean set (cycled as needed).

    The residual is taken against the raw clean input, so with channel
    normalization in play it measures the full sampling pipeline including
    the de-normalization step (which carries the mean and scale bookkeeping
    between the two domains).
    """
    residuals = []
    for i in range(n_samples):
        x = np.asarray(clean_set[i % len(clean_set)])[None]
        y = degrade_images(model, x, tau, stream.spawn("sample", i),
                           normalization)
        residuals.append((y - x)[0])
    return compute_residual_stats(residuals)


def heldout_nll(model: DeFlowModel, corpus: Corpus, stream: RandomStream,
                dequantize: bool = True,
                normalization: ChannelStats | None = None):
    """Per-domain mean negative log-likelihood in nats per dimension."""
    totals = []
    for domain, images in (("x", corpus.clean), ("y", corpus.degraded)):
        nats = 0.0
        dims = 0
        for i, img in enumerate(images):
            batch = np.asarray(img)[None]
            if dequantize:
                batch = dequantize_5bit(batch, stream.spawn("dq", domain, i))
            cond_img = batch
            if normalization is not None:
                if domain == "y":
                    cond_img = normalization.align_to_clean(batch)
                mean = normalization.mean_x if domain == "x" else normalization.mean_y
                std = normalization.std_x if domain == "x" else normalization.std_y
                batch = (batch - mean[None, :, None, None]) \
                    / std[None, :, None, None]
            cond = model.condition_features(cond_img, stream.spawn("h", domain, i))
            groups, logdet = model.encode(batch, cond)
            if domain == "x":
                logp = logp_zx(groups)
            else:
                logp = logp_zy(groups, model.shifts)
            nats -= float((logp + logdet).data[0])
            dims += batch.size
        totals.append(nats / dims)
    return totals[0], totals[1]


def ks_statistic(samples_a, samples_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic on pooled scalar samples."""
    a = np.sort(np.asarray(samples_a).reshape(-1))
    b = np.sort(np.asarray(samples_b).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_statistic needs nonempty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


def _rel_error(estimate: float, truth: float):
    if truth == 0.0:
        return ""
    return abs(estimate - truth) / abs(truth)


def emit_report(stats: ResidualStats, truth, nll, out_dir):
    """Write residual_report.csv and nll_report.csv under out_dir.

    truth: optional (mean[C], cov[C,C], lag1) triple from the corpus oracle;
    truth and relative-error columns stay empty without it.
    nll: optional (nll_x, nll_y) in nats per dimension.
    Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res_path = out_dir / "residual_report.csv"
    channels = stats.mean.size
    t_mean = t_cov = None
    t_lag1 = None
    if truth is not None:
        t_mean, t_cov, t_lag1 = truth

    def row(metric, estimate, ref):
        if ref is None:
            return [metric, f"{estimate:.12g}", "", ""]
        rel = _rel_error(estimate, ref)
        rel_s = "" if rel == "" else f"{rel:.12g}"
        return [metric, f"{estimate:.12g}", f"{ref:.12g}", rel_s]

    with open(res_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "estimate", "truth", "rel_error"])
        for c in range(channels):
            w.writerow(row(f"mean_c{c}", stats.mean[c],
                           None if t_mean is None else t_mean[c]))
        for c in range(channels):
            w.writerow(row(f"std_c{c}", stats.std[c],
                           None if t_cov is None else math.sqrt(t_cov[c, c])))
        for i in range(channels):
            for j in range(i, channels):
                w.writerow(row(f"cov_c{i}_c{j}", stats.covariance[i, j],
                               None if t_cov is None else t_cov[i, j]))
        w.writerow(row("lag1_autocorr", stats.lag1_autocorr, t_lag1))
        w.writerow(["pixel_count", str(stats.count), "", ""])

    nll_path = out_dir / "nll_report.csv"
    with open(nll_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["domain", "nats_per_dim"])
        if nll is not None:
            w.writerow(["clean", f"{nll[0]:.12g}"])
            w.writerow(["degraded", f"{nll[1]:.12g}"])
    return res_path, nll_path
