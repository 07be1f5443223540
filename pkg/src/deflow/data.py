"""Image ingestion, synthetic unpaired corpora, patches, and batches.

Oracle corpora substitute for real-world degraded datasets: the degradation
that produced the noisy set is known exactly, so a trained model can be
scored by how well it recovers the generating parameters.  The unpaired
protocol is enforced structurally: the clean and degraded sets come from
disjoint source images, and the hidden pairing (which clean source underlies
which degraded image) is only reachable through an evaluation capability
token that training code never holds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import RandomStream


class EvaluationAccess:
    """Capability token gating the hidden pairing of oracle corpora."""


# -- image files -------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """8-bit PNG or PPM -> channel-first float64 in [0, 1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    if img.mode not in ("L", "RGB"):
        raise ValueError(
            f"unsupported image mode {img.mode!r} in {path}; need 8-bit "
            "grayscale or RGB"
        )
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def save_image(path, arr: np.ndarray) -> None:
    """Channel-first float array in [0, 1] -> 8-bit PNG/PPM (values clipped)."""
    arr = np.clip(np.asarray(arr), 0.0, 1.0)
    pixels = np.round(arr * 255.0).astype(np.uint8)
    if pixels.shape[0] == 1:
        img = Image.fromarray(pixels[0], mode="L")
    else:
        img = Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB")
    img.save(path)


def dequantize_5bit(img: np.ndarray, stream: RandomStream) -> np.ndarray:
    """Reduce 8-bit pixels to 32 levels and add in-bucket uniform noise.

    p in {0..255} -> floor(p/8) in {0..31} -> (level + U[0,1)) / 32, so the
    output is continuous in [0, 1).
    """
    levels = np.floor(np.round(np.asarray(img) * 255.0) / 8.0)
    levels = np.clip(levels, 0, 31)
    return (levels + stream.uniform(img.shape)) / 32.0


# -- degradation oracles -------------------------------------------------------

WHITE_NOISE = "white_noise"
CORRELATED_NOISE = "correlated_noise"
SHIFTED_NOISE = "shifted_noise"


@dataclass
class DegradationOracle:
    """Known stochastic degradation with closed-form residual moments.

    kinds:
      white_noise       i.i.d. N(0, sigma^2) per entry
      correlated_noise  white noise circularly convolved with a small kernel,
                        rescaled to per-entry std sigma
      shifted_noise     per-pixel channel vector mu + chol(cov) @ z
    """

    kind: str
    sigma: float = 0.0
    kernel: np.ndarray | None = None
    mu: np.ndarray | None = None
    cov: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (WHITE_NOISE, CORRELATED_NOISE, SHIFTED_NOISE):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if self.kind == CORRELATED_NOISE:
            if self.kernel is None:
                raise ValueError("correlated_noise needs a kernel")
            self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kind == SHIFTED_NOISE:
            if self.mu is None or self.cov is None:
                raise ValueError("shifted_noise needs mu and cov")
            self.mu = np.asarray(self.mu, dtype=np.float64)
            self.cov = np.asarray(self.cov, dtype=np.float64)

    def apply(self, img: np.ndarray, stream: RandomStream) -> np.ndarray:
        c, h, w = img.shape
        if self.kind == WHITE_NOISE:
            return img + stream.normal(img.shape, std=self.sigma)
        if self.kind == CORRELATED_NOISE:
            white = stream.normal(img.shape)
            noise = _circular_conv2(white, self.kernel)
            noise *= self.sigma / np.sqrt((self.kernel ** 2).sum())
            return img + noise
        chol = np.linalg.cholesky(self.cov)
        z = stream.normal((h, w, c))
        noise = z @ chol.T + self.mu
        return img + noise.transpose(2, 0, 1)

    def residual_truth(self, channels: int):
        """(mean[C], channel covariance [C,C], lag-1 autocorrelation)."""
        if self.kind == WHITE_NOISE:
            return (np.zeros(channels), self.sigma ** 2 * np.eye(channels), 0.0)
        if self.kind == CORRELATED_NOISE:
            k = self.kernel
            denom = (k ** 2).sum()
            horiz = (k[:, :-1] * k[:, 1:]).sum() / denom
            vert = (k[:-1, :] * k[1:, :]).sum() / denom
            return (np.zeros(channels), self.sigma ** 2 * np.eye(channels),
                    0.5 * (horiz + vert))
        return (self.mu.copy(), self.cov.copy(), 0.0)

    def to_metadata(self) -> dict:
        out = {"kind": self.kind, "sigma": self.sigma}
        if self.kernel is not None:
            out["kernel"] = self.kernel.tolist()
        if self.mu is not None:
            out["mu"] = self.mu.tolist()
        if self.cov is not None:
            out["cov"] = self.cov.tolist()
        return out

    @staticmethod
    def from_metadata(meta: dict) -> "DegradationOracle":
        return DegradationOracle(
            kind=meta["kind"],
            sigma=float(meta.get("sigma", 0.0)),
            kernel=np.asarray(meta["kernel"]) if "kernel" in meta else None,
            mu=np.asarray(meta["mu"]) if "mu" in meta else None,
            cov=np.asarray(meta["cov"]) if "cov" in meta else None,
        )


def _circular_conv2(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D circular convolution with a small dense kernel."""
    kh, kw = kernel.shape
    out = np.zeros_like(field)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * np.roll(field, (i - kh // 2, j - kw // 2),
                                          axis=(-2, -1))
    return out


# -- corpora --------------------------------------------------------------------

class Corpus:
    """Unpaired clean/degraded image sets.

    The hidden pairing (clean sources of the degraded set, present only for
    oracle corpora) is reachable exclusively through ``hidden_pairing`` with
    an :class:`EvaluationAccess` token.
    """

    def __init__(self, clean, degraded, oracle: DegradationOracle | None = None,
                 seed: int | None = None, hidden_sources=None):
        if not clean or not degraded:
            raise ValueError(
                f"insufficient source images: {len(clean)} clean, "
                f"{len(degraded)} degraded"
            )
        self.clean = [np.asarray(img, dtype=np.float64) for img in clean]
        self.degraded = [np.asarray(img, dtype=np.float64) for img in degraded]
        self.oracle = oracle
        self.seed = seed
        self.__hidden_sources = hidden_sources

    @property
    def channels(self) -> int:
        return self.clean[0].shape[0]

    def channel_stats(self):
        """Per-domain per-channel mean and std over all pixels."""
        def stats(images):
            flat = np.concatenate([im.reshape(im.shape[0], -1) for im in images],
                                  axis=1)
            return flat.mean(axis=1), flat.std(axis=1)

        mean_x, std_x = stats(self.clean)
        mean_y, std_y = stats(self.degraded)
        return mean_x, std_x, mean_y, std_y

    def hidden_pairing(self, access) -> list:
        """Clean sources of the degraded images, index-aligned; evaluation
        only, guarded by the capability token."""
        if not isinstance(access, EvaluationAccess):
            raise PermissionError(
                "hidden pairing requires an EvaluationAccess token"
            )
        if self.__hidden_sources is None:
            raise ValueError("this corpus has no hidden pairing")
        return self.__hidden_sources

    def has_hidden_pairing(self) -> bool:
        return self.__hidden_sources is not None


def _smooth_image(channels: int, size: int, stream: RandomStream) -> np.ndarray:
    """Random smooth content in roughly [0.2, 0.8]: a few low-frequency
    sinusoids per channel with shared geometry across channels."""
    hh, ww = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.full((channels, size, size), 0.5)
    n_waves = 6
    freqs = stream.uniform((n_waves, 2)) * 0.18 + 0.01
    phases = stream.uniform((n_waves,)) * 2.0 * np.pi
    chan_amp = stream.uniform((n_waves, channels)) * 0.5 + 0.5
    for k in range(n_waves):
        wave = np.sin(2.0 * np.pi * (freqs[k, 0] * hh + freqs[k, 1] * ww)
                      + phases[k])
        img += (0.25 / n_waves * 2.0) * chan_amp[k][:, None, None] * wave
    return np.clip(img, 0.05, 0.95)


def synth_corpus(oracle: DegradationOracle, n_clean: int, n_degraded: int,
                 seed: int, size: int = 48, channels: int = 3) -> Corpus:
    """Oracle corpus with disjoint source images for the two domains.

    Degraded images are oracle-degraded versions of images NOT in the clean
    set; their pre-degradation sources are stored as the hidden pairing.
    """
    if n_clean < 1 or n_degraded < 1:
        raise ValueError(
            f"insufficient source images: n_clean={n_clean}, "
            f"n_degraded={n_degraded}"
        )
    stream = RandomStream(seed)
    clean = [_smooth_image(channels, size, stream.spawn("clean", i))
             for i in range(n_clean)]
    sources = [_smooth_image(channels, size, stream.spawn("source", i))
               for i in range(n_degraded)]
    degraded = [oracle.apply(src, stream.spawn("degrade", i))
                for i, src in enumerate(sources)]
    return Corpus(clean, degraded, oracle=oracle, seed=seed,
                  hidden_sources=sources)


@dataclass
class ChannelStats:
    mean_x: np.ndarray
    std_x: np.ndarray
    mean_y: np.ndarray
    std_y: np.ndarray

    def denormalize_degraded(self, img: np.ndarray) -> np.ndarray:
        return img * self.std_y[:, None, None] + self.mean_y[:, None, None]

    def normalize_clean(self, img: np.ndarray) -> np.ndarray:
        return (img - self.mean_x[:, None, None]) / self.std_x[:, None, None]

    def align_to_clean(self, img: np.ndarray) -> np.ndarray:
        """Re-express a degraded-domain image in the clean domain's channel
        frame (first and second moments matched, pixel scale preserved)."""
        mean_y = self.mean_y.reshape(-1, 1, 1)
        std_y = self.std_y.reshape(-1, 1, 1)
        mean_x = self.mean_x.reshape(-1, 1, 1)
        std_x = self.std_x.reshape(-1, 1, 1)
        return (img - mean_y) / std_y * std_x + mean_x


def channel_normalize(corpus: Corpus):
    """Map both domains to zero mean and unit std per channel; returns the
    normalized corpus plus the stats needed to de-normalize samples."""
    mean_x, std_x, mean_y, std_y = corpus.channel_stats()
    for name, std in (("clean", std_x), ("degraded", std_y)):
        if (std == 0).any():
            raise ValueError(f"zero-variance channel in the {name} domain")
    stats = ChannelStats(mean_x, std_x, mean_y, std_y)
    clean = [(im - mean_x[:, None, None]) / std_x[:, None, None]
             for im in corpus.clean]
    degraded = [(im - mean_y[:, None, None]) / std_y[:, None, None]
                for im in corpus.degraded]
    hidden = None
    if corpus.has_hidden_pairing():
        hidden = [(im - mean_x[:, None, None]) / std_x[:, None, None]
                  for im in corpus.hidden_pairing(EvaluationAccess())]
    out = Corpus(clean, degraded, oracle=corpus.oracle, seed=corpus.seed,
                 hidden_sources=hidden)
    return out, stats


def _random_patch(img: np.ndarray, patch: int, stream: RandomStream) -> np.ndarray:
    c, h, w = img.shape
    top = stream.integers(0, h - patch + 1)
    left = stream.integers(0, w - patch + 1)
    out = img[:, top:top + patch, left:left + patch]
    if stream.bernoulli(0.5):
        out = out[:, :, ::-1]
    if stream.bernoulli(0.5):
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def sample_unpaired_batch(corpus: Corpus, batch_size: int, patch: int,
                          stream: RandomStream):
    """Equal-sized stacks of random flipped crops from each domain."""
    for name, images in (("clean", corpus.clean), ("degraded", corpus.degraded)):
        for im in images:
            if patch > im.shape[1] or patch > im.shape[2]:
                raise ValueError(
                    f"patch {patch} exceeds {name} image extents "
                    f"{im.shape[1]}x{im.shape[2]}"
                )
    xs, ys = [], []
    for b in range(batch_size):
        sx = stream.spawn("x", b)
        xs.append(_random_patch(corpus.clean[sx.integers(0, len(corpus.clean))],
                                patch, sx))
        sy = stream.spawn("y", b)
        ys.append(_random_patch(
            corpus.degraded[sy.integers(0, len(corpus.degraded))], patch, sy))
    return np.stack(xs), np.stack(ys)


# -- corpus directory layout --------------------------------------------------------
# clean/ and degraded/ image folders, metadata.txt, optional eval_ref/ with the
# hidden pairing listed in pairing.txt.

def save_corpus(corpus: Corpus, directory) -> None:
    directory = Path(directory)
    for sub in ("clean", "degraded"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(corpus.clean):
        save_image(directory / "clean" / f"{i:04d}.png", im)
    for i, im in enumerate(corpus.degraded):
        save_image(directory / "degraded" / f"{i:04d}.png", im)
    meta = {"seed": corpus.seed}
    if corpus.oracle is not None:
        meta["oracle"] = corpus.oracle.to_metadata()
    if corpus.has_hidden_pairing():
        (directory / "eval_ref").mkdir(exist_ok=True)
        lines = []
        for i, im in enumerate(corpus.hidden_pairing(EvaluationAccess())):
            save_image(directory / "eval_ref" / f"{i:04d}.png", im)
            lines.append(f"degraded/{i:04d}.png eval_ref/{i:04d}.png")
        (directory / "pairing.txt").write_text("\n".join(lines) + "\n")
        meta["pairing_file"] = "pairing.txt"
    (directory / "metadata.txt").write_text(
        "\n".join(f"{k}={json.dumps(v, sort_keys=True)}"
                  for k, v in sorted(meta.items())) + "\n"
    )


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    if not (directory / "clean").is_dir() or not (directory / "degraded").is_dir():
        raise ValueError(f"{directory} is not a corpus directory "
                         "(need clean/ and degraded/)")
    clean = [load_image(p) for p in sorted((directory / "clean").iterdir())]
    degraded = [load_image(p) for p in sorted((directory / "degraded").iterdir())]
    meta = {}
    meta_path = directory / "metadata.txt"
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                meta[key] = json.loads(value)
    oracle = None
    if "oracle" in meta:
        oracle = DegradationOracle.from_metadata(meta["oracle"])
    hidden = None
    if "pairing_file" in meta:
        hidden = []
        pairing = (directory / meta["pairing_file"]).read_text().splitlines()
        for line in pairing:
            if line.strip():
                _, ref = line.split()
                hidden.append(load_image(directory / ref))
    return Corpus(clean, degraded, oracle=oracle, seed=meta.get("seed"),
                  hidden_sources=hidden)
