import numpy as np
import pytest
from scipy.stats import chi2

from deflow import data
from deflow.data import (
    Corpus,
    DegradationOracle,
    EvaluationAccess,
    channel_normalize,
    dequantize_5bit,
    load_corpus,
    load_image,
    sample_unpaired_batch,
    save_corpus,
    save_image,
    synth_corpus,
)
from deflow.rng import RandomStream


# -- image IO -------------------------------------------------------------------

def test_ppm_full_scale_pixel(tmp_path):
    path = tmp_path / "t.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes([255] * 3 + [0] * 3) * 2)
    img = load_image(path)
    assert img.shape == (3, 2, 2)
    assert img[0, 0, 0] == 1.0
    assert img[0, 0, 1] == 0.0


def test_grayscale_png_single_channel(tmp_path):
    arr = np.linspace(0, 1, 16).reshape(1, 4, 4)
    path = tmp_path / "g.png"
    save_image(path, arr)
    img = load_image(path)
    assert img.shape == (1, 4, 4)


def test_image_round_trip_8bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = np.round(rng.uniform(size=(3, 8, 8)) * 255) / 255.0
    path = tmp_path / "rt.png"
    save_image(path, arr)
    assert np.array_equal(load_image(path), arr)


def test_load_image_rejects_unreadable(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not an image")
    with pytest.raises(ValueError, match="broken.png"):
        load_image(path)


# -- dequantization -----------------------------------------------------------------

def test_dequantize_bucket_bounds():
    lo = dequantize_5bit(np.zeros((1, 64, 64)), RandomStream(0))
    assert lo.min() >= 0.0 and lo.max() < 1.0 / 32.0
    hi = dequantize_5bit(np.ones((1, 64, 64)), RandomStream(1))
    assert hi.min() >= 31.0 / 32.0 and hi.max() < 1.0


def test_dequantize_uniform_within_bucket():
    img = np.full((1, 1000, 1000), 137.0 / 255.0)
    out = dequantize_5bit(img, RandomStream(2))
    bucket = np.floor(out * 32.0)
    assert np.all(bucket == 17.0)
    frac = out * 32.0 - 17.0
    counts, _ = np.histogram(frac, bins=20, range=(0.0, 1.0))
    expected = frac.size / 20.0
    stat = ((counts - expected) ** 2 / expected).sum()
    assert chi2.sf(stat, df=19) > 0.01


def test_dequantize_deterministic():
    img = np.random.default_rng(3).uniform(size=(3, 8, 8))
    a = dequantize_5bit(img, RandomStream(5))
    b = dequantize_5bit(img, RandomStream(5))
    assert np.array_equal(a, b)


# -- oracles --------------------------------------------------------------------------

def test_white_noise_residual_mean_near_zero():
    oracle = DegradationOracle(data.WHITE_NOISE, sigma=0.04)
    corpus = synth_corpus(oracle, 4, 6, seed=0, size=64)
    pairs = corpus.hidden_pairing(EvaluationAccess())
    residuals = np.concatenate(
        [(y - src).reshape(-1) for y, src in zip(corpus.degraded, pairs)])
    se = 0.04 / np.sqrt(residuals.size)
    assert abs(residuals.mean()) < 3.0 * se
    assert abs(residuals.std() - 0.04) / 0.04 < 0.02


def test_correlated_noise_lag1_autocorrelation():
    kernel = np.array([[0.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 0.0]])
    oracle = DegradationOracle(data.CORRELATED_NOISE, sigma=0.05, kernel=kernel)
    corpus = synth_corpus(oracle, 2, 8, seed=1, size=96)
    pairs = corpus.hidden_pairing(EvaluationAccess())
    num, den = 0.0, 0.0
    for y, src in zip(corpus.degraded, pairs):
        r = y - src
        r = r - r.mean()
        num += (r[:, :, :-1] * r[:, :, 1:]).sum() + (r[:, :-1] * r[:, 1:]).sum()
        den += 2.0 * (r ** 2).sum()
    got = num / den
    _, _, ref = oracle.residual_truth(3)
    assert abs(got - ref) / abs(ref) < 0.05


def test_shifted_noise_channel_covariance():
    mu = np.array([0.05, -0.04, 0.03])
    a = np.array([[0.04, 0.0, 0.0], [0.02, 0.035, 0.0], [0.01, 0.015, 0.03]])
    cov = a @ a.T
    oracle = DegradationOracle(data.SHIFTED_NOISE, mu=mu, cov=cov)
    corpus = synth_corpus(oracle, 2, 10, seed=2, size=96)
    pairs = corpus.hidden_pairing(EvaluationAccess())
    res = np.concatenate(
        [(y - s).reshape(3, -1) for y, s in zip(corpus.degraded, pairs)], axis=1)
    assert np.abs(res.mean(axis=1) - mu).max() < 0.002
    got_cov = np.cov(res, bias=True)
    assert np.abs(got_cov - cov).max() / np.abs(cov).max() < 0.05


def test_oracle_two_seeds_differ_same_statistics():
    oracle = DegradationOracle(data.WHITE_NOISE, sigma=0.05)
    img = np.full((3, 32, 32), 0.5)
    a = oracle.apply(img, RandomStream(1))
    b = oracle.apply(img, RandomStream(2))
    assert np.abs(a - b).max() > 0
    assert abs((a - img).std() - (b - img).std()) < 0.005


def test_synth_corpus_rejects_empty():
    oracle = DegradationOracle(data.WHITE_NOISE, sigma=0.04)
    with pytest.raises(ValueError, match="insufficient"):
        synth_corpus(oracle, 0, 5, seed=0)


def test_synth_corpus_sources_disjoint_from_clean():
    oracle = DegradationOracle(data.WHITE_NOISE, sigma=0.04)
    corpus = synth_corpus(oracle, 3, 3, seed=3, size=32)
    pairs = corpus.hidden_pairing(EvaluationAccess())
    for clean in corpus.clean:
        for src in pairs:
            assert not np.array_equal(clean, src)


# -- unpaired discipline -----------------------------------------------------------------

def test_hidden_pairing_requires_capability_token():
    oracle = DegradationOracle(data.WHITE_NOISE, sigma=0.04)
    corpus = synth_corpus(oracle, 2, 2, seed=4, size=32)
    with pytest.raises(PermissionError, match="EvaluationAccess"):
        corpus.hidden_pairing(None)
    with pytest.raises(PermissionError, match="EvaluationAccess"):
        corpus.hidden_pairing(object())
    assert len(corpus.hidden_pairing(EvaluationAccess())) == 2


def test_no_pairing_on_plain_corpus():
    corpus = Corpus([np.zeros((1, 8, 8))], [np.zeros((1, 8, 8))])
    assert not corpus.has_hidden_pairing()
    with pytest.raises(ValueError, match="no hidden pairing"):
        corpus.hidden_pairing(EvaluationAccess())


# -- normalization ------------------------------------------------------------------------

def _toy_corpus(seed=0, n=4, size=16):
    oracle = DegradationOracle(data.WHITE_NOISE, sigma=0.05)
    return synth_corpus(oracle, n, n, seed=seed, size=size)


def test_channel_normalize_moments_and_round_trip():
    corpus = _toy_corpus()
    normed, stats = channel_normalize(corpus)
    mean_x, std_x, mean_y, std_y = normed.channel_stats()
    assert np.abs(mean_x).max() < 1e-10
    assert np.abs(std_x - 1.0).max() < 1e-10
    assert np.abs(mean_y).max() < 1e-10
    assert np.abs(std_y - 1.0).max() < 1e-10
    back = stats.denormalize_degraded(normed.degraded[0])
    assert np.abs(back - corpus.degraded[0]).max() < 1e-12


def test_channel_normalize_idempotent():
    normed, _ = channel_normalize(_toy_corpus())
    again, stats2 = channel_normalize(normed)
    assert np.abs(stats2.mean_x).max() < 1e-10
    assert np.abs(stats2.std_x - 1.0).max() < 1e-10
    for a, b in zip(again.clean, normed.clean):
        assert np.abs(a - b).max() < 1e-10


def test_channel_normalize_rejects_constant_channel():
    corpus = Corpus([np.zeros((1, 4, 4))], [np.ones((1, 4, 4))])
    with pytest.raises(ValueError, match="zero-variance"):
        channel_normalize(corpus)


# -- batch sampling ------------------------------------------------------------------------

def test_batch_counts_and_shapes():
    corpus = _toy_corpus()
    x, y = sample_unpaired_batch(corpus, 8, 8, RandomStream(0))
    assert x.shape == (8, 3, 8, 8)
    assert y.shape == (8, 3, 8, 8)


def test_batch_deterministic():
    corpus = _toy_corpus()
    a = sample_unpaired_batch(corpus, 4, 8, RandomStream(3))
    b = sample_unpaired_batch(corpus, 4, 8, RandomStream(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_batch_rejects_oversized_patch():
    corpus = _toy_corpus(size=16)
    with pytest.raises(ValueError, match="patch"):
        sample_unpaired_batch(corpus, 2, 32, RandomStream(0))


def test_image_selection_frequency_uniform():
    corpus = _toy_corpus(n=4)
    counts = np.zeros(4)
    total_batches = 10_000
    root = RandomStream(123)
    for i in range(total_batches):
        stream = root.spawn("batch", i)
        for b in range(4):
            sx = stream.spawn("x", b)
            counts[sx.integers(0, 4)] += 1
    expected = counts.sum() / 4.0
    assert np.abs(counts - expected).max() / expected < 0.05


# -- corpus directory round trip -----------------------------------------------------------

def test_corpus_save_load_round_trip(tmp_path):
    oracle = DegradationOracle(
        data.SHIFTED_NOISE,
        mu=np.array([0.05, -0.04, 0.03]),
        cov=0.0016 * np.eye(3),
    )
    corpus = synth_corpus(oracle, 3, 4, seed=9, size=32)
    save_corpus(corpus, tmp_path / "corpus")
    loaded = load_corpus(tmp_path / "corpus")
    assert len(loaded.clean) == 3
    assert len(loaded.degraded) == 4
    assert loaded.oracle.kind == data.SHIFTED_NOISE
    assert np.allclose(loaded.oracle.mu, oracle.mu)
    assert np.allclose(loaded.oracle.cov, oracle.cov)
    assert loaded.seed == 9
    # 8-bit quantization bounds the reload error
    assert np.abs(loaded.clean[0] - corpus.clean[0]).max() <= 0.5 / 255.0 + 1e-12
    pairs = loaded.hidden_pairing(EvaluationAccess())
    assert len(pairs) == 4


def test_load_corpus_rejects_non_corpus(tmp_path):
    with pytest.raises(ValueError, match="corpus"):
        load_corpus(tmp_path)
