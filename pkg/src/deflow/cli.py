"""Command-line entry point.

Subcommands: gauss1d, synth-corpus, train, sample, eval.  Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.  Every
command is deterministic under an explicit seed; without one the seed
comes from the DEFLOW_SEED environment variable or, failing that, from
entropy (and is printed so the run can be reproduced).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, gauss1d
from .data import (
    ChannelStats,
    DegradationOracle,
    load_corpus,
    load_image,
    save_corpus,
    save_image,
    synth_corpus,
)
from .rng import RandomStream
from .training import (
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    restore_model,
    train,
)


class ConfigError(Exception):
    """Configuration problem; maps to exit code 2."""


def resolve_seed(explicit) -> int:
    if explicit is not None:
        return int(explicit)
    env = os.environ.get("DEFLOW_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"DEFLOW_SEED is not an integer: {env!r}") from exc
    seed = int.from_bytes(os.urandom(8), "little") & 0x7FFFFFFFFFFFFFFF
    print(f"seed={seed}")
    return seed


# -- flat key=value config files --------------------------------------------------

_BOOL_KEYS = {"cond_disabled", "normalize_channels"}
_PATH_KEYS = {"corpus_dir", "out_dir"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _PATH_KEYS or key == "shift_mode":
        return raw
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key} expects a boolean, got {raw!r}")
    if key == "lr_milestones":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if key in ("base_lr", "cond_noise_sigma"):
        return float(raw)
    return int(raw)


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment; order independent."""
    known = {f.name for f in fields(TrainConfig)} | _PATH_KEYS
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"duplicate config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_train_setup(config_path, overrides):
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text())
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        known = {f.name for f in fields(TrainConfig)} | _PATH_KEYS
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    corpus_dir = values.pop("corpus_dir", None)
    out_dir = values.pop("out_dir", None)
    if corpus_dir is None:
        raise ConfigError("config must set corpus_dir")
    if out_dir is None:
        raise ConfigError("config must set out_dir")
    seed_given = "seed" in values
    try:
        config = TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config, Path(corpus_dir), Path(out_dir), seed_given


# -- helpers ------------------------------------------------------------------------

def _parse_vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",") if v.strip()])


def _parse_matrix(text: str) -> np.ndarray:
    rows = [r for r in text.split(";") if r.strip()]
    return np.stack([_parse_vector(r) for r in rows])


def _normalization_from_header(header: dict):
    norm = header.get("normalization")
    if not norm:
        return None
    return ChannelStats(
        mean_x=np.asarray(norm["mean_x"]), std_x=np.asarray(norm["std_x"]),
        mean_y=np.asarray(norm["mean_y"]), std_y=np.asarray(norm["std_y"]),
    )


def _center_crop_divisible(img: np.ndarray, div: int) -> np.ndarray:
    c, h, w = img.shape
    nh, nw = (h // div) * div, (w // div) * div
    if nh == 0 or nw == 0:
        raise ConfigError(f"image {h}x{w} smaller than one {div}x{div} block")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[:, top:top + nh, left:left + nw]


# -- subcommands -----------------------------------------------------------------------

def cmd_gauss1d(args) -> int:
    seed = resolve_seed(args.seed)
    if args.x_file or args.y_file:
        if not (args.x_file and args.y_file):
            raise ConfigError("--x-file and --y-file must be given together")
        xs = np.loadtxt(args.x_file, ndmin=1)
        ys = np.loadtxt(args.y_file, ndmin=1)
        samples = gauss1d.SampleSets1D(xs, ys)
    else:
        missing = [n for n in ("mu_x", "var_x", "mu_u", "var_u")
                   if getattr(args, n) is None]
        if missing:
            raise ConfigError(
                f"need truth parameters {missing} (or --x-file/--y-file)"
            )
        truth = gauss1d.Gauss1DSolution(
            args.mu_x, args.var_x, args.mu_u, args.var_u,
            case=gauss1d.CONSTANT_SHIFT if args.var_u == 0.0
            else gauss1d.NOISIER_TARGET)
        samples = gauss1d.sample_pairs_1d(truth, args.n, args.m or args.n,
                                          RandomStream(seed))
    sol = gauss1d.fit_closed_form(samples)
    print(f"case={sol.case}")
    for name in ("mu_x", "var_x", "mu_u", "var_u"):
        print(f"{name}={getattr(sol, name):.12g}")
    nll = gauss1d.joint_marginal_nll_1d(sol, samples)
    print(f"nll={nll:.12g}")
    if args.train_affine:
        model, history = gauss1d.fit_affine_flow(
            samples, iterations=args.train_iterations, seed=seed)
        trained = model.solution()
        for name in ("mu_x", "var_x", "mu_u", "var_u"):
            print(f"trained_{name}={getattr(trained, name):.12g}")
        print(f"trained_nll={history[-1]:.12g}")
        print(f"nll_gap={history[-1] - nll:.6g}")
    return 0


def cmd_synth_corpus(args) -> int:
    seed = resolve_seed(args.seed)
    kind = args.kind.replace("-", "_")
    if kind == data_mod.WHITE_NOISE:
        oracle = DegradationOracle(kind, sigma=args.sigma)
    elif kind == data_mod.CORRELATED_NOISE:
        kernel = _parse_matrix(args.kernel) if args.kernel else np.array(
            [[0.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 0.0]])
        oracle = DegradationOracle(kind, sigma=args.sigma, kernel=kernel)
    else:
        if not args.mu or not args.cov:
            raise ConfigError("shifted_noise needs --mu and --cov")
        oracle = DegradationOracle(kind, mu=_parse_vector(args.mu),
                                   cov=_parse_matrix(args.cov))
    corpus = synth_corpus(oracle, args.n_clean, args.n_degraded, seed=seed,
                          size=args.size, channels=args.channels)
    save_corpus(corpus, args.out)
    print(f"corpus written to {args.out}")
    return 0


def cmd_train(args) -> int:
    config, corpus_dir, out_dir, seed_given = load_train_setup(args.config,
                                                               args.set)
    if not seed_given:
        config.seed = resolve_seed(None)
    if not corpus_dir.exists():
        raise ConfigError(f"corpus directory not found: {corpus_dir}")
    corpus = load_corpus(corpus_dir)
    result = train(config, corpus, out_dir)
    print(f"checkpoint={result.checkpoint_path}")
    print(f"log={result.log_path}")
    return 0


def cmd_sample(args) -> int:
    seed = resolve_seed(args.seed)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    normalization = _normalization_from_header(ckpt.header)
    input_dir = Path(args.input_dir)
    if not input_dir.is_dir():
        raise ConfigError(f"input directory not found: {input_dir}")
    paths = sorted(p for p in input_dir.iterdir()
                   if p.suffix.lower() in (".png", ".ppm"))
    if not paths:
        raise ConfigError(f"no PNG/PPM images in {input_dir}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    div = 2 ** model.levels
    stream = RandomStream(seed)
    for path in paths:
        img = _center_crop_divisible(load_image(path), div)[None]
        for k in range(args.count):
            sample = evaluation.degrade_images(
                model, img, args.tau, stream.spawn(path.name, k), normalization)
            name = f"{path.stem}_tau{args.tau:g}_v{k}.png"
            save_image(out_dir / name, sample[0])
    print(f"wrote {len(paths) * args.count} samples to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    seed = resolve_seed(args.seed)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    normalization = _normalization_from_header(ckpt.header)
    corpus_dir = Path(args.corpus)
    if not corpus_dir.exists():
        raise ConfigError(f"corpus directory not found: {corpus_dir}")
    corpus = load_corpus(corpus_dir)
    stream = RandomStream(seed)
    div = 2 ** model.levels
    clean_set = [_center_crop_divisible(im, div) for im in corpus.clean]
    stats = evaluation.residual_stats(model, clean_set, args.tau, args.samples,
                                      stream.spawn("residuals"), normalization)
    nll = evaluation.heldout_nll(model, corpus, stream.spawn("nll"),
                                 normalization=normalization)
    truth = None
    if corpus.oracle is not None:
        truth = corpus.oracle.residual_truth(corpus.channels)
    res_path, nll_path = evaluation.emit_report(stats, truth, nll, args.out_dir)
    print(f"residual_report={res_path}")
    print(f"nll_report={nll_path}")
    metrics = [*stats.mean, *stats.variance, stats.lag1_autocorr, *nll]
    if not all(math.isfinite(float(v)) for v in metrics):
        print("error: non-finite metric in evaluation", file=sys.stderr)
        return 1
    return 0


# -- driver -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deflow",
        description="Unpaired image degradation learning with conditional flows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gauss1d", help="closed-form 1D Gaussian oracle")
    g.add_argument("--mu-x", dest="mu_x", type=float)
    g.add_argument("--var-x", dest="var_x", type=float)
    g.add_argument("--mu-u", dest="mu_u", type=float)
    g.add_argument("--var-u", dest="var_u", type=float)
    g.add_argument("--n", type=int, default=100_000)
    g.add_argument("--m", type=int)
    g.add_argument("--x-file", dest="x_file")
    g.add_argument("--y-file", dest="y_file")
    g.add_argument("--train-affine", action="store_true")
    g.add_argument("--train-iterations", type=int, default=3000)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gauss1d)

    s = sub.add_parser("synth-corpus", help="generate an oracle corpus")
    s.add_argument("--kind", required=True,
                   choices=["white_noise", "correlated_noise", "shifted_noise"])
    s.add_argument("--sigma", type=float, default=0.04)
    s.add_argument("--kernel", help="rows 'a,b;c,d' for correlated noise")
    s.add_argument("--mu", help="comma-separated channel means")
    s.add_argument("--cov", help="rows 'a,b;c,d' channel covariance")
    s.add_argument("--n-clean", type=int, default=8)
    s.add_argument("--n-degraded", type=int, default=8)
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth_corpus)

    t = sub.add_parser("train", help="train from a key=value config file")
    t.add_argument("config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample degraded versions of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-dir", dest="input_dir", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out-dir", dest="out_dir", required=True)
    e.add_argument("--tau", type=float, default=1.0)
    e.add_argument("--samples", type=int, default=32)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
