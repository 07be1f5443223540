"""Optimization loop: Adam, stepwise learning-rate halving, checkpoints.

Training is a pure function of (config, corpus, seed): batches, 5-bit
dequantization noise, and conditioning noise all come from named substreams
of the run seed, and the metrics log prints floats at full precision, so
reruns reproduce the log and checkpoints byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward, tensor_bytes, tensor_from_bytes
from .conditioning import ConditionSpec
from .data import Corpus, dequantize_5bit, sample_unpaired_batch
from .model import DeFlowModel
from .rng import RandomStream


@dataclass
class TrainConfig:
    iterations: int = 100_000
    base_lr: float = 5e-5
    # fractions of total iterations at which the rate is halved
    lr_milestones: tuple = (0.5, 0.75, 0.9, 0.95)
    batch_size: int = 8
    patch_size: int = 16
    flow_steps: int = 4
    levels: int = 2
    hidden_width: int = 64
    shift_mode: str = "full"  # full | diagonal | frozen-zero
    cond_down_factor: int = 4
    cond_noise_sigma: float = 0.03
    cond_disabled: bool = False
    normalize_channels: bool = False
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0  # 0: only final

    def __post_init__(self):
        ms = tuple(float(m) for m in self.lr_milestones)
        if any(not 0.0 < m < 1.0 for m in ms):
            raise ValueError(f"lr milestones must lie in (0,1), got {ms}")
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"lr milestones must be strictly increasing, got {ms}")
        self.lr_milestones = ms
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        for name in ("batch_size", "patch_size", "flow_steps",
                     "levels", "hidden_width", "cond_down_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.shift_mode not in ("full", "diagonal", "frozen-zero"):
            raise ValueError(f"unknown shift_mode {self.shift_mode!r}")


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Base rate halved once per milestone already reached."""
    if not 0 <= iteration < config.iterations:
        raise ValueError(
            f"iteration {iteration} outside [0, {config.iterations})"
        )
    passed = sum(
        iteration >= math.floor(m * config.iterations) for m in config.lr_milestones
    )
    return config.base_lr * (0.5 ** passed)


class Adam:
    """Adam with bias correction over named parameter tensors.

    A step first validates every gradient; a non-finite gradient aborts the
    whole step (no partial updates) and names the offending parameter.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)  # (name, Tensor) pairs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros(t.shape) for _, t in self.params]
        self.v = [np.zeros(t.shape) for _, t in self.params]

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None

    def step(self, lr: float) -> None:
        grads = []
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros(t.shape)
            if not np.isfinite(g).all():
                raise FloatingPointError(
                    f"non-finite gradient for parameter '{name}'; step aborted"
                )
            grads.append(g)
        self.step_count += 1
        t_ = self.step_count
        c1 = 1.0 - self.beta1 ** t_
        c2 = 1.0 - self.beta2 ** t_
        for (name, p), m, v, g in zip(self.params, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for _, t in params:
        if t.grad is not None:
            total += float((t.grad ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, t in params:
            if t.grad is not None:
                t.grad *= scale
    return norm


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; the last good checkpoint on
    disk is retained."""


# -- model construction from config ---------------------------------------------

def build_model(config: TrainConfig, in_channels: int) -> DeFlowModel:
    spec = ConditionSpec(down_factor=config.cond_down_factor,
                         noise_sigma=config.cond_noise_sigma,
                         disabled=config.cond_disabled)
    return DeFlowModel(in_channels=in_channels, levels=config.levels,
                       flow_steps=config.flow_steps,
                       hidden_width=config.hidden_width, cond_spec=spec,
                       shift_mode=config.shift_mode, seed=config.seed)


def initialize_training_model(config: TrainConfig, in_channels: int) -> DeFlowModel:
    """Fresh model in its training start state.

    The shift covariance factor gets a tiny seeded kick unless frozen:
    exactly zero is a stationary point of the likelihood (the density
    depends on the factor only through its square), so it would never move.
    """
    model = build_model(config, in_channels)
    if config.shift_mode != "frozen-zero":
        kick = RandomStream(config.seed).spawn("shift-kick")
        for g, s in enumerate(model.shifts):
            s.kick(kick.spawn(g))
    return model


# -- checkpoint format -------------------------------------------------------------
# 8-byte magic, u32 format version, u32 header length, JSON header (sorted
# keys), then raw tensor blocks in header order: parameters, Adam first
# moments, Adam second moments.

CHECKPOINT_MAGIC = b"DFLWCKP\x01"
CHECKPOINT_VERSION = 1


def _config_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["lr_milestones"] = list(config.lr_milestones)
    return out


def save_checkpoint(path, model: DeFlowModel, config: TrainConfig,
                    iteration: int, optimizer: Adam | None = None,
                    normalization: dict | None = None) -> None:
    params = model.parameters()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": _config_dict(config),
        "architecture": model.architecture(),
        "iteration": iteration,
        "actnorm_initialized": model.actnorm_initialized,
        "param_names": [n for n, _ in params],
        "adam_step": optimizer.step_count if optimizer else 0,
        "trainable_names": [n for n, _ in optimizer.params] if optimizer else [],
        "normalization": normalization,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)),
              blob]
    chunks += [tensor_bytes(t) for _, t in params]
    if optimizer:
        from .autodiff import Tensor
        chunks += [tensor_bytes(Tensor(m)) for m in optimizer.m]
        chunks += [tensor_bytes(Tensor(v)) for v in optimizer.v]
    Path(path).write_bytes(b"".join(chunks))


class Checkpoint:
    def __init__(self, header: dict, tensors: dict, adam_m: list, adam_v: list):
        self.header = header
        self.tensors = tensors
        self.adam_m = adam_m
        self.adam_v = adam_v

    @property
    def config(self) -> TrainConfig:
        cfg = dict(self.header["config"])
        cfg["lr_milestones"] = tuple(cfg["lr_milestones"])
        return TrainConfig(**cfg)

    @property
    def iteration(self) -> int:
        return self.header["iteration"]


def _read_tensor_block(buf: bytes, offset: int):
    if buf[offset:offset + 8] != b"TNSR\x00\x01\x00\x00":
        raise ValueError("corrupt checkpoint: bad tensor block")
    (rank,) = struct.unpack_from("<I", buf, offset + 8)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 12)
    count = int(np.prod(shape)) if rank else 1
    end = offset + 12 + 4 * rank + 8 * count
    if end > len(buf):
        raise ValueError("corrupt checkpoint: truncated tensor block")
    return tensor_from_bytes(buf[offset:end]), end


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version {version} != supported "
            f"{CHECKPOINT_VERSION}"
        )
    try:
        header = json.loads(buf[16:16 + header_len])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt checkpoint header: {exc}") from exc
    offset = 16 + header_len
    tensors = {}
    for name in header["param_names"]:
        t, offset = _read_tensor_block(buf, offset)
        tensors[name] = t.data
    adam_m, adam_v = [], []
    for store in (adam_m, adam_v):
        for _ in header["trainable_names"]:
            t, offset = _read_tensor_block(buf, offset)
            store.append(t.data)
    return Checkpoint(header, tensors, adam_m, adam_v)


def restore_model(ckpt: Checkpoint) -> DeFlowModel:
    """Rebuild the model a checkpoint describes and load its parameters."""
    config = ckpt.config
    model = build_model(config, ckpt.header["architecture"]["in_channels"])
    if model.architecture() != ckpt.header["architecture"]:
        raise ValueError(
            "checkpoint architecture mismatch:\n"
            f"  checkpoint: {ckpt.header['architecture']}\n"
            f"  rebuilt:    {model.architecture()}"
        )
    restore_parameters(model, ckpt)
    return model


def restore_parameters(model: DeFlowModel, ckpt: Checkpoint) -> None:
    arch = model.architecture()
    if arch != ckpt.header["architecture"]:
        raise ValueError(
            "checkpoint does not fit this model:\n"
            f"  checkpoint: {ckpt.header['architecture']}\n"
            f"  model:      {arch}"
        )
    for name, t in model.parameters():
        stored = ckpt.tensors[name]
        if stored.shape != t.shape:
            raise ValueError(
                f"checkpoint tensor {name} has shape {stored.shape}, "
                f"model expects {t.shape}"
            )
        t.data[...] = stored
    if ckpt.header["actnorm_initialized"]:
        for steps in model.level_steps:
            for step in steps:
                step.actnorm.initialized = True


# -- the training loop ---------------------------------------------------------------

class TrainResult:
    def __init__(self, model, config, checkpoint_path, log_path, normalization):
        self.model = model
        self.config = config
        self.checkpoint_path = checkpoint_path
        self.log_path = log_path
        self.normalization = normalization


def _format_row(iteration, lr, total, nx, ny, grad_norm) -> str:
    vals = ",".join(f"{v:.17g}" for v in (lr, total, nx, ny, grad_norm))
    return f"{iteration},{vals}"


def train(config: TrainConfig, corpus: Corpus, out_dir,
          grad_clip: float = 100.0) -> TrainResult:
    """Run the full loop: sample, dequantize, condition, NLL, backward, Adam.

    Writes `train_log.csv` and `checkpoint.bin` (plus numbered intermediate
    checkpoints when configured) under out_dir.  A non-finite loss halts
    training; the last good checkpoint stays on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = initialize_training_model(config, corpus.channels)

    normalization = None
    norm_arrays = None
    if config.normalize_channels:
        from .data import channel_normalize  # raw stats, applied per batch

        _, stats = channel_normalize(corpus)
        norm_arrays = stats
        normalization = {
            "mean_x": stats.mean_x.tolist(), "std_x": stats.std_x.tolist(),
            "mean_y": stats.mean_y.tolist(), "std_y": stats.std_y.tolist(),
        }

    params = model.trainable_parameters()
    optimizer = Adam(params)
    root = RandomStream(config.seed)
    log_path = out_dir / "train_log.csv"
    final_path = out_dir / "checkpoint.bin"

    with open(log_path, "w") as log:
        log.write("iter,lr,nll_total,nll_x,nll_y,grad_norm\n")
        for it in range(config.iterations):
            lr = lr_at(config, it)
            x, y = sample_unpaired_batch(corpus, config.batch_size,
                                         config.patch_size, root.spawn("batch", it))
            x = dequantize_5bit(x, root.spawn("dq-x", it))
            y = dequantize_5bit(y, root.spawn("dq-y", it))
            cond_x, cond_y = x, y
            if norm_arrays is not None:
                # conditioning images stay on the [0,1] pixel scale (the
                # conditioning noise is calibrated for it) but the degraded
                # domain is re-expressed in the clean domain's channel frame
                # so first moments cannot reveal the domain
                cond_y = norm_arrays.align_to_clean(y)
                x = (x - norm_arrays.mean_x[:, None, None]) \
                    / norm_arrays.std_x[:, None, None]
                y = (y - norm_arrays.mean_y[:, None, None]) \
                    / norm_arrays.std_y[:, None, None]
            with Tape():
                loss, nll_x, nll_y = model.marginal_nll(x, y, root.spawn("cond", it),
                                                        cond_x=cond_x, cond_y=cond_y)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    log.write(_format_row(it, lr, loss_val, nll_x.item(),
                                          nll_y.item(), float("nan")) + "\n")
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {it}; last good "
                        f"checkpoint retained in {out_dir}"
                    )
                backward(loss)
            grad_norm = clip_gradients(params, grad_clip)
            optimizer.step(lr)
            optimizer.zero_grad()
            if it % config.log_interval == 0 or it == config.iterations - 1:
                log.write(_format_row(it, lr, loss_val, nll_x.item(),
                                      nll_y.item(), grad_norm) + "\n")
            if config.checkpoint_interval and it % config.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"checkpoint_{it:07d}.bin", model,
                                config, it, optimizer, normalization)

    if config.shift_mode == "frozen-zero" and config.iterations > 0:
        _posthoc_shift_estimate(model, config, corpus, norm_arrays, root)

    save_checkpoint(final_path, model, config, config.iterations, optimizer,
                    normalization)
    return TrainResult(model, config, final_path, log_path, normalization)


def _posthoc_shift_estimate(model, config, corpus, norm_arrays,
                            root: RandomStream) -> None:
    """Infer mu and the covariance factor from latent statistics of both
    domains after zero-shift training (the non-learned-shift variant)."""
    n_batches = max(1, 64 // config.batch_size)
    xs, ys, cxs, cys = [], [], [], []
    for j in range(n_batches):
        x, y = sample_unpaired_batch(corpus, config.batch_size,
                                     config.patch_size, root.spawn("posthoc", j))
        x = dequantize_5bit(x, root.spawn("posthoc-dqx", j))
        y = dequantize_5bit(y, root.spawn("posthoc-dqy", j))
        cxs.append(x)
        cys.append(norm_arrays.align_to_clean(y) if norm_arrays is not None else y)
        if norm_arrays is not None:
            x = (x - norm_arrays.mean_x[:, None, None]) \
                / norm_arrays.std_x[:, None, None]
            y = (y - norm_arrays.mean_y[:, None, None]) \
                / norm_arrays.std_y[:, None, None]
        xs.append(x)
        ys.append(y)
    model.estimate_shift_posthoc(np.concatenate(xs), np.concatenate(ys),
                                 root.spawn("posthoc-cond"),
                                 cond_x=np.concatenate(cxs),
                                 cond_y=np.concatenate(cys))
