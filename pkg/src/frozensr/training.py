"""Adam training against the WFE loss, evaluation and latency benchmarking."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
import torch

from . import imagecore, metrics, spectral
from .data import DatasetPair, check_pair, shuffle_and_batch
from .errors import ConfigError, DatasetError, ParameterError, ShapeError, TrainingError
from .model import Checkpoint, ModelConfig, ResidualSR, build_model, extract_parameters, init_parameters

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = {4: 4, 8: 6}
LOG_HEADER = ("step", "epoch", "train_wfe_loss", "val_ssim", "val_psnr", "wallclock_seconds")


@dataclass
class TrainConfig:
    scale: int = 4
    batch_size: int = 2
    learning_rate: float = 3e-6
    epochs: int | None = None
    seed: int = 0
    wfe_alpha: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_interval: int = 50
    val_size: int = 8

    def __post_init__(self):
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS.get(self.scale, 4)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.wfe_alpha < 0:
            raise ConfigError(f"wfe_alpha must be >= 0, got {self.wfe_alpha}")
        if self.val_interval < 1:
            raise ConfigError(f"val_interval must be >= 1, got {self.val_interval}")
        if self.val_size < 1:
            raise ConfigError(f"val_size must be >= 1, got {self.val_size}")


# --------------------------------------------------------------------------
# Adam


def _zeros_like(x):
    return torch.zeros_like(x) if isinstance(x, torch.Tensor) else np.zeros_like(x)


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Works on dicts of numpy arrays or torch tensors; inputs are not mutated.
    """
    if set(params) != set(grads):
        raise ShapeError("params and grads have different keys")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if tuple(g.shape) != tuple(p.shape):
            raise ShapeError(f"gradient for {k} has shape {tuple(g.shape)}, parameter has {tuple(p.shape)}")
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m, v = _zeros_like(p), _zeros_like(p)
        elif tuple(m.shape) != tuple(p.shape):
            raise ShapeError(f"optimizer state for {k} has shape {tuple(m.shape)}, parameter has {tuple(p.shape)}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params[k] = p - lr * (m / bc1) / ((v / bc2) ** 0.5 + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(t, m_new, v_new)


# --------------------------------------------------------------------------
# logging


@dataclass(frozen=True)
class LogRow:
    step: int
    epoch: int
    train_wfe_loss: float
    val_ssim: float
    val_psnr: float
    wallclock_seconds: float

    def metric_columns(self) -> tuple:
        return (self.step, self.epoch, self.train_wfe_loss, self.val_ssim, self.val_psnr)


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)

    def append(self, row: LogRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"log steps must increase (got {row.step} after {self.rows[-1].step})")
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(LOG_HEADER)
            for r in self.rows:
                w.writerow([r.step, r.epoch, repr(r.train_wfe_loss), repr(r.val_ssim), repr(r.val_psnr), f"{r.wallclock_seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        out = cls()
        with open(path, newline="", encoding="utf-8") as f:
            for rec in csv.DictReader(f):
                out.append(
                    LogRow(
                        int(rec["step"]),
                        int(rec["epoch"]),
                        float(rec["train_wfe_loss"]),
                        float(rec["val_ssim"]),
                        float(rec["val_psnr"]),
                        float(rec["wallclock_seconds"]),
                    )
                )
        return out


# --------------------------------------------------------------------------
# inference helpers


def _stack(images: Sequence[np.ndarray], dtype) -> torch.Tensor:
    arr = np.stack([np.asarray(i, dtype=np.float64).transpose(2, 0, 1) for i in images])
    return torch.from_numpy(arr).to(dtype)


def predict(model: ResidualSR, lr_images: Sequence[np.ndarray], batch_size: int = 4) -> list[np.ndarray]:
    """Raw model outputs as ``(H, W, C)`` float64 arrays."""
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for k in range(0, len(lr_images), batch_size):
            y = model(_stack(lr_images[k : k + batch_size], dtype))
            outs.extend(y.to(torch.float64).numpy().transpose(0, 2, 3, 1))
    return [np.ascontiguousarray(o) for o in outs]


class _WeightCache(dict):
    def __init__(self, alpha: float):
        super().__init__()
        self.alpha = alpha

    def __missing__(self, hw):
        self[hw] = spectral.build_weight_map(hw[0], hw[1], self.alpha)
        return self[hw]


def _validate(model, val_pairs, ssim_mode="windowed") -> tuple[float, float]:
    outs = predict(model, [p.lr for p in val_pairs])
    recs = [metrics.score(p.id, imagecore.clamp01(o), p.hr, ssim_mode) for p, o in zip(val_pairs, outs)]
    agg = metrics.aggregate(recs)
    return agg.ssim, agg.psnr_db


def _check_scale(pairs: Sequence[DatasetPair], scale: int) -> None:
    for p in pairs:
        if p.hr.shape[0] != p.lr.shape[0] * scale or p.hr.shape[1] != p.lr.shape[1] * scale:
            raise ConfigError(f"pair {p.id!r} is not a x{scale} pair (lr {p.lr.shape[:2]}, hr {p.hr.shape[:2]})")


# --------------------------------------------------------------------------
# training


def train(
    pairs: Sequence[DatasetPair],
    model_config: ModelConfig,
    train_config: TrainConfig,
    on_row: Callable[[LogRow], None] | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Fit the residual model with Adam on the batch-mean WFE loss.

    Log rows are written at step 0 (the untouched initial model), every
    ``val_interval`` steps and at the end of every epoch. A row's
    ``train_wfe_loss`` is the mean batch loss since the previous row; the
    step-0 row uses the initial model's loss on the first ``val_size``
    training pairs. Validation uses the first ``val_size`` test pairs, or the
    training pairs when there is no test split.
    """
    tc = train_config
    if model_config.scale != tc.scale:
        raise ConfigError(f"model scale x{model_config.scale} differs from training scale x{tc.scale}")
    train_pairs = [p for p in pairs if p.split == "train"]
    if not train_pairs:
        raise DatasetError("training split is empty")
    _check_scale(pairs, tc.scale)
    for p in pairs:
        check_pair(p, tc.scale)
    val_pairs = ([p for p in pairs if p.split == "test"] or train_pairs)[: tc.val_size]

    model = build_model(model_config, init_parameters(model_config, tc.seed), torch.float32)
    weights = _WeightCache(tc.wfe_alpha)
    state = AdamState()
    history = TrainingLog()
    start = time.perf_counter()

    def emit(step, epoch, loss):
        ssim_v, psnr_v = _validate(model, val_pairs)
        row = LogRow(step, epoch, float(loss), ssim_v, psnr_v, time.perf_counter() - start)
        history.append(row)
        log.info("step %d epoch %d loss %.6g val ssim %.4f psnr %.3f", *row.metric_columns())
        if on_row is not None:
            on_row(row)

    monitor = train_pairs[: tc.val_size]
    init_out = predict(model, [p.lr for p in monitor])
    init_loss = float(np.mean([spectral.wfe_loss(o, p.hr, weights[o.shape[:2]]) for o, p in zip(init_out, monitor)]))
    emit(0, 0, init_loss)

    step = 0
    last_loss = None
    pending: list[float] = []
    named = dict(model.named_parameters())
    for epoch in range(tc.epochs):
        batches = shuffle_and_batch(train_pairs, tc.batch_size, tc.seed, epoch)
        for b, batch in enumerate(batches):
            step += 1
            out = model(_stack([p.lr for p in batch], torch.float32))
            out_np = out.detach().to(torch.float64).numpy()
            grad = np.empty_like(out_np)
            losses = []
            for i, p in enumerate(batch):
                gen = out_np[i].transpose(1, 2, 0)
                loss_i, g_i = spectral.wfe_loss_and_gradient(gen, p.hr, weights[gen.shape[:2]])
                losses.append(loss_i)
                grad[i] = g_i.transpose(2, 0, 1) / len(batch)
            loss = float(np.mean(losses))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite WFE loss at step {step} (epoch {epoch}): {loss}")
            model.zero_grad(set_to_none=True)
            out.backward(torch.from_numpy(grad).to(out.dtype))
            with torch.no_grad():
                params = {k: v.detach().clone() for k, v in named.items()}
                grads = {k: v.grad for k, v in named.items()}
                new, state = adam_step(
                    params, grads, state, tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps
                )
                for k, v in named.items():
                    v.copy_(new[k])
            pending.append(loss)
            last_loss = loss
            if step % tc.val_interval == 0 or b == len(batches) - 1:
                emit(step, epoch, float(np.mean(pending)))
                pending = []

    meta = {
        "epochs_completed": tc.epochs,
        "final_train_loss": last_loss,
        "seed": tc.seed,
        "steps": step,
    }
    return Checkpoint(model_config, extract_parameters(model), meta), history


# --------------------------------------------------------------------------
# evaluation


BASELINES = {
    "bilinear": imagecore.bilinear_upsample,
    "bicubic": imagecore.bicubic_upsample,
}


@dataclass
class Evaluation:
    records: list[metrics.MetricsRecord]
    aggregate: metrics.MetricsRecord
    baseline: str | None = None
    baseline_records: list[metrics.MetricsRecord] | None = None
    baseline_aggregate: metrics.MetricsRecord | None = None
    outputs: list[np.ndarray] | None = None


def evaluate(
    checkpoint: Checkpoint,
    pairs: Sequence[DatasetPair],
    baseline: Literal["bicubic", "bilinear"] | None = None,
    ssim_mode: metrics.SSIMMode = "windowed",
    keep_outputs: bool = False,
) -> Evaluation:
    """Score clamped model outputs (and optionally a baseline) on ``pairs``."""
    if not pairs:
        raise DatasetError("evaluation split is empty")
    _check_scale(pairs, checkpoint.config.scale)
    if baseline is not None and baseline not in BASELINES:
        raise ConfigError(f"unknown baseline {baseline!r}; choose from {sorted(BASELINES)}")
    model = checkpoint.build()
    outputs = [imagecore.clamp01(o) for o in predict(model, [p.lr for p in pairs])]
    records = [metrics.score(p.id, o, p.hr, ssim_mode) for p, o in zip(pairs, outputs)]
    result = Evaluation(records, metrics.aggregate(records), outputs=outputs if keep_outputs else None)
    if baseline is not None:
        up = BASELINES[baseline]
        s = checkpoint.config.scale
        result.baseline = baseline
        result.baseline_records = [metrics.score(p.id, up(p.lr, s), p.hr, ssim_mode) for p in pairs]
        result.baseline_aggregate = metrics.aggregate(result.baseline_records)
    return result


def write_records_csv(records: Sequence[metrics.MetricsRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(("item_id", "mse", "psnr_db", "ssim"))
        for r in records:
            w.writerow((r.item_id, repr(r.mse), repr(r.psnr_db), repr(r.ssim)))


def read_records_csv(path) -> list[metrics.MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            metrics.MetricsRecord(r["item_id"], float(r["mse"]), float(r["psnr_db"]), float(r["ssim"]))
            for r in csv.DictReader(f)
        ]


# --------------------------------------------------------------------------
# latency


def benchmark_inference(
    checkpoint: Checkpoint,
    n_patches: int,
    lr_dims: tuple[int, int] | None = None,
    warmup: int = 3,
    seed: int = 0,
) -> dict:
    """Time single-patch forward passes in milliseconds (warmup excluded)."""
    if n_patches < 1:
        raise ParameterError(f"n_patches must be >= 1, got {n_patches}")
    cfg = checkpoint.config
    if lr_dims is None:
        lr_dims = (256 // cfg.scale, 256 // cfg.scale)
    cfg.check_input(*lr_dims)
    model = checkpoint.build()
    model.eval()
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((1, cfg.in_channels, *lr_dims))).to(torch.float32)
    times = []
    with torch.no_grad():
        for _ in range(max(warmup, 3)):
            model(x)
        for _ in range(n_patches):
            t0 = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - t0) * 1000.0)
    return {
        "mean_ms": float(np.mean(times)),
        "std_ms": float(np.std(times)),
        "param_count": sum(p.numel() for p in model.parameters()),
        "n_patches": n_patches,
    }
