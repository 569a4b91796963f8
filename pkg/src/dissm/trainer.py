"""Optimisation loop: AdamW, cosine learning rate, EMA weights and checkpoints."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, emit, parse
from .data import BatchSampler, Dataset, check_geometry, load_dataset
from .diffusion import linear_beta_schedule, training_loss
from .model import ConfigError, DiS, ModelConfig

METRICS_HEADER = ("step", "lr", "loss", "loss_simple", "loss_vlb", "wall_ms")
RESOLVED_CONFIG = "config.txt"
METRICS_FILE = "metrics.csv"
FINAL_CHECKPOINT = "final.ckpt"

# stream ids under the run seed
STREAM_MODEL, STREAM_DATA, STREAM_LOSS, STREAM_DROPOUT = range(4)


class TrainingDiverged(ArithmeticError):
    """Loss or gradients became non-finite; carries the 1-based step."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step
        self.detail = detail


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "OptimState":
        arrays = {k: _array(p) for k, p in params.items()}
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, **hyper)


def _array(p) -> np.ndarray:
    return p.data if isinstance(p, T.Tensor) else p


def adamw_step(params: dict, grads: dict[str, np.ndarray], state: OptimState, lr: float) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place.

    ``params`` maps names to tensors or arrays. Every gradient is checked
    before anything is modified, so a non-finite gradient leaves the
    parameters and moments untouched.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise T.NumericDomainError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        w = _array(p)
        g = np.asarray(grads[name], dtype=w.dtype)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            w -= lr * state.weight_decay * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def cosine_lr(step: int, total: int, base: float = 1e-4) -> float:
    """``base * (1 + cos(pi * step / total)) / 2``; no warmup."""
    if total <= 0 or not 0 <= step <= total:
        raise ValueError(f"need 0 <= step <= total, got step={step} total={total}")
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# EMA


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float = 0.9999

    @classmethod
    def from_params(cls, params: dict, decay: float = 0.9999) -> "EmaState":
        return cls({k: _array(p).copy() for k, p in params.items()}, decay)


def ema_update(shadow: dict[str, np.ndarray], params: dict, decay: float = 0.9999) -> dict[str, np.ndarray]:
    """``shadow <- decay * shadow + (1 - decay) * params`` in place."""
    for name, s in shadow.items():
        p = _array(params[name])
        if p.shape != s.shape:
            raise T.DimensionError(f"{name}: shadow {s.shape} vs parameter {p.shape}")
        s *= decay
        s += (1.0 - decay) * p
    return shadow


# ---------------------------------------------------------------------------
# checkpoint helpers


def _rng_state(rngs: dict[str, np.random.Generator]) -> dict:
    return {k: r.bit_generator.state for k, r in rngs.items()}


def make_checkpoint(run: RunConfig, step: int, model: DiS, opt: OptimState, ema: EmaState,
                    rngs: dict[str, np.random.Generator] | None = None) -> Checkpoint:
    return Checkpoint(emit(run), step, {
        "params": model.state_dict(),
        "adam_m": {k: a.copy() for k, a in opt.m.items()},
        "adam_v": {k: a.copy() for k, a in opt.v.items()},
        "ema": {k: a.copy() for k, a in ema.shadow.items()},
    }, _rng_state(rngs or {}))


def checkpoint_config(ckpt: Checkpoint) -> RunConfig:
    try:
        return parse(ckpt.config_text)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config record is invalid: {exc}") from exc


def load_model(ckpt: Checkpoint, use_ema: bool = True, expected: ModelConfig | None = None) -> DiS:
    """Rebuild the network stored in ``ckpt``; EMA weights by default.

    With ``expected`` given, any difference from the stored model config is an error.
    """
    cfg = checkpoint_config(ckpt).model
    if expected is not None and expected != cfg:
        diffs = [f"{k}: checkpoint={getattr(cfg, k)!r} expected={getattr(expected, k)!r}"
                 for k in cfg.__dataclass_fields__ if getattr(cfg, k) != getattr(expected, k)]
        raise ConfigError("checkpoint config mismatch: " + "; ".join(diffs))
    model = DiS(cfg, rng=0)
    try:
        model.load_state_dict(ckpt.table("ema" if use_ema else "params"))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint tensors do not match its config: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: DiS
    ema: EmaState
    opt: OptimState
    checkpoint: Checkpoint
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def smoothed(self, key: str = "loss_simple", window: int = 100, last: bool = True) -> float:
        vals = [r[key] for r in self.rows]
        part = vals[-window:] if last else vals[:window]
        return float(np.mean(part))

    @property
    def final_loss(self) -> float:
        return self.smoothed("loss_simple", last=True)

    @property
    def initial_loss(self) -> float:
        return self.smoothed("loss_simple", last=False)


def _fmt(v: float) -> str:
    return repr(float(v))


def train(run: RunConfig, data: Dataset | None = None, out_dir: str | Path | None = None,
          on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train a DiS model; writes ``config.txt``, ``metrics.csv`` and checkpoints under ``out_dir``.

    All randomness comes from generators seeded by ``(seed, stream)``, so a
    run is reproducible from its resolved config. Raises
    :class:`TrainingDiverged` when the loss or a gradient stops being finite.
    """
    mc, tc = run.model, run.train
    if data is None:
        data = load_dataset(tc.dataset, seed=0, size=tc.dataset_size)
    check_geometry(data, mc.H, mc.W, mc.C, mc.num_classes)

    rngs = {name: np.random.default_rng([tc.seed, sid]) for name, sid in
            (("model", STREAM_MODEL), ("data", STREAM_DATA), ("loss", STREAM_LOSS), ("dropout", STREAM_DROPOUT))}
    model = DiS(mc, rng=rngs["model"])
    params = model.parameters()
    opt = OptimState.for_params(params, weight_decay=tc.weight_decay)
    ema = EmaState.from_params(params, tc.ema_decay)
    schedule = linear_beta_schedule(tc.diffusion_steps, tc.beta_1, tc.beta_T)
    batches = BatchSampler(data, tc.batch_size, rngs["data"], flip=tc.flip)

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / RESOLVED_CONFIG).write_text(emit(run), encoding="utf-8")
        fh = (out / METRICS_FILE).open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

    result = TrainResult(model, ema, opt, None)  # type: ignore[arg-type]
    try:
        for k in range(tc.steps):
            step = k + 1
            t0 = time.perf_counter_ns()
            lr = tc.lr if tc.lr_schedule == "constant" else cosine_lr(k, tc.steps, tc.lr)
            x, labels, _ = batches.next()
            c = drop = None
            if mc.num_classes:
                c = labels
                drop = rngs["dropout"].random(x.shape[0]) < tc.cond_dropout_p
            try:
                out_loss = training_loss(model, x, schedule, rngs["loss"], c=c, drop=drop,
                                         lambda_vlb=tc.lambda_vlb)
                loss_val = out_loss.loss.item()
                if not math.isfinite(loss_val):
                    raise T.NumericDomainError(f"loss is {loss_val}")
                grads = T.backward(out_loss.loss, params)
                if tc.grad_clip > 0:
                    clip_grad_norm(grads, tc.grad_clip)
                adamw_step(params, grads, opt, lr)
            except T.NumericDomainError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            ema_update(ema.shadow, params, tc.ema_decay)
            wall_ms = (time.perf_counter_ns() - t0) / 1e6 if tc.log_wall_time else 0.0
            row = {"step": step, "lr": lr, "loss": loss_val, "loss_simple": out_loss.loss_simple,
                   "loss_vlb": out_loss.loss_vlb, "wall_ms": wall_ms}
            result.rows.append(row)
            if writer is not None:
                writer.writerow([step] + [_fmt(row[h]) for h in METRICS_HEADER[1:]])
            if on_step is not None:
                on_step(step, row)
            if out is not None and (step % tc.ckpt_every == 0 or step == tc.steps):
                path = out / (FINAL_CHECKPOINT if step == tc.steps else f"step_{step:06d}.ckpt")
                make_checkpoint(run, step, model, opt, ema, rngs).save(path)
                result.checkpoints.append(path)
    finally:
        if fh is not None:
            fh.close()
    result.checkpoint = make_checkpoint(run, tc.steps, model, opt, ema, rngs)
    return result
