"""L1 training loop with Adam, step-decay schedule, and exact resume.

Determinism contract: a (seed, config, dataset) triple fixes the entire
trajectory. The only RNG is one PCG64 generator consumed exclusively by
batch sampling, its state is serialized into checkpoints, and updates are
computed in the parameters' own dtype, so an interrupted-and-resumed run
reproduces the uninterrupted loss log bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .tensor import Tensor, Tape, backward, l1_loss
from .data import DataError, extract_patch_pair, quantize, random_augment
from .metrics import MetricRecord, MetricReport, psnr_y, ssim_y
from .weights import save_arrays, load_arrays, save_model, load_model

__all__ = [
    "NumericsError",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "TrainConfig",
    "train",
    "predict",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "LOSS_CSV_HEADER",
]

LOSS_CSV_HEADER = "iter,epoch,lr,l1"


class NumericsError(ArithmeticError):
    """Training produced NaN/Inf and was aborted."""


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus the
    shared step counter. Moments live in the parameters' dtype."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model) -> "AdamState":
        m = {name: np.zeros_like(p.data) for name, p in model.named_parameters()}
        v = {name: np.zeros_like(p.data) for name, p in model.named_parameters()}
        return cls(m=m, v=v)


def adam_step(named_params, state: AdamState, lr: float):
    """One bias-corrected Adam update over (name, tensor) pairs.

    Parameters whose grad is None are skipped (their moments keep decaying
    only when they actually receive gradients). A non-finite gradient
    aborts, naming the parameter.
    """
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in parameter {name!r} at step {state.t}")
        dt = p.data.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * (g * g)
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))


def lr_schedule(epoch: int, lr0: float = 1e-4, halve_at_epoch: int = 200) -> float:
    """Constant lr0, halved once from halve_at_epoch onward."""
    return lr0 * 0.5 if epoch >= halve_at_epoch else lr0


# ---------------------------------------------------------------------------
# configuration and checkpoint plumbing


@dataclass
class TrainConfig:
    batch_size: int = 16
    patch_size: int = 48
    lr0: float = 1e-4
    halve_at_epoch: int = 200
    epochs: int = 300
    iterations_per_epoch: int = 1000
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0  # iterations; 0 = final checkpoint only

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch


def _train_hash(cfg: TrainConfig) -> str:
    text = ",".join(f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _arch_hash(model) -> str:
    text = "\n".join(f"{n} {tuple(t.shape)}" for n, t in model.named_parameters())
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(stem, model, state: AdamState, cfg: TrainConfig, rng, iteration: int):
    """Write <stem>.aldw / <stem>.opt.aldw / <stem>.meta.json."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_model(f"{stem}.aldw", model)
    opt_items = []
    for name, _ in model.named_parameters():
        opt_items.append((f"{name}.m", state.m[name]))
        opt_items.append((f"{name}.v", state.v[name]))
    save_arrays(f"{stem}.opt.aldw", opt_items)
    meta = {
        "iteration": iteration,
        "adam_t": state.t,
        "arch_hash": _arch_hash(model),
        "train_hash": _train_hash(cfg),
        "rng_state": rng.bit_generator.state,
    }
    Path(f"{stem}.meta.json").write_text(json.dumps(meta, indent=1))


def load_checkpoint(stem, model, cfg: TrainConfig):
    """Restore weights/moments/RNG; returns (state, rng, start_iteration).

    Refuses to resume when the architecture or the training configuration
    hash differs from what the checkpoint was written with.
    """
    stem = Path(stem)
    meta = json.loads(Path(f"{stem}.meta.json").read_text())
    if meta["arch_hash"] != _arch_hash(model):
        raise ValueError("checkpoint was written for a different architecture")
    if meta["train_hash"] != _train_hash(cfg):
        raise ValueError("checkpoint was written with a different training configuration")
    load_model(f"{stem}.aldw", model)
    opt = load_arrays(f"{stem}.opt.aldw")
    state = AdamState.for_model(model)
    for name, _ in model.named_parameters():
        state.m[name] = opt[f"{name}.m"]
        state.v[name] = opt[f"{name}.v"]
    state.t = int(meta["adam_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return state, rng, int(meta["iteration"])


# ---------------------------------------------------------------------------
# training


def _dataset_scale(pairs) -> int:
    scales = set()
    for hr, lr in pairs:
        if hr.shape[1] % lr.shape[1] or hr.shape[2] % lr.shape[2]:
            raise DataError(f"HR {hr.shape} not an integer multiple of LR {lr.shape}")
        sy = hr.shape[1] // lr.shape[1]
        sx = hr.shape[2] // lr.shape[2]
        if sy != sx:
            raise DataError(f"anisotropic scale in pair: {hr.shape} vs {lr.shape}")
        scales.add(sy)
    if len(scales) != 1:
        raise DataError(f"dataset mixes scales: {sorted(scales)}")
    return scales.pop()


def _sample_batch(pairs, cfg: TrainConfig, scale: int, rng):
    lrs, hrs = [], []
    for _ in range(cfg.batch_size):
        hr, lr = pairs[int(rng.integers(len(pairs)))]
        pp = extract_patch_pair(hr, lr, cfg.patch_size, scale, rng)
        if cfg.augment:
            pp = random_augment(pp, rng)
        lrs.append(pp.lr)
        hrs.append(pp.hr)
    return np.stack(lrs), np.stack(hrs)


def train(model, pairs, cfg: TrainConfig, out_dir=None, resume=None, on_epoch_end=None):
    """Run the full schedule; returns the loss log as (iter, epoch, lr, l1) rows.

    pairs: [(hr, lr)] float arrays. out_dir (optional) receives loss.csv
    plus checkpoint files; resume points at a checkpoint stem written by a
    previous run with the same config. on_epoch_end(epoch, model) fires
    after each completed epoch.
    """
    if not pairs:
        raise DataError("training set is empty")
    scale = _dataset_scale(pairs)
    model_scale = getattr(model, "scale", None)
    if model_scale is not None and model_scale != scale:
        raise DataError(f"model upsamples x{model_scale} but the dataset is x{scale}")

    if resume is not None:
        state, rng, start_iter = load_checkpoint(resume, model, cfg)
    else:
        state = AdamState.for_model(model)
        rng = np.random.default_rng(cfg.seed)
        start_iter = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss.csv"
        if resume is not None and log_path.exists():
            log_fh = open(log_path, "a", newline="")
        else:
            log_fh = open(log_path, "w", newline="")
            log_fh.write(LOSS_CSV_HEADER + "\n")

    rows = []
    try:
        for it in range(start_iter, cfg.total_iterations):
            epoch = it // cfg.iterations_per_epoch
            lr = lr_schedule(epoch, cfg.lr0, cfg.halve_at_epoch)
            batch_lr, batch_hr = _sample_batch(pairs, cfg, scale, rng)
            model.zero_grads()
            with Tape():
                pred = model.forward(Tensor(batch_lr))
                loss = l1_loss(pred, Tensor(batch_hr))
                backward(loss)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise NumericsError(f"non-finite loss at iteration {it}")
            adam_step(list(model.named_parameters()), state, lr)
            rows.append((it, epoch, lr, lval))
            if log_fh is not None:
                log_fh.write(f"{it},{epoch},{lr:.10g},{lval:.8e}\n")
            finished_epoch = (it + 1) % cfg.iterations_per_epoch == 0
            if out_dir is not None and cfg.checkpoint_every:
                if (it + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / "checkpoint", model, state, cfg, rng, it + 1)
            if finished_epoch and on_epoch_end is not None:
                on_epoch_end(epoch, model)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint", model, state, cfg, rng, cfg.total_iterations)
    return rows


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(model, lr_img: np.ndarray) -> np.ndarray:
    """Run one [3,H,W] image through the model (no tape), returning [3,sH,sW]."""
    x = Tensor(lr_img[None].astype(np.float32))
    return model.forward(x).data[0]


def evaluate(model_or_fn, named_pairs, shave: int | None = None) -> MetricReport:
    """Score (name, hr, lr) triples: PSNR/SSIM on Y of quantized outputs.

    model_or_fn is either a model (predict() is used) or a callable
    lr -> sr array, which lets the bicubic baseline flow through the same
    path. shave defaults to the dataset scale.
    """
    records = []
    for name, hr, lr in named_pairs:
        s = hr.shape[1] // lr.shape[1]
        if callable(model_or_fn) and not hasattr(model_or_fn, "forward"):
            sr = model_or_fn(lr)
        else:
            sr = predict(model_or_fn, lr)
        if sr.shape != hr.shape:
            raise DataError(f"{name}: output {sr.shape} does not match HR {hr.shape}")
        # snap both sides to the same f64 8-bit grid; the reference is a
        # lossless re-snap since it came from an 8-bit file
        sr = quantize(np.asarray(sr, dtype=np.float64))
        ref = quantize(np.asarray(hr, dtype=np.float64))
        records.append(
            MetricRecord(
                name,
                psnr_y(sr, ref, shave=s if shave is None else shave),
                ssim_y(sr, ref, shave=s if shave is None else shave),
            )
        )
    return MetricReport(records)
