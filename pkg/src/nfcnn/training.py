"""Loss, optimization, the training loop, and gradient verification.

The per-stage loss on either branch is

    0.5 * mean((pred - target)^2) + beta * mean(|pred - target|)

with means taken over every entry (batch and pixels), so loss magnitudes
do not depend on batch or patch size. The total loss sums, over stages,
the clean-branch term plus ``alpha`` times the noise-branch term; one
backward pass then updates everything (stage-wise supervision).

Pixel data enters training scaled to [0, 1]; file and metric interfaces
stay in [0, 255].
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import batch_iter
from .model import ModelConfig, model_forward, model_init
from .tensor import Tensor, backward

PIXEL_MAX = 255.0


class TrainingDiverged(RuntimeError):
    """Loss became non-finite or blew past the divergence bound."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.01
    base_lr: float = 1e-3
    lr_drop_step: int = 300_000
    lr_drop_factor: float = 10.0
    batch_size: int = 6
    patch: int = 180
    total_steps: int = 1000
    seed: int = 0
    flip_enabled: bool = True
    blur_prob: float = 0.2
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _branch_loss(pred, target, beta):
    diff = T.sub(pred, target)
    loss = T.scale(T.mean_of_squares(diff), 0.5)
    if beta != 0.0:
        loss = T.add(loss, T.scale(T.mean_of_abs(diff), beta))
    return loss


def loss_clean(pred, target, beta):
    """Clean-branch loss: half mean squared error plus a beta-weighted
    mean absolute term."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return _branch_loss(pred, target, beta)


def loss_noise(pred, target, beta):
    """Noise-branch loss; identical functional form, noise targets."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return _branch_loss(pred, target, beta)


def stage_losses(stage_outputs, clean_target, noise_target, beta):
    """Per-stage (clean, noise) loss tensors."""
    if not stage_outputs:
        raise ValueError("no stage outputs to score")
    pairs = []
    for out in stage_outputs:
        pairs.append((loss_clean(out.clean, clean_target, beta),
                      loss_noise(out.noise, noise_target, beta)))
    return pairs


def total_loss(stage_outputs, clean_target, noise_target, alpha, beta):
    """Sum over stages of clean loss + alpha * noise loss."""
    pairs = stage_losses(stage_outputs, clean_target, noise_target, beta)
    total = None
    for lc, ln in pairs:
        term = T.add(lc, T.scale(ln, alpha)) if alpha != 0.0 else lc
        total = term if total is None else T.add(total, term)
    return total


def lr_at_step(step, config):
    """Base rate before the drop step, divided by the factor from it on."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < config.lr_drop_step:
        return config.base_lr
    return config.base_lr / config.lr_drop_factor


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params):
        m = {n: np.zeros_like(t.data) for n, t in params.trainable()}
        v = {n: np.zeros_like(t.data) for n, t in params.trainable()}
        return cls(m=m, v=v)


def adam_step(params, state, lr):
    """One bias-corrected Adam update over every trainable parameter."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.trainable():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad.astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def batch_to_model_scale(batch):
    """(noisy, clean, noise) in [0, 255] -> [0, 1] tensors, keeping
    noisy - clean == noise exact in the scaled domain."""
    noisy, clean, _ = batch
    x = np.ascontiguousarray(noisy, dtype=np.float32) / np.float32(PIXEL_MAX)
    c = np.ascontiguousarray(clean, dtype=np.float32) / np.float32(PIXEL_MAX)
    n = x - c
    return Tensor(x), Tensor(c), Tensor(n)


DIVERGENCE_BOUND = 1e6


def train_step(params, model_config, train_config, state, batch, step):
    """Forward, loss, backward, Adam update.

    Returns (total, clean_sum, noise_sum) as floats; the total is
    clean_sum + alpha * noise_sum. Raises TrainingDiverged on a
    non-finite or absurd loss.
    """
    noisy_t, clean_t, noise_t = batch_to_model_scale(batch)
    rng = np.random.default_rng([train_config.seed, step, 7])
    outputs, _ = model_forward(params, model_config, noisy_t, "train", rng)
    pairs = stage_losses(outputs, clean_t, noise_t, train_config.beta)

    total = None
    clean_sum = 0.0
    noise_sum = 0.0
    for lc, ln in pairs:
        clean_sum += lc.item()
        noise_sum += ln.item()
        term = (T.add(lc, T.scale(ln, train_config.alpha))
                if train_config.alpha != 0.0 else lc)
        total = term if total is None else T.add(total, term)

    value = total.item()
    if not np.isfinite(value) or value > DIVERGENCE_BOUND:
        raise TrainingDiverged(f"loss {value} at step {step}")

    params.zero_grad()
    backward(total)
    adam_step(params, state, lr_at_step(step, train_config))
    params.zero_grad()
    return value, clean_sum, noise_sum


def format_log_line(step, lr, total, clean_sum, noise_sum):
    return f"{step}\t{lr:.8g}\t{total:.8g}\t{clean_sum:.8g}\t{noise_sum:.8g}"


def fit(model_config, train_config, noise, data_dir, params=None,
        log_path=None, ckpt_path=None, ckpt_every=0, progress=None):
    """Train from a data directory; returns (params, adam state).

    Appends one log line per step when ``log_path`` is given, writes
    periodic checkpoints every ``ckpt_every`` steps plus a final one when
    ``ckpt_path`` is given, and calls ``progress(step, loss)`` if set.
    """
    if params is None:
        params = model_init(model_config, train_config.seed)
    state = AdamState.create(params)
    stream = batch_iter(data_dir, train_config, noise,
                        model_config.image_channels, train_config.seed)
    log = open(log_path, "a") if log_path else None
    try:
        for step in range(train_config.total_steps):
            batch = next(stream)
            total, lc, ln = train_step(params, model_config, train_config,
                                       state, batch, step)
            if log:
                log.write(format_log_line(
                    step, lr_at_step(step, train_config), total, lc, ln) + "\n")
            if progress:
                progress(step, total)
            if ckpt_path and ckpt_every and (step + 1) % ckpt_every == 0 \
                    and step + 1 < train_config.total_steps:
                save_checkpoint(ckpt_path, model_config, params, state)
    finally:
        if log:
            log.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, model_config, params, state)
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def lines(self):
        out = []
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            out.append(f"{status:4s} {e.name:28s} max_rel_err={e.max_rel_error:.3e} "
                       f"tol={e.tolerance:.0e}")
        out.append(f"suite max_rel_err={self.max_rel_error:.3e} "
                   f"elapsed={self.elapsed:.1f}s")
        return out


def grad_check(fn, tensors, rng, coords_per_tensor=4, step=1e-4,
               denom_floor=1e-2, retry_tol=1e-6):
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` rebuilds the forward pass from the given float64 leaf tensors
    on every call and returns a scalar tensor. A handful of coordinates
    per tensor is probed; the relative error denominator is floored so
    near-zero gradients do not produce spurious blowups.

    A coordinate whose error exceeds ``retry_tol`` is re-probed at
    step/10 and step/100 and the smallest error kept: a leaky-relu or
    absolute-value kink inside the difference interval inflates the
    large-step measurement, while a genuinely wrong gradient mismatches
    at every step size.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise ValueError("grad_check needs float64 tensors")
        t.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    def probe(flat, i, a, h):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn().item()
        flat[i] = orig - h
        f_minus = fn().item()
        flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        return abs(a - fd) / max(abs(a), abs(fd), denom_floor)

    max_rel = 0.0
    for t, full_grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        k = min(coords_per_tensor, n)
        idx = rng.choice(n, size=k, replace=False)
        for i in idx:
            a = float(full_grad.reshape(-1)[i])
            rel = probe(flat, i, a, step)
            for shrink in (10.0, 100.0):
                if rel <= retry_tol:
                    break
                rel = min(rel, probe(flat, i, a, step / shrink))
            max_rel = max(max_rel, rel)
    for t in tensors:
        t.zero_grad()
    return max_rel


def _op_checks(rng):
    """(name, make) pairs; make() -> (fn, leaf tensors, tolerance)."""

    def rand(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True,
                      dtype=np.float64)

    checks = []

    def add_check(name, build, tol=1e-5):
        checks.append((name, build, tol))

    def conv_case():
        x = rand((1, 2, 5, 5))
        w = rand((3, 2, 3, 3))
        b = rand((3,))
        return lambda: T.mean_of_squares(T.conv2d(x, w, b)), [x, w, b]

    add_check("conv2d", conv_case)

    def pad_case():
        x = rand((1, 2, 3, 4))
        return lambda: T.mean_of_squares(T.replication_pad2d(x, 2)), [x]

    add_check("replication_pad2d", pad_case)

    def bn_train_case():
        x = rand((2, 3, 4, 4))
        g = rand((3,), 0.5, 1.5)
        b = rand((3,))
        return (lambda: T.mean_of_squares(
            T.batch_norm2d(x, g, b, training=True)), [x, g, b])

    add_check("batch_norm2d(train)", bn_train_case)

    def bn_eval_case():
        x = rand((2, 3, 4, 4))
        g = rand((3,), 0.5, 1.5)
        b = rand((3,))
        rm = rng.uniform(-0.5, 0.5, 3)
        rv = rng.uniform(0.5, 1.5, 3)
        return (lambda: T.mean_of_squares(
            T.batch_norm2d(x, g, b, rm, rv, training=False)), [x, g, b])

    add_check("batch_norm2d(eval)", bn_eval_case)

    def leaky_case():
        x = rand((4, 8))
        return lambda: T.mean_of_squares(T.leaky_relu(x, 0.25)), [x]

    add_check("leaky_relu", leaky_case)

    def leaky_offset_case():
        # Inputs bounded away from the kink, where the check is exact.
        vals = rng.uniform(0.5, 1.5, (4, 8)) * rng.choice([-1.0, 1.0], (4, 8))
        x = Tensor(vals, requires_grad=True, dtype=np.float64)
        return lambda: T.mean_of_squares(T.leaky_relu(x, 0.25)), [x]

    add_check("leaky_relu(offset)", leaky_offset_case, tol=1e-7)

    def dropout_case(mode):
        def build():
            x = rand((2, 3, 3, 3))
            fn = lambda: T.mean_of_squares(T.dropout(
                x, 0.3, mode, training=True, rng=np.random.default_rng(99)))
            return fn, [x]
        return build

    add_check("dropout(elementwise)", dropout_case("elementwise"))
    add_check("dropout(channelwise)", dropout_case("channelwise"))

    def concat_case():
        a, b, c = rand((1, 2, 3, 3)), rand((1, 1, 3, 3)), rand((1, 3, 3, 3))
        return (lambda: T.mean_of_squares(T.concat_channels([a, b, c])),
                [a, b, c])

    add_check("concat_channels", concat_case)

    def add_case():
        a, b = rand((3, 4)), rand((3, 4))
        return lambda: T.mean_of_squares(T.add(a, b)), [a, b]

    add_check("add", add_case)

    def sub_case():
        a, b = rand((3, 4)), rand((3, 4))
        return lambda: T.mean_of_squares(T.sub(a, b)), [a, b]

    add_check("sub", sub_case)

    def scale_case():
        a = rand((3, 4))
        return lambda: T.mean_of_squares(T.scale(a, 0.37)), [a]

    add_check("scale", scale_case)

    def mos_case():
        a = rand((6,))
        return lambda: T.mean_of_squares(a), [a]

    add_check("mean_of_squares", mos_case)

    def moa_case():
        vals = rng.uniform(0.2, 1.0, 6) * rng.choice([-1.0, 1.0], 6)
        a = Tensor(vals, requires_grad=True, dtype=np.float64)
        return lambda: T.mean_of_abs(a), [a]

    add_check("mean_of_abs", moa_case)

    return checks


def tiny_model_config(scale="tiny"):
    if scale == "tiny":
        return ModelConfig(stages=2, image_channels=1, branch_widths=(4, 4),
                           fusion_width=4, fusion_dropout_elem=0.0,
                           fusion_dropout_chan=0.0)
    if scale == "small":
        return ModelConfig(stages=2, image_channels=1, branch_widths=(8, 8, 8),
                           fusion_width=8, fusion_dropout_elem=0.0,
                           fusion_dropout_chan=0.0)
    raise ValueError(f"unknown scale {scale!r}")


def _model_check(rng, scale, patch=8, coords_per_tensor=3):
    config = tiny_model_config(scale)
    params = model_init(config, seed=int(rng.integers(1 << 31)),
                        dtype=np.float64)
    x = Tensor(rng.uniform(0.0, 1.0, (1, 1, patch, patch)),
               dtype=np.float64)
    clean = Tensor(rng.uniform(0.0, 1.0, x.shape), dtype=np.float64)
    noise = Tensor(x.data - clean.data, dtype=np.float64)

    def fn():
        outs, _ = model_forward(params, config, x, "train")
        return total_loss(outs, clean, noise, alpha=1.0, beta=0.01)

    leaves = [t for _, t in params.trainable()]
    return grad_check(fn, leaves, rng, coords_per_tensor=coords_per_tensor)


def run_grad_check_suite(scale="tiny", seed=0, include_model=True,
                         inject_broken_op=False):
    """Run finite-difference checks over every differentiable op and,
    optionally, a full two-stage model. Returns a GradCheckReport."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    start = time.perf_counter()
    for name, build, tol in _op_checks(rng):
        fn, leaves = build()
        err = grad_check(fn, leaves, rng)
        report.entries.append(GradCheckEntry(name, err, tol))
    if inject_broken_op:
        x = Tensor(rng.uniform(0.5, 1.5, (3, 3)), requires_grad=True,
                   dtype=np.float64)
        err = grad_check(lambda: _broken_scale(x), [x], rng)
        report.entries.append(GradCheckEntry("broken_scale(self-test)", err, 1e-5))
    if include_model:
        err = _model_check(rng, scale)
        report.entries.append(
            GradCheckEntry(f"model(T=2,{scale})", err, 1e-4))
    report.elapsed = time.perf_counter() - start
    return report


def _broken_scale(t):
    # Deliberately wrong backward (off by 10%): exercises the harness's
    # ability to flag a bad gradient.
    return T._node(np.asarray(np.mean(t.data * 2.0)), (t,),
                   lambda up: (np.full_like(t.data, 2.2 / t.size) * up,))
