"""Feed-forward network training: data pipeline, Adam, logging, resume.

One style network is trained per style target (the content target is the
input image itself); super-resolution networks train on blur+downsample
degraded patches against either feature or pixel loss. Training runs in
float32 for speed; every random draw derives from (seed, iteration), so a
run can be checkpointed and resumed bit-exactly.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, backward
from .image import ImagePlane, gaussian_blur, load_image, resize_bicubic
from .losses import LossBreakdown, ObjectiveSpec, evaluate_objective
from .networks import (
    Checkpoint,
    build_sr_net,
    build_style_net,
    init_checkpoint,
    run_network,
    trainable_shapes,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# paper-scale presets keep the published training recipe; desk presets are
# what the test suite exercises end to end
PRESETS = {
    "style-paper": dict(image_size=256, batch_size=4, iterations=40000,
                        learning_rate=1e-3, widths=(32, 64, 128)),
    "style-desk": dict(image_size=64, batch_size=2, iterations=300,
                       learning_rate=1e-3, widths=(16, 32, 64)),
    "sr-paper": dict(patch_size=288, batch_size=4, iterations=200000,
                     learning_rate=1e-3, sr_width=64),
    "sr-desk": dict(patch_size=96, batch_size=4, iterations=500,
                    learning_rate=1e-3, sr_width=16),
}


@dataclass
class TrainConfig:
    """Everything one training run needs, bundled for reproducibility."""

    task: str                      # style | sr
    objective: ObjectiveSpec
    data_dir: str
    iterations: int = 300
    batch_size: int = 2
    learning_rate: float = 1e-3
    seed: int = 0
    image_size: int = 64           # style: square center-crop/resize size
    patch_size: int = 96           # sr: high-resolution crop size
    sr_factor: int = 4
    widths: tuple = (32, 64, 128)
    blocks: int = 5
    sr_width: int = 64
    sr_blocks: int = 4
    log_stride: int = 10
    deterministic: bool = False    # zeroes wall-clock in logs for byte-stable output

    def __post_init__(self):
        if self.task not in ("style", "sr"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.task == "sr":
            if self.sr_factor < 2 or self.sr_factor & (self.sr_factor - 1):
                raise ValueError(f"sr_factor must be a power of two, got {self.sr_factor}")
            if self.patch_size % self.sr_factor:
                raise ValueError(f"patch size {self.patch_size} not divisible by "
                                 f"factor {self.sr_factor}")
            if self.objective.lambda_s > 0:
                raise ValueError("super-resolution training never uses the style loss")


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def fresh(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update over a dict of parameter arrays.

    Updates params and state in place and returns them. Gradients must be
    finite; a bad one aborts with the parameter's name.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter is {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
    return params, state


@dataclass
class LogPoint:
    iteration: int
    breakdown: LossBreakdown
    seconds: float


@dataclass
class TrainLog:
    """Loss trajectory of a run; serializes to CSV."""

    points: list = field(default_factory=list)

    def add(self, iteration, breakdown, seconds):
        if self.points and iteration <= self.points[-1].iteration:
            raise ValueError("log iterations must strictly increase")
        self.points.append(LogPoint(iteration, breakdown, seconds))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "total", "feat", "style", "pixel", "tv", "seconds"])
            for p in self.points:
                writer.writerow([
                    p.iteration,
                    repr(p.breakdown.total),
                    repr(p.breakdown.column("feat")),
                    repr(p.breakdown.column("style")),
                    repr(p.breakdown.column("pixel")),
                    repr(p.breakdown.column("tv")),
                    repr(p.seconds),
                ])

    def totals(self):
        return [p.breakdown.total for p in self.points]


# ---------------------------------------------------------------------------
# data pipeline
# ---------------------------------------------------------------------------

IMAGE_EXTENSIONS = (".png", ".ppm", ".pgm")


def list_training_images(data_dir):
    names = sorted(n for n in os.listdir(data_dir)
                   if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS)
    if not names:
        raise FileNotFoundError(f"no training images (png/ppm/pgm) in {data_dir}")
    return [os.path.join(data_dir, n) for n in names]


def center_crop_square(image):
    c, h, w = image.values.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return ImagePlane(image.values[:, top:top + side, left:left + side], image.colorspace)


def make_sr_pair(hr_patch, factor):
    """Degrade one high-resolution patch: Gaussian blur (sigma 1.0), then
    bicubic downsampling by the factor. Returns (lr, hr)."""
    c, h, w = hr_patch.values.shape
    if h % factor or w % factor:
        raise ValueError(f"patch size {h}x{w} not divisible by factor {factor}")
    blurred = gaussian_blur(hr_patch, 1.0)
    lr = resize_bicubic(blurred, h // factor, w // factor)
    return lr, hr_patch


def _iteration_rng(seed, iteration):
    return np.random.default_rng((int(seed), int(iteration)))


# ---------------------------------------------------------------------------
# optimizer-state round trip (for exact resume)
# ---------------------------------------------------------------------------

def _attach_resume_state(ckpt, adam, iteration):
    for name, arr in adam.m.items():
        ckpt.tensors[f"opt.m.{name}"] = arr.astype(np.float32)
    for name, arr in adam.v.items():
        ckpt.tensors[f"opt.v.{name}"] = arr.astype(np.float32)
    ckpt.metadata["opt_step"] = int(adam.step)
    ckpt.metadata["train_iteration"] = int(iteration)


def _restore_adam(ckpt, params):
    m = {}
    v = {}
    for name in params:
        m[name] = np.array(ckpt.tensors[f"opt.m.{name}"], dtype=np.float32)
        v[name] = np.array(ckpt.tensors[f"opt.v.{name}"], dtype=np.float32)
    return AdamState(m=m, v=v, step=int(ckpt.metadata["opt_step"]))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def train_style(config, resume_from=None):
    """Train one style-transfer network; the content target is the input.

    Returns (checkpoint, log). The checkpoint carries the optimizer state,
    so training can resume from it with an identical trajectory.
    """
    if config.task != "style":
        raise ValueError("train_style needs a config with task='style'")
    if config.objective.lambda_s > 0 and not config.objective.style_grams:
        raise ValueError("style objective must have precomputed style Gram targets")

    paths = list_training_images(config.data_dir)
    if len(paths) < config.batch_size:
        raise ValueError(f"need at least {config.batch_size} images, found {len(paths)}")
    size = config.image_size
    stack = []
    for path in paths:
        img = center_crop_square(load_image(path))
        img = resize_bicubic(img, size, size)
        stack.append(img.values.astype(np.float32))
    images = np.stack(stack)

    spec = build_style_net(widths=config.widths, blocks=config.blocks)

    def make_batch(rng):
        idx = rng.integers(0, len(images), size=config.batch_size)
        batch = images[idx]
        return batch, batch  # x and its own content target

    return _train_loop(spec, make_batch, config, resume_from)


def train_sr(config, resume_from=None):
    """Train a super-resolution network on degraded random crops.

    The loss is feature reconstruction (lambda_c) or pixel loss
    (lambda_pixel) per the objective; style terms are rejected.
    """
    if config.task != "sr":
        raise ValueError("train_sr needs a config with task='sr'")
    paths = list_training_images(config.data_dir)
    hr_images = [load_image(p) for p in paths]
    patch = config.patch_size
    for img in hr_images:
        if img.height < patch or img.width < patch:
            raise ValueError(f"image {img.height}x{img.width} smaller than "
                             f"patch size {patch}")

    spec = build_sr_net(config.sr_factor, width=config.sr_width, blocks=config.sr_blocks)

    def make_batch(rng):
        lrs = []
        hrs = []
        for _ in range(config.batch_size):
            img = hr_images[int(rng.integers(0, len(hr_images)))]
            top = int(rng.integers(0, img.height - patch + 1))
            left = int(rng.integers(0, img.width - patch + 1))
            hr = ImagePlane(img.values[:, top:top + patch, left:left + patch],
                            img.colorspace)
            lr, hr = make_sr_pair(hr, config.sr_factor)
            lrs.append(lr.values.astype(np.float32))
            hrs.append(hr.values.astype(np.float32))
        return np.stack(lrs), np.stack(hrs)

    return _train_loop(spec, make_batch, config, resume_from)


def _train_loop(spec, make_batch, config, resume_from):
    if resume_from is not None:
        if resume_from.spec.to_json() != spec.to_json():
            raise ValueError("resume checkpoint was trained with a different architecture")
        params = {name: np.array(resume_from.tensors[name], dtype=np.float32)
                  for name in trainable_shapes(spec)}
        states = resume_from.bn_states()
        adam = _restore_adam(resume_from, params)
        start = int(resume_from.metadata["train_iteration"])
    else:
        ckpt0 = init_checkpoint(spec, seed=config.seed)
        params = {name: ckpt0.tensors[name] for name in trainable_shapes(spec)}
        states = ckpt0.bn_states()
        adam = AdamState.fresh(params)
        start = 0

    log = TrainLog()
    wall_start = time.perf_counter()
    for it in range(start, config.iterations):
        rng = _iteration_rng(config.seed, it)
        x, target = make_batch(rng)
        nodes = {name: Parameter(arr, name) for name, arr in params.items()}
        out, _ = run_network(spec, nodes, states, _input_tensor(x),
                             mode="train", want_taps=())
        breakdown = evaluate_objective(config.objective, out, content_target=target)
        if not np.isfinite(breakdown.total):
            raise FloatingPointError(
                f"objective became non-finite at iteration {it}: {breakdown.total}")
        backward(breakdown.total_tensor)
        grads = {name: (node.grad if node.grad is not None
                        else np.zeros_like(params[name]))
                 for name, node in nodes.items()}
        adam_step(params, grads, adam, config.learning_rate)
        if it % config.log_stride == 0 or it == config.iterations - 1:
            seconds = 0.0 if config.deterministic else time.perf_counter() - wall_start
            log.add(it, breakdown, seconds)

    ckpt = init_checkpoint(spec, seed=config.seed)
    for name, arr in params.items():
        ckpt.tensors[name] = arr.astype(np.float32)
    ckpt.store_bn_states(states)
    _attach_resume_state(ckpt, adam, config.iterations)
    ckpt.metadata.update({
        "task": config.task,
        "iterations": int(config.iterations),
        "seed": int(config.seed),
        "objective_digest": config.objective.digest(),
    })
    return ckpt, log


def _input_tensor(x):
    return Tensor(np.ascontiguousarray(x))
