"""Image-space optimization of perceptual objectives.

Implements the slow baseline the feed-forward networks approximate:
synthesize an image by minimizing a weighted perceptual objective with
projected L-BFGS (iterates clipped to [0, 255]), plus feature inversion
and style reconstruction as thin wrappers. An Adam mode is available as a
fallback optimizer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward
from .image import ImagePlane
from .losses import ObjectiveSpec, evaluate_objective
from .networks import loss_net_features


@dataclass
class OptimizeConfig:
    """Knobs for one image-space optimization run."""

    method: str = "lbfgs"          # lbfgs | adam
    max_iters: int = 500
    seed: int = 0
    init: str = "white_noise"      # white_noise | image
    init_image: object = None      # ImagePlane or array when init == "image"
    clip: tuple = (0.0, 255.0)
    history: int = 10              # L-BFGS memory
    learning_rate: float = 2.0     # Adam on raw pixels
    trace_stride: int = 1
    grad_tol: float = 1e-10
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 20

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.method not in ("lbfgs", "adam"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.init not in ("white_noise", "image"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "image" and self.init_image is None:
            raise ValueError("init == 'image' needs init_image")


@dataclass
class TracePoint:
    iteration: int
    breakdown: object
    seconds: float


@dataclass
class IterTrace:
    """Objective values along the accepted iterates of one run."""

    points: list = field(default_factory=list)

    def add(self, iteration, breakdown, seconds):
        if self.points and iteration <= self.points[-1].iteration:
            raise ValueError("trace iterations must strictly increase")
        self.points.append(TracePoint(iteration, breakdown, seconds))

    def totals(self):
        return [p.breakdown.total for p in self.points]

    def __len__(self):
        return len(self.points)


def _image_values(obj):
    if isinstance(obj, ImagePlane):
        return obj.values
    return np.asarray(obj, dtype=np.float64)


def optimize_image(objective, config, content=None, shape=None):
    """Minimize the objective over pixels; returns (best image, trace).

    The content image provides the feature-reconstruction target (its tap
    activations are computed once). Every evaluated iterate is clipped to
    the configured range; the best-objective iterate is returned.
    """
    lo, hi = config.clip
    if content is not None:
        content_arr = _image_values(content)
        if shape is None:
            shape = content_arr.shape
    elif shape is None and config.init == "image":
        shape = _image_values(config.init_image).shape
    if shape is None:
        raise ValueError("optimize_image needs a content image, an init image, or a shape")

    content_taps = None
    if objective.lambda_c > 0:
        if content is None:
            raise ValueError("objective has lambda_c > 0 but no content image was given")
        content_taps = loss_net_features(objective.lossnet, Tensor(content_arr),
                                         (objective.content_tap,))

    if config.init == "image":
        x0 = np.clip(_image_values(config.init_image), lo, hi)
        if x0.shape != tuple(shape):
            raise ValueError(f"init image shape {x0.shape} does not match target {tuple(shape)}")
    else:
        rng = np.random.default_rng(config.seed)
        x0 = rng.uniform(lo, hi, size=shape)

    def value(x):
        bd = evaluate_objective(objective, Tensor(x),
                                content_target=content if content is not None else None,
                                content_taps=content_taps)
        return bd

    def value_grad(x):
        xt = Tensor(x, requires_grad=True)
        bd = evaluate_objective(objective, xt,
                                content_target=content if content is not None else None,
                                content_taps=content_taps)
        backward(bd.total_tensor)
        return bd, xt.grad

    bd0, g0 = value_grad(x0)
    if not np.isfinite(bd0.total):
        raise ValueError(f"objective is non-finite at the initial point: {bd0.total}")

    if config.method == "adam":
        best_x, trace = _adam_images(x0, bd0, g0, value_grad, config)
    else:
        best_x, trace = _lbfgs_images(x0, bd0, g0, value, value_grad, config)

    colorspace = "RGB" if best_x.shape[0] == 3 else "Y"
    return ImagePlane(best_x, colorspace), trace


def _lbfgs_images(x0, bd0, g0, value, value_grad, config):
    """Projected L-BFGS with backtracking line search.

    Steps are accepted only when they do not increase the objective
    (Armijo-decrease preferred); the box projection is applied to every
    trial point, and curvature pairs whose secant product the projection
    ruined are discarded.
    """
    lo, hi = config.clip
    x, bd, g = x0, bd0, g0.ravel().copy()
    shape = x0.shape
    history = []  # (s, y, rho), newest last
    trace = IterTrace()
    start = time.perf_counter()
    trace.add(0, bd, 0.0)
    best_f, best_x = bd.total, x.copy()

    if np.linalg.norm(g) < config.grad_tol:
        return best_x, trace

    for it in range(1, config.max_iters + 1):
        d = -_two_loop(g, history)
        gd = float(g @ d)
        if gd >= 0:
            # not a descent direction; drop memory and fall back to steepest
            history.clear()
            d = -g
            gd = float(g @ d)
            if gd >= 0:
                break
        t = 1.0
        accepted = None
        fallback = None  # best non-increasing trial
        for _ in range(config.max_backtracks):
            x_try = np.clip(x + t * d.reshape(shape), lo, hi)
            bd_try = value(x_try)
            if bd_try.total <= bd.total + config.armijo * t * gd:
                accepted = (x_try, bd_try)
                break
            if bd_try.total <= bd.total and (fallback is None or bd_try.total < fallback[1].total):
                fallback = (x_try, bd_try)
            t *= config.backtrack
        if accepted is None:
            accepted = fallback
        if accepted is None:
            if history:
                history.clear()
                continue
            break  # no non-increasing step exists along steepest descent
        x_new, bd_new = accepted
        if np.array_equal(x_new, x):
            break  # projection pinned every coordinate; stalled
        bd_new, g_new = value_grad(x_new)

        s = (x_new - x).ravel()
        y = g_new.ravel() - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            history.append((s, y, 1.0 / sy))
            if len(history) > config.history:
                history.pop(0)
        x, bd, g = x_new, bd_new, g_new.ravel()

        if bd.total < best_f:
            best_f, best_x = bd.total, x.copy()
        if it % config.trace_stride == 0 or it == config.max_iters:
            trace.add(it, bd, time.perf_counter() - start)
        if np.linalg.norm(g) < config.grad_tol:
            break
    return best_x, trace


def _two_loop(g, history):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if history:
        s, y, _ = history[-1]
        q *= (s @ y) / (y @ y)  # standard initial Hessian scaling
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _adam_images(x0, bd0, g0, value_grad, config):
    lo, hi = config.clip
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trace = IterTrace()
    start = time.perf_counter()
    trace.add(0, bd0, 0.0)
    best_f, best_x = bd0.total, x.copy()
    g = g0
    for it in range(1, config.max_iters + 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** it)
        vhat = v / (1 - beta2 ** it)
        x = np.clip(x - config.learning_rate * mhat / (np.sqrt(vhat) + eps), lo, hi)
        bd, g = value_grad(x)
        if bd.total < best_f:
            best_f, best_x = bd.total, x.copy()
        if it % config.trace_stride == 0 or it == config.max_iters:
            trace.add(it, bd, time.perf_counter() - start)
    return best_x, trace


def invert_features(lossnet, tap, target, config, lambda_tv=1e-6):
    """Reconstruct an image from one tap's activations of the target."""
    objective = ObjectiveSpec(lossnet=lossnet, lambda_c=1.0, lambda_s=0.0,
                              lambda_tv=lambda_tv, content_tap=tap)
    img, _ = optimize_image(objective, config, content=target)
    return img


def invert_style(lossnet, taps, style_image, config, shape, lambda_tv=1e-6):
    """Synthesize an image matching the style image's Gram statistics.

    The output shape is free: Gram matrices agree across spatial sizes.
    """
    objective = ObjectiveSpec(lossnet=lossnet, lambda_c=0.0, lambda_s=1.0,
                              lambda_tv=lambda_tv, style_taps=tuple(taps))
    objective = objective.with_style_image(_image_values(style_image))
    img, _ = optimize_image(objective, config, shape=shape)
    return img
