"""Metrics, objective-comparison harness, architecture analysis, benchmarks.

PSNR/SSIM follow the usual super-resolution conventions (Y channel of
YCbCr, 8-bit quantization by default, both recorded in the report).
Architecture analysis validates the multiply-add cost rule and the
receptive-field growth rules on the builder networks, with an empirical
gradient-support cross-check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .autodiff import Tensor, backward
from .image import ImagePlane, y_channel
from .losses import evaluate_objective
from .networks import forward, infer_shapes, run_network, trainable_shapes
from .optimize import OptimizeConfig, optimize_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _metric_planes(ref, test, mode, quantize):
    if ref.values.shape != test.values.shape:
        raise ValueError(f"metric size mismatch: {ref.values.shape} vs {test.values.shape}")
    if mode == "y":
        ref = y_channel(ref)
        test = y_channel(test)
    elif mode != "rgb":
        raise ValueError(f"unknown channel mode {mode!r} (use 'y' or 'rgb')")
    a = ref.quantized() if quantize else ref.values
    b = test.quantized() if quantize else test.values
    return a, b


def psnr(ref, test, mode="y", quantize=True):
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    a, b = _metric_planes(ref, test, mode, quantize)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    xs = np.arange(size) - half
    g = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(ref, test, quantize=True):
    """Mean local SSIM on the Y channel (11x11 Gaussian window, sigma 1.5)."""
    a, b = _metric_planes(ref, test, "y", quantize)
    a = a[0]
    b = b[0]
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}px per side, "
                         f"got {a.shape}")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(x):
        view = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
        return np.tensordot(view, win, axes=([2, 3], [0, 1]))

    mu1 = filt(a)
    mu2 = filt(b)
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu12 = mu1 * mu2
    sigma1_sq = filt(a * a) - mu1_sq
    sigma2_sq = filt(b * b) - mu2_sq
    sigma12 = filt(a * b) - mu12
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    ssim_map = ((2 * mu12 + c1) * (2 * sigma12 + c2)) / \
               ((mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2))
    return float(ssim_map.mean())


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM plus the exact metric configuration used."""

    rows: list = field(default_factory=list)  # dicts: name, psnr, ssim
    channel_mode: str = "y"
    quantized: bool = True
    ssim_window: int = SSIM_WINDOW
    ssim_sigma: float = SSIM_SIGMA

    def add(self, name, psnr_value, ssim_value):
        self.rows.append({"name": name, "psnr": psnr_value, "ssim": ssim_value})

    @property
    def psnr_mean(self):
        return float(np.mean([r["psnr"] for r in self.rows])) if self.rows else float("nan")

    @property
    def ssim_mean(self):
        return float(np.mean([r["ssim"] for r in self.rows])) if self.rows else float("nan")

    def to_dict(self):
        return {
            "channel_mode": self.channel_mode,
            "quantized": self.quantized,
            "ssim_window": self.ssim_window,
            "ssim_sigma": self.ssim_sigma,
            "rows": self.rows,
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
        }


def metric_report(pairs, mode="y", quantize=True):
    """PSNR/SSIM over (name, reference, test) triples."""
    report = MetricReport(channel_mode=mode, quantized=quantize)
    for name, ref, test in pairs:
        report.add(name, psnr(ref, test, mode=mode, quantize=quantize),
                   ssim(ref, test, quantize=quantize))
    return report


# ---------------------------------------------------------------------------
# objective comparison (feed-forward vs content image vs baseline)
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    """Objective values of content images, network outputs and baselines."""

    rows: list = field(default_factory=list)

    def add(self, name, content_objective, feedforward_objective, baseline_trace=None):
        self.rows.append({
            "name": name,
            "content_objective": content_objective,
            "feedforward_objective": feedforward_objective,
            "baseline_trace": baseline_trace,
        })

    @property
    def fraction_below_content(self):
        wins = sum(1 for r in self.rows
                   if r["feedforward_objective"] < r["content_objective"])
        return wins / len(self.rows) if self.rows else float("nan")

    def to_dict(self):
        rows = []
        for r in self.rows:
            row = {k: r[k] for k in ("name", "content_objective", "feedforward_objective")}
            if r["baseline_trace"] is not None:
                row["baseline_totals"] = r["baseline_trace"].totals()
            rows.append(row)
        return {"rows": rows, "fraction_below_content": self.fraction_below_content}


def stylize(checkpoint, image):
    """One eval-mode pass of a transformation network over an image."""
    x = Tensor(image.values[None].astype(np.float64))
    out, _ = forward(checkpoint, x)
    vals = np.clip(out.data[0], 0.0, 255.0)
    return ImagePlane(vals, "RGB" if vals.shape[0] == 3 else "Y")


def compare_objectives(images, objective, checkpoint, baseline_iters=0,
                       baseline_seed=0):
    """How well the network minimizes the objective, per content image.

    Records the objective at y = content image and at y = network output;
    when ``baseline_iters`` > 0 also runs the image-space optimizer and
    attaches its trace. All values share one objective spec, so they are
    directly comparable.
    """
    report = ComparisonReport()
    for i, image in enumerate(images):
        content_bd = evaluate_objective(objective, Tensor(image.values),
                                        content_target=image)
        out = stylize(checkpoint, image)
        ff_bd = evaluate_objective(objective, Tensor(out.values), content_target=image)
        trace = None
        if baseline_iters > 0:
            cfg = OptimizeConfig(max_iters=baseline_iters, seed=baseline_seed + i)
            _, trace = optimize_image(objective, cfg, content=image)
        report.add(f"image{i}", content_bd.total, ff_bd.total, trace)
    return report


# ---------------------------------------------------------------------------
# architecture analysis
# ---------------------------------------------------------------------------

def count_multiply_adds(spec, input_shape):
    """Exact multiply-add count of all conv layers on one input.

    Uses the K^2 * H_out * W_out * C_in * C_out rule per convolution; the
    fractionally strided layers count at their upsampled output size.
    """
    c, h, w = input_shape
    total = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            h = (h - 1) // layer.stride + 1
            w = (w - 1) // layer.stride + 1
            total += layer.kernel ** 2 * h * w * layer.in_ch * layer.out_ch
            c = layer.out_ch
        elif layer.kind == "conv_transpose":
            h, w = 2 * h, 2 * w
            total += layer.kernel ** 2 * h * w * layer.in_ch * layer.out_ch
            c = layer.out_ch
        elif layer.kind == "residual_block":
            total += 2 * 9 * h * w * layer.channels ** 2
        elif layer.kind == "max_pool":
            h, w = h // 2, w // 2
    return int(total)


def receptive_field(spec):
    """Analytic receptive-field size via the standard recurrence.

    r grows by (k - 1) * jump per conv; the jump multiplies by the stride
    and halves across each 2x upsampling. Returns an int when the result
    is integral, otherwise a float.
    """
    r = Fraction(1)
    jump = Fraction(1)
    for layer in spec.layers:
        if layer.kind == "conv":
            r += (layer.kernel - 1) * jump
            jump *= layer.stride
        elif layer.kind == "conv_transpose":
            jump /= 2
            r += (layer.kernel - 1) * jump
        elif layer.kind == "max_pool":
            r += jump
            jump *= 2
        elif layer.kind == "residual_block":
            r += 4 * jump  # two 3x3 convs
    return int(r) if r.denominator == 1 else float(r)


def _interval_back(layers, lo, hi):
    """Input-index interval one output pixel depends on (per axis)."""
    for layer in reversed(layers):
        if layer.kind == "conv":
            pad = layer.kernel // 2
            lo = lo * layer.stride - pad
            hi = hi * layer.stride - pad + layer.kernel - 1
        elif layer.kind == "conv_transpose":
            pad = layer.kernel // 2
            lo, hi = lo - pad, hi + pad
            lo = -((-lo) // 2)  # ceil(lo / 2)
            hi = hi // 2
        elif layer.kind == "max_pool":
            lo, hi = 2 * lo, 2 * hi + 1
        elif layer.kind == "residual_block":
            lo, hi = lo - 2, hi + 2
    return lo, hi


def receptive_field_box(spec, input_hw, out_pos=None):
    """Exact input support box of one output pixel, clipped to the image."""
    _, (c, ho, wo) = infer_shapes(spec, input_hw)
    if out_pos is None:
        out_pos = (ho // 2, wo // 2)
    h_lo, h_hi = _interval_back(spec.layers, out_pos[0], out_pos[0])
    w_lo, w_hi = _interval_back(spec.layers, out_pos[1], out_pos[1])
    h_lo, h_hi = max(h_lo, 0), min(h_hi, input_hw[0] - 1)
    w_lo, w_hi = max(w_lo, 0), min(w_hi, input_hw[1] - 1)
    return (h_lo, h_hi), (w_lo, w_hi)


def empirical_receptive_field(checkpoint, input_hw, out_pos=None):
    """Gradient-support receptive field measured on a linearized probe.

    Activations and normalization are replaced by identity, biases are
    dropped and every weight is set to one, so the gradient's support
    equals the layer connectivity with no chance of cancellation.
    """
    spec = checkpoint.spec
    probe = {name: Tensor(np.ones(shape))
             for name, shape in trainable_shapes(spec).items()
             if name.endswith(".weight")}
    x = Tensor(np.zeros((1, spec.in_channels) + tuple(input_hw)), requires_grad=True)
    out, _ = run_network(spec, probe, {}, x, mode="eval", linearize=True)
    ho, wo = out.data.shape[2], out.data.shape[3]
    if out_pos is None:
        out_pos = (ho // 2, wo // 2)
    pixel = out[:, :, out_pos[0]:out_pos[0] + 1, out_pos[1]:out_pos[1] + 1]
    backward(pixel.sum())
    support = np.abs(x.grad[0]).sum(axis=0) > 0
    rows = np.where(support.any(axis=1))[0]
    cols = np.where(support.any(axis=0))[0]
    if rows.size == 0:
        raise RuntimeError("probe produced an empty gradient support")
    return (int(rows[0]), int(rows[-1])), (int(cols[0]), int(cols[-1]))


# ---------------------------------------------------------------------------
# speed benchmark
# ---------------------------------------------------------------------------

# published reference timings (GPU, full-scale networks); printed for
# context next to measured numbers, never asserted against
REFERENCE_SPEED_ROWS = [
    {"size": 256, "ours_seconds": 0.015,
     "baseline_seconds": {100: 3.17, 300: 9.52, 500: 15.86},
     "speedup": {100: 212, 300: 636, 500: 1060}},
    {"size": 512, "ours_seconds": 0.05,
     "baseline_seconds": {100: 10.97, 300: 32.91, 500: 54.85},
     "speedup": {100: 205, 300: 615, 500: 1026}},
    {"size": 1024, "ours_seconds": 0.21,
     "baseline_seconds": {100: 42.89, 300: 128.66, 500: 214.44},
     "speedup": {100: 208, 300: 625, 500: 1042}},
]


@dataclass
class BenchmarkReport:
    rows: list = field(default_factory=list)
    reference_rows: list = field(default_factory=lambda: REFERENCE_SPEED_ROWS)

    def to_dict(self):
        return {"rows": self.rows, "reference_rows": self.reference_rows}


def benchmark(checkpoint, objective, sizes, baseline_iters=100, repeats=5, seed=0):
    """Feed-forward wall time (median of repeats) vs one baseline run per size.

    Only the speedup ratio is meaningful across machines; absolute numbers
    depend on hardware and are reported for context.
    """
    report = BenchmarkReport()
    rng = np.random.default_rng(seed)
    for size in sizes:
        image = ImagePlane(rng.uniform(0, 255, size=(3, size, size)))
        stylize(checkpoint, image)  # warm caches before timing
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            stylize(checkpoint, image)
            times.append(time.perf_counter() - t0)
        ff_seconds = float(np.median(times))
        cfg = OptimizeConfig(max_iters=baseline_iters, seed=seed)
        t0 = time.perf_counter()
        optimize_image(objective, cfg, content=image)
        baseline_seconds = time.perf_counter() - t0
        report.rows.append({
            "size": size,
            "forward_seconds": ff_seconds,
            "baseline_iters": baseline_iters,
            "baseline_seconds": baseline_seconds,
            "speedup": baseline_seconds / ff_seconds if ff_seconds > 0 else float("inf"),
        })
    return report
