"""The four scalar losses and their weighted composition.

Feature and style losses look at activations of a fixed loss network;
pixel and total-variation losses look at the image directly. All of them
return scalar autodiff tensors, so any of them can drive either network
training or direct image-space optimization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, matmul, transpose2d
from .networks import loss_net_features


@dataclass
class GramMatrix:
    """Normalized channel co-activation matrix of one feature map."""

    matrix: np.ndarray
    tap: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"Gram matrix must be square, got shape {self.matrix.shape}")


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if hasattr(x, "values"):  # ImagePlane
        return Tensor(x.values)
    return Tensor(np.asarray(x, dtype=np.float64))


def _batched(t):
    """View a CHW tensor as 1xCHW; NCHW passes through."""
    if t.data.ndim == 3:
        return t.reshape((1,) + t.data.shape)
    if t.data.ndim == 4:
        return t
    raise ValueError(f"expected CHW or NCHW, got shape {t.data.shape}")


def feature_loss(f_hat, f_target):
    """Mean squared difference of two feature maps: ||a - b||^2 / (C*H*W).

    Batched inputs average over the batch, matching the training
    expectation. Shapes must agree exactly.
    """
    f_hat = _as_tensor(f_hat)
    f_target = _as_tensor(f_target)
    if f_hat.data.shape != f_target.data.shape:
        raise ValueError(f"feature_loss shape mismatch: "
                         f"{f_hat.data.shape} vs {f_target.data.shape}")
    diff = f_hat - f_target
    return (diff * diff).mean()


def pixel_loss(y_hat, y):
    """Mean squared pixel difference: ||y_hat - y||^2 / (C*H*W)."""
    y_hat = _as_tensor(y_hat)
    y = _as_tensor(y)
    if y_hat.data.shape != y.data.shape:
        raise ValueError(f"pixel_loss shape mismatch: "
                         f"{y_hat.data.shape} vs {y.data.shape}")
    diff = y_hat - y
    return (diff * diff).mean()


def gram(features, tap=""):
    """Gram matrix of a CxHxW feature map: psi psi^T / (C*H*W) with psi = C x (H*W).

    Returns a differentiable CxC tensor; wrap in :class:`GramMatrix` via
    :func:`gram_target` when caching style targets.
    """
    features = _as_tensor(features)
    if features.data.ndim != 3:
        raise ValueError(f"gram expects a CxHxW feature map, got shape {features.data.shape}")
    c, h, w = features.data.shape
    psi = features.reshape((c, h * w))
    return matmul(psi, transpose2d(psi)) * (1.0 / (c * h * w))


def gram_target(features, tap=""):
    """Non-differentiable Gram matrix for caching style targets."""
    g = gram(_as_tensor(features).detach(), tap)
    return GramMatrix(g.data, tap)


def style_loss(taps_hat, target_grams):
    """Sum over layers of the squared Frobenius Gram-matrix distance.

    ``taps_hat`` maps tap names to generated feature maps (CHW or NCHW);
    ``target_grams`` maps the same names to GramMatrix targets. Spatial
    sizes of generated and target features may differ freely.
    """
    total = None
    for tap, target in target_grams.items():
        if tap not in taps_hat:
            raise KeyError(f"style_loss: tap {tap!r} missing from generated features; "
                           f"have {sorted(taps_hat)}")
        term = _style_term(taps_hat[tap], target)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("style_loss: no target layers given")
    return total


def _style_term(feat, target):
    tmat = target.matrix if isinstance(target, GramMatrix) else np.asarray(target)
    feat = _batched(_as_tensor(feat))
    n = feat.data.shape[0]
    term = None
    for i in range(n):
        g = gram(feat[i])
        diff = g - Tensor(tmat.astype(g.dtype, copy=False))
        d = (diff * diff).sum()
        term = d if term is None else term + d
    return term * (1.0 / n)


def tv_loss(y_hat):
    """Anisotropic squared total variation: sum of squared forward differences.

    Unnormalized per image; batched inputs average over the batch.
    """
    y = _as_tensor(y_hat)
    batched = y.data.ndim == 4
    y4 = _batched(y)
    if y4.data.shape[2] < 2 or y4.data.shape[3] < 2:
        raise ValueError(f"tv_loss needs spatial extent >= 2, got {y4.data.shape}")
    dh = y4[:, :, 1:, :] - y4[:, :, :-1, :]
    dw = y4[:, :, :, 1:] - y4[:, :, :, :-1]
    total = (dh * dh).sum() + (dw * dw).sum()
    if batched:
        total = total * (1.0 / y4.data.shape[0])
    return total


# ---------------------------------------------------------------------------
# weighted composition
# ---------------------------------------------------------------------------

@dataclass
class ObjectiveSpec:
    """Weights, layer choices and the loss network defining one objective."""

    lossnet: object  # Checkpoint
    lambda_c: float = 1.0
    lambda_s: float = 0.0
    lambda_tv: float = 0.0
    lambda_pixel: float = 0.0
    content_tap: str = ""
    style_taps: tuple = ()
    style_grams: dict | None = None

    def __post_init__(self):
        if max(self.lambda_c, self.lambda_s, self.lambda_tv, self.lambda_pixel) <= 0:
            raise ValueError("objective needs at least one positive weight")
        available = set(self.lossnet.spec.tap_names())
        if self.lambda_c > 0 and self.content_tap not in available:
            raise ValueError(f"content tap {self.content_tap!r} not in loss network; "
                             f"available: {sorted(available)}")
        if self.lambda_s > 0:
            missing = [t for t in self.style_taps if t not in available]
            if missing:
                raise ValueError(f"style taps {missing} not in loss network; "
                                 f"available: {sorted(available)}")
            if not self.style_taps:
                raise ValueError("lambda_s > 0 needs at least one style tap")

    def with_style_image(self, style_image):
        """Precompute and cache the style image's Gram targets."""
        feats = loss_net_features(self.lossnet, _as_tensor(style_image).detach(),
                                  self.style_taps)
        grams = {tap: gram_target(feats[tap], tap) for tap in self.style_taps}
        return replace(self, style_grams=grams)

    def digest(self):
        """Stable short hash of weights, taps and loss-network identity."""
        h = hashlib.sha256()
        h.update(json.dumps({
            "lambda_c": self.lambda_c, "lambda_s": self.lambda_s,
            "lambda_tv": self.lambda_tv, "lambda_pixel": self.lambda_pixel,
            "content_tap": self.content_tap, "style_taps": list(self.style_taps),
        }, sort_keys=True).encode())
        for name in sorted(self.lossnet.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.lossnet.tensors[name]).tobytes())
        if self.style_grams:
            for tap in sorted(self.style_grams):
                h.update(tap.encode())
                h.update(np.ascontiguousarray(self.style_grams[tap].matrix).tobytes())
        return h.hexdigest()[:16]


@dataclass
class LossBreakdown:
    """Weighted total plus the unweighted per-term values behind it."""

    total: float
    terms: dict = field(default_factory=dict)
    total_tensor: Tensor | None = None

    TERM_COLUMNS = ("feat", "style", "pixel", "tv")

    def column(self, name):
        return self.terms.get(name, 0.0)


def evaluate_objective(spec, y_hat, content_target=None, style_grams=None,
                       content_taps=None):
    """Weighted loss combination of Eq.-style terms on a generated image.

    ``y_hat`` may be CHW or NCHW (batch averaged). ``content_taps`` lets
    callers that evaluate many candidates against one fixed target pass the
    target's precomputed tap activations.
    """
    y_hat = _as_tensor(y_hat)
    terms = {}
    total = None

    def accumulate(weight, tensor_value):
        nonlocal total
        weighted = tensor_value * float(weight)
        total = weighted if total is None else total + weighted

    if spec.lambda_c > 0 or spec.lambda_s > 0:
        want = []
        if spec.lambda_c > 0:
            want.append(spec.content_tap)
        if spec.lambda_s > 0:
            want.extend(t for t in spec.style_taps if t not in want)
        taps_hat = loss_net_features(spec.lossnet, y_hat, tuple(want))
    else:
        taps_hat = {}

    if spec.lambda_c > 0:
        if content_taps is None:
            if content_target is None:
                raise ValueError("objective has lambda_c > 0 but no content target")
            target = _match_batch(_as_tensor(content_target).detach(), y_hat)
            content_taps = loss_net_features(spec.lossnet, target, (spec.content_tap,))
        feat = feature_loss(taps_hat[spec.content_tap], content_taps[spec.content_tap])
        terms["feat"] = float(feat.data)
        accumulate(spec.lambda_c, feat)

    if spec.lambda_s > 0:
        grams = style_grams or spec.style_grams
        if not grams:
            raise ValueError("objective has lambda_s > 0 but no style Gram targets")
        style_total = None
        for tap in spec.style_taps:
            term = _style_term(taps_hat[tap], grams[tap])
            terms[f"style:{tap}"] = float(term.data)
            style_total = term if style_total is None else style_total + term
        terms["style"] = float(style_total.data)
        accumulate(spec.lambda_s, style_total)

    if spec.lambda_pixel > 0:
        if content_target is None:
            raise ValueError("objective has lambda_pixel > 0 but no content target")
        target = _match_batch(_as_tensor(content_target).detach(), y_hat)
        pix = pixel_loss(y_hat, target)
        terms["pixel"] = float(pix.data)
        accumulate(spec.lambda_pixel, pix)

    if spec.lambda_tv > 0:
        tv = tv_loss(y_hat)
        terms["tv"] = float(tv.data)
        accumulate(spec.lambda_tv, tv)

    return LossBreakdown(total=float(total.data), terms=terms, total_tensor=total)


def _match_batch(target, like):
    """Broadcast a CHW target to the batch rank of the generated tensor."""
    if like.data.ndim == 4 and target.data.ndim == 3:
        reps = (like.data.shape[0], 1, 1, 1)
        return Tensor(np.broadcast_to(target.data[None], like.data.shape).copy())
    return target
