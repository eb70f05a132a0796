"""Network specifications, builders, forward execution and checkpoint files.

Two trainable families are provided: a downsample/residual/upsample net for
style transfer and an upsampling-only net for super-resolution. Loss
networks (feature extractors with named taps) use the same layer vocabulary;
a small seeded one ships built in so nothing external is required.

Checkpoint files carry magic "PFNW", version 1, a JSON header (layer list,
preprocessing, parameter manifest) and a float32 little-endian payload.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    batch_norm,
    conv2d,
    conv2d_transpose,
    max_pool2d,
    relu,
    scaled_tanh,
)

CHECKPOINT_MAGIC = b"PFNW"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class NotACheckpointError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before its declared contents."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor disagrees with its declared shape."""


class MissingParameterError(CheckpointError):
    """The file lacks a tensor the network spec requires."""


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

_LAYER_KINDS = ("input", "conv", "conv_transpose", "batch_norm", "relu",
                "scaled_tanh", "residual_block", "max_pool", "output")


@dataclass
class LayerSpec:
    """One layer of a sequential network."""

    kind: str
    name: str = ""
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    pad_mode: str = "zero"
    channels: int = 0       # residual_block / batch_norm width
    tap: str | None = None  # export this layer's activations under this name

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_json(self):
        out = {"kind": self.kind}
        for key in ("name", "in_ch", "out_ch", "kernel", "stride", "pad_mode",
                    "channels", "tap"):
            val = getattr(self, key)
            if val not in ("", 0, None) or (key == "stride" and val != 1):
                out[key] = val
        if self.kind in ("conv", "conv_transpose"):
            out["stride"] = self.stride
            out["pad_mode"] = self.pad_mode
        return out

    @classmethod
    def from_json(cls, data):
        return cls(**data)


@dataclass
class NetworkSpec:
    """Ordered layer list plus the input contract and preprocessing record."""

    layers: list
    in_channels: int = 3
    preprocess_mean: tuple = ()
    preprocess_std: tuple = ()

    def __post_init__(self):
        taps = self.tap_names()
        if len(taps) != len(set(taps)):
            raise ValueError(f"duplicate tap names in spec: {taps}")
        if self.preprocess_mean and len(self.preprocess_mean) != self.in_channels:
            raise ValueError("preprocessing mean length must match input channels")

    def tap_names(self):
        return [layer.tap for layer in self.layers if layer.tap]

    def to_json(self):
        return {
            "in_channels": self.in_channels,
            "preprocess_mean": list(self.preprocess_mean),
            "preprocess_std": list(self.preprocess_std),
            "layers": [layer.to_json() for layer in self.layers],
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            layers=[LayerSpec.from_json(ld) for ld in data["layers"]],
            in_channels=data["in_channels"],
            preprocess_mean=tuple(data["preprocess_mean"]),
            preprocess_std=tuple(data["preprocess_std"]),
        )


def trainable_shapes(spec):
    """Names and shapes of learnable tensors, in declaration order."""
    shapes = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            shapes[f"{layer.name}.weight"] = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
            shapes[f"{layer.name}.bias"] = (layer.out_ch,)
        elif layer.kind == "conv_transpose":
            shapes[f"{layer.name}.weight"] = (layer.in_ch, layer.out_ch, layer.kernel, layer.kernel)
            shapes[f"{layer.name}.bias"] = (layer.out_ch,)
        elif layer.kind == "batch_norm":
            shapes[f"{layer.name}.gamma"] = (layer.channels,)
            shapes[f"{layer.name}.beta"] = (layer.channels,)
        elif layer.kind == "residual_block":
            c = layer.channels
            for half in ("a", "b"):
                shapes[f"{layer.name}.conv_{half}.weight"] = (c, c, 3, 3)
                shapes[f"{layer.name}.conv_{half}.bias"] = (c,)
                shapes[f"{layer.name}.bn_{half}.gamma"] = (c,)
                shapes[f"{layer.name}.bn_{half}.beta"] = (c,)
    return shapes


def bn_names(spec):
    """Names of batch-norm sites (owning running statistics)."""
    names = []
    for layer in spec.layers:
        if layer.kind == "batch_norm":
            names.append(layer.name)
        elif layer.kind == "residual_block":
            names.extend([f"{layer.name}.bn_a", f"{layer.name}.bn_b"])
    return names


def state_shapes(spec):
    shapes = {}
    for layer in spec.layers:
        if layer.kind == "batch_norm":
            c = layer.channels
            shapes[f"{layer.name}.running_mean"] = (c,)
            shapes[f"{layer.name}.running_var"] = (c,)
        elif layer.kind == "residual_block":
            c = layer.channels
            for half in ("a", "b"):
                shapes[f"{layer.name}.bn_{half}.running_mean"] = (c,)
                shapes[f"{layer.name}.bn_{half}.running_var"] = (c,)
    return shapes


def parameter_shapes(spec):
    """All tensors a checkpoint of this spec must carry."""
    shapes = trainable_shapes(spec)
    shapes.update(state_shapes(spec))
    return shapes


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """A network spec with its tensors and training metadata."""

    spec: NetworkSpec
    tensors: dict
    metadata: dict = field(default_factory=dict)

    def bn_states(self):
        flags = self.metadata.get("bn_initialized", {})
        states = {}
        for name in bn_names(self.spec):
            states[name] = BatchNormState(
                mean=self.tensors[f"{name}.running_mean"].copy(),
                var=self.tensors[f"{name}.running_var"].copy(),
                initialized=bool(flags.get(name, False)),
            )
        return states

    def store_bn_states(self, states):
        flags = {}
        for name, state in states.items():
            self.tensors[f"{name}.running_mean"] = state.mean.astype(np.float32)
            self.tensors[f"{name}.running_var"] = state.var.astype(np.float32)
            flags[name] = bool(state.initialized)
        self.metadata["bn_initialized"] = flags


def init_checkpoint(spec, seed=0):
    """Seeded initialization: Glorot-uniform conv weights, zero bias,
    unit gamma, zero beta, fresh running statistics."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in trainable_shapes(spec).items():
        if name.endswith(".weight"):
            if len(shape) != 4:
                raise AssertionError(f"unexpected weight shape {shape}")
            k = shape[2]
            fan_in = shape[1] * k * k
            fan_out = shape[0] * k * k
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif name.endswith(".gamma"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:  # bias / beta
            tensors[name] = np.zeros(shape, dtype=np.float32)
    for name, shape in state_shapes(spec).items():
        if name.endswith("mean"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = np.ones(shape, dtype=np.float32)
    metadata = {"seed": int(seed), "bn_initialized": {n: False for n in bn_names(spec)}}
    return Checkpoint(spec=spec, tensors=tensors, metadata=metadata)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_style_net(widths=(32, 64, 128), blocks=5):
    """Downsample twice, run residual blocks, upsample back; 9x9 ends.

    Reflection padding keeps every layer size-preserving up to its stride,
    so any input with H, W divisible by 4 maps to an output of the same
    size. Batch norm + relu follow every non-residual conv except the
    output layer, which feeds a scaled tanh instead.
    """
    w0, w1, w2 = widths
    layers = [LayerSpec("input")]
    layers += _conv_bn_relu("conv1", "bn1", 3, w0, kernel=9, stride=1)
    layers += _conv_bn_relu("conv2", "bn2", w0, w1, kernel=3, stride=2)
    layers += _conv_bn_relu("conv3", "bn3", w1, w2, kernel=3, stride=2)
    for i in range(blocks):
        layers.append(LayerSpec("residual_block", name=f"res{i + 1}", channels=w2))
    layers += _upconv_bn_relu("up1", "bn_up1", w2, w1)
    layers += _upconv_bn_relu("up2", "bn_up2", w1, w0)
    layers.append(LayerSpec("conv", name="conv_out", in_ch=w0, out_ch=3,
                            kernel=9, stride=1, pad_mode="reflect"))
    layers.append(LayerSpec("scaled_tanh"))
    layers.append(LayerSpec("output"))
    return NetworkSpec(layers=layers)


def build_sr_net(factor, width=64, blocks=4):
    """Residual body at low resolution, then log2(factor) learned 2x upsamplings."""
    if factor < 2 or factor & (factor - 1):
        raise ValueError(f"super-resolution factor must be a power of two >= 2, got {factor}")
    ups = factor.bit_length() - 1
    layers = [LayerSpec("input")]
    layers += _conv_bn_relu("conv1", "bn1", 3, width, kernel=9, stride=1)
    for i in range(blocks):
        layers.append(LayerSpec("residual_block", name=f"res{i + 1}", channels=width))
    for i in range(ups):
        layers += _upconv_bn_relu(f"up{i + 1}", f"bn_up{i + 1}", width, width)
    layers.append(LayerSpec("conv", name="conv_out", in_ch=width, out_ch=3,
                            kernel=9, stride=1, pad_mode="reflect"))
    layers.append(LayerSpec("scaled_tanh"))
    layers.append(LayerSpec("output"))
    return NetworkSpec(layers=layers)


def _conv_bn_relu(conv_name, bn_name, in_ch, out_ch, kernel, stride):
    return [
        LayerSpec("conv", name=conv_name, in_ch=in_ch, out_ch=out_ch,
                  kernel=kernel, stride=stride, pad_mode="reflect"),
        LayerSpec("batch_norm", name=bn_name, channels=out_ch),
        LayerSpec("relu"),
    ]


def _upconv_bn_relu(conv_name, bn_name, in_ch, out_ch):
    return [
        LayerSpec("conv_transpose", name=conv_name, in_ch=in_ch, out_ch=out_ch, kernel=3),
        LayerSpec("batch_norm", name=bn_name, channels=out_ch),
        LayerSpec("relu"),
    ]


MINI_LOSSNET_SEED = 20160325
MINI_LOSSNET_TAPS = ("relu1_2", "relu2_2", "relu3_2", "relu4_2")


def build_mini_lossnet(widths=(8, 16, 32, 64), seed=MINI_LOSSNET_SEED):
    """The built-in seeded feature extractor used for tests and desk runs.

    Four stages of [conv3x3+relu, conv3x3+relu(tap), pool] with zero padding,
    tapping the second relu of each stage. Returns an initialized Checkpoint.
    """
    layers = [LayerSpec("input")]
    prev = 3
    for stage, width in enumerate(widths, start=1):
        layers.append(LayerSpec("conv", name=f"conv{stage}_1", in_ch=prev, out_ch=width,
                                kernel=3, stride=1, pad_mode="zero"))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("conv", name=f"conv{stage}_2", in_ch=width, out_ch=width,
                                kernel=3, stride=1, pad_mode="zero"))
        layers.append(LayerSpec("relu", tap=f"relu{stage}_2"))
        layers.append(LayerSpec("max_pool"))
        prev = width
    layers.append(LayerSpec("output"))
    spec = NetworkSpec(layers=layers, preprocess_mean=(127.5, 127.5, 127.5))
    ckpt = init_checkpoint(spec, seed=seed)
    ckpt.metadata["kind"] = "mini-lossnet"
    return ckpt


def build_identity_lossnet():
    """A loss network whose single tap is the raw input."""
    spec = NetworkSpec(layers=[LayerSpec("input", tap="input"), LayerSpec("output")])
    return Checkpoint(spec=spec, tensors={}, metadata={"kind": "identity-lossnet"})


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def infer_shapes(spec, input_hw):
    """Static per-tap and output shapes for a given input height/width."""
    c = spec.in_channels
    h, w = input_hw
    taps = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            if layer.in_ch != c:
                raise ValueError(f"layer {layer.name}: expects {layer.in_ch} channels, "
                                 f"previous layer produces {c}")
            c = layer.out_ch
            h = (h - 1) // layer.stride + 1
            w = (w - 1) // layer.stride + 1
        elif layer.kind == "conv_transpose":
            if layer.in_ch != c:
                raise ValueError(f"layer {layer.name}: expects {layer.in_ch} channels, "
                                 f"previous layer produces {c}")
            c = layer.out_ch
            h, w = 2 * h, 2 * w
        elif layer.kind == "max_pool":
            h, w = h // 2, w // 2
        elif layer.kind == "residual_block":
            if layer.channels != c:
                raise ValueError(f"layer {layer.name}: expects {layer.channels} channels, "
                                 f"previous layer produces {c}")
        if layer.tap:
            taps[layer.tap] = (c, h, w)
    return taps, (c, h, w)


def run_network(spec, tensors, states, x, mode="eval", want_taps=(),
                linearize=False, stop_after_taps=False):
    """Execute the layer list on an NCHW tensor.

    ``tensors`` maps parameter names to Tensor/Parameter nodes; ``states``
    maps batch-norm names to BatchNormState. ``linearize`` replaces
    activations and normalization with identity and drops biases (used for
    receptive-field probing). ``stop_after_taps`` returns as soon as every
    requested tap is collected, skipping the rest of the network.
    """
    if x.data.ndim != 4:
        raise ValueError(f"network input must be NCHW, got shape {x.data.shape}")
    if x.data.shape[1] != spec.in_channels:
        raise ValueError(f"network expects {spec.in_channels} input channels, "
                         f"got {x.data.shape[1]}")
    available = set(spec.tap_names())
    for tap in want_taps:
        if tap not in available:
            raise KeyError(f"unknown tap {tap!r}; available taps: {sorted(available)}")

    taps = {}
    out = x
    for layer in spec.layers:
        if layer.kind in ("input", "output"):
            pass
        elif layer.kind == "conv":
            out = _apply_conv(layer, tensors, out, linearize)
        elif layer.kind == "conv_transpose":
            bias = None if linearize else tensors[f"{layer.name}.bias"]
            out = conv2d_transpose(out, tensors[f"{layer.name}.weight"], bias)
        elif layer.kind == "batch_norm":
            if not linearize:
                out = batch_norm(out, tensors[f"{layer.name}.gamma"],
                                 tensors[f"{layer.name}.beta"],
                                 states[layer.name], mode)
        elif layer.kind == "relu":
            if not linearize:
                out = relu(out)
        elif layer.kind == "scaled_tanh":
            if not linearize:
                out = scaled_tanh(out)
        elif layer.kind == "max_pool":
            out = max_pool2d(out)
        elif layer.kind == "residual_block":
            out = _apply_residual(layer, tensors, states, out, mode, linearize)
        if layer.tap and layer.tap in want_taps:
            taps[layer.tap] = out
    return out, taps


def _apply_conv(layer, tensors, x, linearize):
    bias = None if linearize else tensors[f"{layer.name}.bias"]
    return conv2d(x, tensors[f"{layer.name}.weight"], bias,
                  stride=layer.stride, pad=layer.kernel // 2, pad_mode=layer.pad_mode)


def _apply_residual(layer, tensors, states, x, mode, linearize):
    name = layer.name
    out = conv2d(x, tensors[f"{name}.conv_a.weight"],
                 None if linearize else tensors[f"{name}.conv_a.bias"],
                 stride=1, pad=1, pad_mode="reflect")
    if not linearize:
        out = batch_norm(out, tensors[f"{name}.bn_a.gamma"], tensors[f"{name}.bn_a.beta"],
                         states[f"{name}.bn_a"], mode)
        out = relu(out)
    out = conv2d(out, tensors[f"{name}.conv_b.weight"],
                 None if linearize else tensors[f"{name}.conv_b.bias"],
                 stride=1, pad=1, pad_mode="reflect")
    if not linearize:
        out = batch_norm(out, tensors[f"{name}.bn_b.gamma"], tensors[f"{name}.bn_b.beta"],
                         states[f"{name}.bn_b"], mode)
    return out + x


def forward(checkpoint, batch, want_taps=()):
    """Deterministic eval-mode forward pass; returns (output, taps)."""
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    tensors = {name: Tensor(arr) for name, arr in checkpoint.tensors.items()}
    states = checkpoint.bn_states()
    return run_network(checkpoint.spec, tensors, states, batch,
                       mode="eval", want_taps=want_taps)


def loss_net_features(lossnet, image, taps):
    """Activation maps of the (fixed) loss network at the named taps.

    Applies the spec's preprocessing record first. Gradients flow to the
    image; loss-network parameters are wrapped without gradient tracking.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    added_batch = False
    if x.data.ndim == 3:
        x = x.reshape((1,) + x.data.shape)
        added_batch = True
    spec = lossnet.spec
    if spec.preprocess_mean:
        mean = np.asarray(spec.preprocess_mean, dtype=x.data.dtype)
        x = x - Tensor(np.broadcast_to(mean[None, :, None, None], x.data.shape))
    if spec.preprocess_std:
        std = np.asarray(spec.preprocess_std, dtype=x.data.dtype)
        x = x * Tensor(np.broadcast_to(1.0 / std[None, :, None, None], x.data.shape))
    tensors = {name: Tensor(arr) for name, arr in lossnet.tensors.items()}
    states = lossnet.bn_states()
    _, tap_map = run_network(spec, tensors, states, x, mode="eval", want_taps=taps)
    if added_batch:
        tap_map = {name: t.reshape(t.data.shape[1:]) for name, t in tap_map.items()}
    return tap_map


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_checkpoint(checkpoint, path):
    """Write the PFNW container: header JSON plus float32 LE payload."""
    manifest = []
    payload = bytearray()
    for name in _manifest_order(checkpoint):
        arr = np.ascontiguousarray(checkpoint.tensors[name], dtype=np.float32)
        entry = {
            "name": name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": arr.nbytes,
        }
        manifest.append(entry)
        payload += arr.astype("<f4").tobytes()
    header = {
        "spec": checkpoint.spec.to_json(),
        "metadata": checkpoint.metadata,
        "manifest": manifest,
    }
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(meta).to_bytes(8, "little"))
        fh.write(meta)
        fh.write(bytes(payload))


def _manifest_order(checkpoint):
    declared = [n for n in parameter_shapes(checkpoint.spec) if n in checkpoint.tensors]
    extras = sorted(set(checkpoint.tensors) - set(declared))
    return declared + extras


def load_checkpoint(path):
    """Read a PFNW file back into a Checkpoint, verifying its manifest."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise NotACheckpointError(f"{path} is not a checkpoint file (bad magic)")
    if len(blob) < 16:
        raise TruncatedCheckpointError(f"{path}: header cut short")
    version = int.from_bytes(blob[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    meta_len = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + meta_len:
        raise TruncatedCheckpointError(f"{path}: metadata cut short")
    try:
        header = json.loads(blob[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata: {exc}") from exc
    spec = NetworkSpec.from_json(header["spec"])
    payload = blob[16 + meta_len:]
    tensors = {}
    for entry in header["manifest"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        nbytes = entry["nbytes"]
        if int(np.prod(shape)) * 4 != nbytes:
            raise CheckpointShapeError(
                f"{path}: tensor {name} declares shape {shape} but {nbytes} bytes")
        if entry["offset"] + nbytes > len(payload):
            raise TruncatedCheckpointError(
                f"{path}: tensor {name} extends past end of file")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)),
                            offset=entry["offset"]).reshape(shape)
        tensors[name] = np.ascontiguousarray(arr)
    for name, shape in parameter_shapes(spec).items():
        if name not in tensors:
            raise MissingParameterError(f"{path}: checkpoint is missing parameter {name}")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(
                f"{path}: parameter {name} has shape {tensors[name].shape}, spec needs {shape}")
    return Checkpoint(spec=spec, tensors=tensors, metadata=header["metadata"])
