"""Residual super-resolution network.

``output = up + unet(up)`` where ``up`` is the bilinear upsample of the
low-resolution input and ``unet`` is an attention U-Net operating at the
target resolution. With the final 1x1 projection initialised to zero the
untrained model reproduces bilinear interpolation exactly.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import imagecore
from .errors import CheckpointError, ConfigError, ShapeError

Parameters = dict[str, np.ndarray]

SCALES = (4, 8)
NORMALIZATIONS = ("none", "group")


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 4
    depth: int = 4
    base_channels: int = 32
    attention_enabled: bool = True
    zero_init_final: bool = True
    normalization: str = "none"
    in_channels: int = 3

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def gate_channels(self, level: int) -> int:
        return max(self.channels(level) // 2, 1)

    @property
    def multiple(self) -> int:
        """Spatial multiple required of the high-resolution grid."""
        return 2**self.depth

    @property
    def lr_multiple(self) -> int:
        """Spatial multiple required of the low-resolution input."""
        return self.multiple // math.gcd(self.multiple, self.scale)

    def check_input(self, h: int, w: int) -> None:
        for name, n in (("height", h), ("width", w)):
            if (n * self.scale) % self.multiple:
                raise ConfigError(
                    f"input {name} {n} x scale {self.scale} is not divisible by 2^depth = {self.multiple}; "
                    f"input dimensions must be multiples of {self.lr_multiple}"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# closed-form parameter count


def _conv_count(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def parameter_count(config: ModelConfig) -> int:
    """Number of trainable scalars, computed from the layer list alone."""
    norm = 2 if config.normalization == "group" else 0

    def block(cin, cout):
        return _conv_count(cin, cout, 3) + _conv_count(cout, cout, 3) + 2 * norm * cout

    c = config.channels
    total = 0
    cin = config.in_channels
    for level in range(config.depth):
        total += block(cin, c(level))
        cin = c(level)
    total += block(c(config.depth - 1), c(config.depth))
    for level in range(config.depth):
        if config.attention_enabled:
            f = config.gate_channels(level)
            total += _conv_count(c(level), f, 1) + _conv_count(c(level + 1), f, 1) + _conv_count(f, 1, 1)
        total += block(c(level) + c(level + 1), c(level))
    total += _conv_count(c(0), config.in_channels, 1)
    return total


# --------------------------------------------------------------------------
# network


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, normalization: str = "none"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        if normalization == "group":
            self.norm1 = nn.GroupNorm(1, cout)
            self.norm2 = nn.GroupNorm(1, cout)
        else:
            self.norm1 = self.norm2 = None

    def forward(self, x):
        x = self.conv1(x)
        if self.norm1 is not None:
            x = self.norm1(x)
        x = F.relu(x)
        x = self.conv2(x)
        if self.norm2 is not None:
            x = self.norm2(x)
        return F.relu(x)


def upsample2x(x: torch.Tensor, size=None) -> torch.Tensor:
    # parameter-free bilinear, half-pixel centres
    if size is None:
        size = (x.shape[-2] * 2, x.shape[-1] * 2)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def attention_coefficients(skip, gating, params: dict) -> torch.Tensor:
    """Additive attention map in (0, 1), shape ``(N, 1, H, W)`` of ``skip``.

    ``params`` holds ``skip_proj.weight/bias``, ``gating_proj.weight/bias``
    and ``psi.weight/bias`` (all 1x1 convolutions). The coarser ``gating``
    features are bilinearly upsampled to the skip resolution first.
    """
    if skip.shape[0] != gating.shape[0]:
        raise ShapeError(f"batch sizes differ: skip {tuple(skip.shape)} vs gating {tuple(gating.shape)}")
    sh, sw = skip.shape[-2:]
    gh, gw = gating.shape[-2:]
    if (gh * 2, gw * 2) != (sh, sw):
        raise ShapeError(f"gating grid {gh}x{gw} must be half of skip grid {sh}x{sw}")
    g = upsample2x(gating, (sh, sw))
    a = F.conv2d(skip, params["skip_proj.weight"], params["skip_proj.bias"])
    a = a + F.conv2d(g, params["gating_proj.weight"], params["gating_proj.bias"])
    a = F.conv2d(F.relu(a), params["psi.weight"], params["psi.bias"])
    return torch.sigmoid(a)


def attention_gate(skip, gating, params: dict) -> torch.Tensor:
    """Scale ``skip`` by its attention coefficients (broadcast over channels)."""
    return skip * attention_coefficients(skip, gating, params)


class AttentionGate(nn.Module):
    def __init__(self, skip_channels: int, gating_channels: int, inter_channels: int):
        super().__init__()
        self.skip_proj = nn.Conv2d(skip_channels, inter_channels, 1)
        self.gating_proj = nn.Conv2d(gating_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def _params(self) -> dict:
        return dict(self.named_parameters())

    def coefficients(self, skip, gating):
        return attention_coefficients(skip, gating, self._params())

    def forward(self, skip, gating):
        return attention_gate(skip, gating, self._params())


class AttentionUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        norm = config.normalization
        cin = config.in_channels
        encoders = []
        for level in range(config.depth):
            encoders.append(ConvBlock(cin, c(level), norm))
            cin = c(level)
        self.encoders = nn.ModuleList(encoders)
        self.bottleneck = ConvBlock(c(config.depth - 1), c(config.depth), norm)
        if config.attention_enabled:
            self.gates = nn.ModuleList(
                AttentionGate(c(level), c(level + 1), config.gate_channels(level)) for level in range(config.depth)
            )
        else:
            self.gates = None
        self.decoders = nn.ModuleList(ConvBlock(c(level) + c(level + 1), c(level), norm) for level in range(config.depth))
        self.head = nn.Conv2d(c(0), config.in_channels, 1)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for level in reversed(range(self.config.depth)):
            skip = skips[level]
            if self.gates is not None:
                skip = self.gates[level](skip, x)
            x = self.decoders[level](torch.cat([skip, upsample2x(x)], dim=1))
        return self.head(x)


class ResidualSR(nn.Module):
    """Bilinear baseline plus U-Net correction. Input and output are NCHW."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.unet = AttentionUNet(config)
        self._interp_cache: dict = {}

    def _interp(self, n: int, ref: torch.Tensor) -> torch.Tensor:
        key = (n, ref.dtype, ref.device)
        if key not in self._interp_cache:
            mat = imagecore.upsample_matrix(n, self.config.scale, "bilinear")
            self._interp_cache[key] = torch.as_tensor(np.array(mat), dtype=ref.dtype, device=ref.device)
        return self._interp_cache[key]

    def baseline(self, lr: torch.Tensor) -> torch.Tensor:
        h, w = lr.shape[-2:]
        return torch.einsum("ah,nchw,bw->ncab", self._interp(h, lr), lr, self._interp(w, lr))

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        self.config.check_input(lr.shape[-2], lr.shape[-1])
        up = self.baseline(lr)
        return up + self.unet(up)


# --------------------------------------------------------------------------
# parameters


def _skeleton(config: ModelConfig) -> ResidualSR:
    with torch.device("meta"):
        return ResidualSR(config)


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    return OrderedDict((name, tuple(p.shape)) for name, p in _skeleton(config).named_parameters())


def init_parameters(config: ModelConfig, seed: int = 0) -> Parameters:
    """Deterministic fan-in scaled initialisation.

    Convolutions feeding a ReLU get He-normal weights, the attention ``psi``
    and the output head get ``N(0, 1/fan_in)``, biases start at zero and
    normalisation scales at one. With ``zero_init_final`` the head is zero.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif ".norm" in name:
            arr = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if (name.startswith("unet.head.") or ".psi." in name) else 2.0
            arr = rng.standard_normal(shape) * math.sqrt(gain / fan_in)
        if name.startswith("unet.head.") and config.zero_init_final:
            arr = np.zeros(shape)
        params[name] = arr
    return params


def build_model(config: ModelConfig, params: Parameters | None = None, dtype=torch.float32) -> ResidualSR:
    model = ResidualSR(config).to(dtype)
    if params is None:
        params = init_parameters(config)
    load_parameters(model, params)
    return model


def load_parameters(model: ResidualSR, params: Parameters) -> None:
    expected = dict(model.named_parameters())
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter names do not match the config (missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, p in expected.items():
            value = np.asarray(params[name])
            if tuple(value.shape) != tuple(p.shape):
                raise ShapeError(f"parameter {name} has shape {value.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.ascontiguousarray(value)).to(p.dtype))


def extract_parameters(model: ResidualSR) -> Parameters:
    return OrderedDict((n, p.detach().cpu().numpy().copy()) for n, p in model.named_parameters())


# --------------------------------------------------------------------------
# numpy-facing forward/backward


def image_to_tensor(img, dtype=torch.float64) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)[None])).to(dtype)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().to(torch.float64).numpy()[0].transpose(1, 2, 0).copy()


def model_forward(lr_patch, config: ModelConfig, params: Parameters, dtype=torch.float64) -> np.ndarray:
    """Raw (unclamped) super-resolved ``(H*s, W*s, C)`` grid for one patch."""
    lr = np.asarray(lr_patch, dtype=np.float64)
    if lr.ndim == 2:
        lr = lr[:, :, None]
    config.check_input(lr.shape[0], lr.shape[1])
    model = build_model(config, params, dtype)
    with torch.no_grad():
        return tensor_to_image(model(image_to_tensor(lr, dtype)))


def finalize(output) -> np.ndarray:
    """Clamp raw model output for export or scoring."""
    return imagecore.clamp01(output)


def model_gradients(lr_patch, config: ModelConfig, params: Parameters, output_grad) -> tuple[Parameters, np.ndarray]:
    """Back-propagate ``output_grad`` (dLoss/dOutput) through one forward pass.

    Returns gradients for every parameter and for the low-resolution input,
    evaluated in float64.
    """
    model = build_model(config, params, torch.float64)
    x = image_to_tensor(lr_patch).requires_grad_(True)
    out = model(x)
    g = image_to_tensor(output_grad)
    if g.shape != out.shape:
        raise ShapeError(f"output gradient {tuple(g.shape)} does not match output {tuple(out.shape)}")
    out.backward(g)
    grads = OrderedDict((n, p.grad.detach().numpy().copy()) for n, p in model.named_parameters())
    return grads, tensor_to_image(x.grad)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"FSRCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: ModelConfig
    parameters: Parameters
    training_meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def dtype(self) -> str:
        kinds = {np.asarray(a).dtype.itemsize for a in self.parameters.values()}
        return "float32" if kinds == {4} else "float64"

    def build(self, dtype=torch.float32) -> ResidualSR:
        return build_model(self.config, self.parameters, dtype)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    dtype_name = ckpt.dtype
    dt = _DTYPES[dtype_name]
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "dtype": dtype_name, "training_meta": ckpt.training_meta},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ckpt.format_version, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.parameters)))
    for name, arr in ckpt.parameters.items():
        arr = np.ascontiguousarray(arr, dtype=dt)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a frozensr checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        dt = _DTYPES[header["dtype"]]
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        params[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameter arrays")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    expected = parameter_shapes(config)
    if list(expected) != list(params) or any(tuple(params[k].shape) != v for k, v in expected.items()):
        raise CheckpointError("checkpoint parameters do not match its model config")
    return Checkpoint(config, params, header.get("training_meta", {}), version)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    return parse_checkpoint(data)
