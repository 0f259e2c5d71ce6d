"""Residual encoder-decoder network for dense multi-channel volumetric segmentation.

Layout: a stem convolution lifts the single input channel to `base_width`,
two stride-2 convolutions halve the grid twice while doubling width, a stack
of pre-activation residual blocks runs at the coarsest grid, and two stride-2
transposed convolutions restore the input resolution before a 1x1x1 head
emits one logit channel per class.  All activations are ReLU; no
normalization layers.

Spatial bookkeeping: the downsampling convs use odd kernels with
padding (k-1)//2, which maps even extents D to exactly D/2; the upsampling
stages use kernel 2, stride 2, padding 0, which maps D to exactly 2D.  Input
extents must therefore be divisible by 4.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .serialization import (
    FormatVersionError,
    PayloadSizeError,
    TruncatedPayloadError,
    canonical_json,
    check_version,
    float64_bytes,
    float64_from_bytes,
)
from .tensor import Tensor, add, conv3d, conv3d_transpose, relu

CHECKPOINT_MAGIC = b"VSEG3DCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 11
    base_width: int = 32
    num_res_blocks: int = 16
    kernel_size: int = 3

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.num_res_blocks < 0:
            raise ValueError(f"num_res_blocks must be >= 0, got {self.num_res_blocks}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "base_width": self.base_width,
            "num_res_blocks": self.num_res_blocks,
            "kernel_size": self.kernel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            num_classes=int(d["num_classes"]),
            base_width=int(d["base_width"]),
            num_res_blocks=int(d["num_res_blocks"]),
            kernel_size=int(d["kernel_size"]),
        )


def parameter_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the order fixes init draws and payload layout."""
    w = config.base_width
    k = config.kernel_size
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("stem.kernel", (w, 1, k, k, k)),
        ("stem.bias", (w,)),
        ("down1.kernel", (2 * w, w, k, k, k)),
        ("down1.bias", (2 * w,)),
        ("down2.kernel", (4 * w, 2 * w, k, k, k)),
        ("down2.bias", (4 * w,)),
    ]
    for i in range(config.num_res_blocks):
        shapes.append((f"block{i:02d}.conv1.kernel", (4 * w, 4 * w, k, k, k)))
        shapes.append((f"block{i:02d}.conv1.bias", (4 * w,)))
        shapes.append((f"block{i:02d}.conv2.kernel", (4 * w, 4 * w, k, k, k)))
        shapes.append((f"block{i:02d}.conv2.bias", (4 * w,)))
    shapes.extend(
        [
            # transposed kernels are stored [C_in, C_out, 2, 2, 2]
            ("up1.kernel", (4 * w, 2 * w, 2, 2, 2)),
            ("up1.bias", (2 * w,)),
            ("up2.kernel", (2 * w, w, 2, 2, 2)),
            ("up2.bias", (w,)),
            ("head.kernel", (config.num_classes, w, 1, 1, 1)),
            ("head.bias", (config.num_classes,)),
        ]
    )
    return shapes


@dataclass
class ModelParams:
    config: NetworkConfig
    tensors: dict[str, Tensor]
    init_seed: int | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [n for n, _ in parameter_shapes(self.config)]
        missing = [n for n in self.names if n not in self.tensors]
        if missing:
            raise ValueError(f"missing parameter tensors: {missing}")

    def parameter_count(self) -> int:
        return sum(self.tensors[n].size for n in self.names)

    def clone(self) -> "ModelParams":
        copies = {
            n: Tensor(self.tensors[n].data.copy(), requires_grad=self.tensors[n].requires_grad)
            for n in self.names
        }
        return ModelParams(self.config, copies, init_seed=self.init_seed, names=list(self.names))

    def zero_grad(self) -> None:
        for n in self.names:
            self.tensors[n].zero_grad()


def _fan_in(shape: tuple[int, ...], transposed: bool) -> int:
    if transposed:
        c_in = shape[0]
    else:
        c_in = shape[1]
    k3 = int(np.prod(shape[2:]))
    return c_in * k3


def build_network(config: NetworkConfig, seed: int) -> ModelParams:
    """He fan-in normal init for kernels, zeros for biases, in fixed name order."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float64)
        else:
            fan = _fan_in(shape, transposed=name.startswith("up"))
            std = np.sqrt(2.0 / fan)
            data = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors, init_seed=seed)


def residual_block(x: Tensor, conv1_kernel: Tensor, conv1_bias: Tensor,
                   conv2_kernel: Tensor, conv2_bias: Tensor, padding: int) -> Tensor:
    """Pre-activation block: out = x + conv(relu(conv(relu(x)))), identity skip."""
    if x.shape[0] != conv1_kernel.shape[1]:
        raise ValueError(
            f"residual block input has {x.shape[0]} channels but conv1 expects {conv1_kernel.shape[1]}"
        )
    h = relu(x)
    h = conv3d(h, conv1_kernel, conv1_bias, stride=1, padding=padding)
    h = relu(h)
    h = conv3d(h, conv2_kernel, conv2_bias, stride=1, padding=padding)
    return add(x, h)


def network_forward(params: ModelParams, x: Tensor) -> Tensor:
    """Map a [1, D, H, W] image to [num_classes, D, H, W] logits.

    D, H, W must each be divisible by 4 so the two downsampling stages and the
    two upsampling stages restore the input grid exactly.
    """
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected input of shape [1, D, H, W], got {x.shape}")
    for ax, d in zip("DHW", x.shape[1:]):
        if d % 4 != 0:
            raise ValueError(f"input extent {ax}={d} is not divisible by 4")
        if d < 4:
            raise ValueError(f"input extent {ax}={d} is too small")
    t = params.tensors
    pad = (params.config.kernel_size - 1) // 2
    h = relu(conv3d(x, t["stem.kernel"], t["stem.bias"], stride=1, padding=pad))
    h = relu(conv3d(h, t["down1.kernel"], t["down1.bias"], stride=2, padding=pad))
    h = relu(conv3d(h, t["down2.kernel"], t["down2.bias"], stride=2, padding=pad))
    for i in range(params.config.num_res_blocks):
        h = residual_block(
            h,
            t[f"block{i:02d}.conv1.kernel"],
            t[f"block{i:02d}.conv1.bias"],
            t[f"block{i:02d}.conv2.kernel"],
            t[f"block{i:02d}.conv2.bias"],
            padding=pad,
        )
    h = relu(conv3d_transpose(h, t["up1.kernel"], t["up1.bias"], stride=2, padding=0))
    h = relu(conv3d_transpose(h, t["up2.kernel"], t["up2.bias"], stride=2, padding=0))
    return conv3d(h, t["head.kernel"], t["head.bias"], stride=1, padding=0)


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Single-file container: magic, uint64 manifest length, JSON manifest, raw float64 payloads."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "init_seed": params.init_seed,
        "params": [{"name": n, "shape": list(params.tensors[n].shape)} for n in params.names],
        "extra": extra or {},
    }
    manifest_bytes = canonical_json(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(manifest_bytes).to_bytes(8, "little"))
        f.write(manifest_bytes)
        for n in params.names:
            f.write(float64_bytes(params.tensors[n].data))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise TruncatedPayloadError(f"checkpoint {path}: file too short to hold a header")
    magic = blob[: len(CHECKPOINT_MAGIC)]
    if magic != CHECKPOINT_MAGIC:
        raise FormatVersionError(f"checkpoint {path}: bad magic {magic!r}, not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    manifest_len = int.from_bytes(blob[off : off + 8], "little")
    off += 8
    if len(blob) < off + manifest_len:
        raise TruncatedPayloadError(f"checkpoint {path}: manifest truncated")
    manifest = json.loads(blob[off : off + manifest_len].decode("utf-8"))
    off += manifest_len
    check_version(manifest.get("format_version"), CHECKPOINT_VERSION, f"checkpoint {path}")
    config = NetworkConfig.from_dict(manifest["config"])
    expected_shapes = dict(parameter_shapes(config))
    names = []
    tensors: dict[str, Tensor] = {}
    payload = blob[off:]
    pos = 0
    for entry in manifest["params"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        if name not in expected_shapes or expected_shapes[name] != shape:
            raise PayloadSizeError(
                f"checkpoint {path}: parameter {name} with shape {shape} does not match the declared config"
            )
        nbytes = int(np.prod(shape)) * 8
        chunk = payload[pos : pos + nbytes]
        if len(chunk) < nbytes:
            raise TruncatedPayloadError(
                f"checkpoint {path}: parameter {name}: expected {nbytes} bytes, found {len(chunk)} (truncated)"
            )
        tensors[name] = Tensor(
            float64_from_bytes(chunk, shape, f"checkpoint {path}: parameter {name}"),
            requires_grad=True,
        )
        names.append(name)
        pos += nbytes
    if pos != len(payload):
        raise PayloadSizeError(
            f"checkpoint {path}: {len(payload) - pos} trailing payload bytes beyond declared parameters"
        )
    if set(names) != set(expected_shapes):
        raise PayloadSizeError(f"checkpoint {path}: manifest does not list every network parameter")
    seed = manifest.get("init_seed")
    params = ModelParams(config, tensors, init_seed=seed, names=names)
    return params, manifest.get("extra", {})
