#network.py
"""
DeepFuse network: tied-weight feature extraction for both exposures, a
merge layer, and three reconstruction layers producing the fused luminance.

Checkpoint layout (all little-endian):

    b"DFCK" | u16 version | u32 n | n bytes ArchConfig JSON
    | u32 count | count float32 parameters | u32 CRC32 of everything before
"""

import json
import logging
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from utils.errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    CheckpointWriteError,
    ConfigurationError,
    UsageError,
)
from utils.gradcore import (
    Activation,
    ConvLayer,
    MergeMode,
    ParamDict,
    Tensor3,
    conv2d_backward,
    conv2d_pre_activation,
    activate,
    merge_backward,
    merge_forward,
)

logger = logging.getLogger(__name__)

LAYER_NAMES = ("c1", "c2", "c3", "c4", "c5")

# Laptop-scale layer plan used with TrainConfig.desk()
DESK_KERNELS = (5, 3, 3, 3, 3)
DESK_CHANNELS = (8, 12, 12, 8, 1)
CHECKPOINT_MAGIC = b"DFCK"
CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    """
    Layer kernel sizes and output channels for C1..C5

    C1 and C2 are shared by both exposures; C5 must emit one channel.
    """

    kernels: Tuple[int, ...] = (5, 7, 7, 5, 5)
    channels: Tuple[int, ...] = (16, 32, 32, 16, 1)
    merge: MergeMode = MergeMode.ADD
    seed: int = 0

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        self.channels = tuple(int(c) for c in self.channels)
        try:
            self.merge = MergeMode(self.merge)
        except ValueError:
            raise ConfigurationError(
                f"Unknown merge mode '{self.merge}'; choose from {[m.value for m in MergeMode]}"
            )
        if len(self.kernels) != len(LAYER_NAMES) or len(self.channels) != len(LAYER_NAMES):
            raise ConfigurationError(f"Need {len(LAYER_NAMES)} kernel sizes and channel counts")
        if self.kernels[0] != 5:
            raise ConfigurationError(f"First-layer kernel must be 5x5, got {self.kernels[0]}")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigurationError(f"Kernel sizes must be odd and positive, got {self.kernels}")
        if any(c < 1 for c in self.channels):
            raise ConfigurationError(f"Channel counts must be positive, got {self.channels}")
        if self.channels[-1] != 1:
            raise ConfigurationError(f"Last layer must output 1 channel, got {self.channels[-1]}")

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "ArchConfig":
        """Default channel plan with the named merge ("default" is add)"""
        merge = MergeMode.ADD if name == "default" else name
        return cls(merge=merge, seed=seed)

    @classmethod
    def desk(cls, merge: MergeMode = MergeMode.ADD, seed: int = 0) -> "ArchConfig":
        """Reduced layer plan sized for the desk training preset"""
        return cls(kernels=DESK_KERNELS, channels=DESK_CHANNELS, merge=merge, seed=seed)

    def layer_shapes(self) -> List[Tuple[int, int, int, int]]:
        k, ch = self.kernels, self.channels
        merged = ch[1] * 2 if self.merge is MergeMode.CONCAT else ch[1]
        inputs = (1, ch[0], merged, ch[2], ch[3])
        return [(k[i], k[i], inputs[i], ch[i]) for i in range(len(LAYER_NAMES))]

    @property
    def receptive_field(self) -> int:
        return 1 + sum(k - 1 for k in self.kernels)

    def parameter_count(self) -> int:
        return sum(kh * kw * cin * cout + cout for kh, kw, cin, cout in self.layer_shapes())

    def to_dict(self) -> Dict:
        return {
            "kernels": list(self.kernels),
            "channels": list(self.channels),
            "merge": self.merge.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ArchConfig":
        return cls(
            kernels=tuple(data["kernels"]),
            channels=tuple(data["channels"]),
            merge=data["merge"],
            seed=int(data.get("seed", 0)),
        )


@dataclass
class NetworkParams:
    arch: ArchConfig
    layers: List[ConvLayer]

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(self.layers) != len(shapes):
            raise ConfigurationError(f"Expected {len(shapes)} layers, got {len(self.layers)}")
        for name, layer, shape in zip(LAYER_NAMES, self.layers, shapes):
            if layer.kernel.shape != shape:
                raise ConfigurationError(f"Layer {name} kernel shape {layer.kernel.shape} != {shape}")

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, layer in zip(LAYER_NAMES, self.layers):
            out[f"{name}.kernel"] = layer.kernel
            out[f"{name}.bias"] = layer.bias
        return out

    def replace_arrays(self, arrays: ParamDict) -> "NetworkParams":
        layers = [
            ConvLayer(arrays[f"{name}.kernel"], arrays[f"{name}.bias"], layer.activation)
            for name, layer in zip(LAYER_NAMES, self.layers)
        ]
        return NetworkParams(self.arch, layers)

    def astype(self, dtype) -> "NetworkParams":
        return self.replace_arrays({k: v.astype(dtype) for k, v in self.arrays().items()})

    def count(self) -> int:
        return sum(v.size for v in self.arrays().values())


@dataclass
class ForwardCache:
    """Activations retained by forward() for the matching backward() call"""

    params: NetworkParams
    streams: Tuple[List[Tuple[Tensor3, np.ndarray]], List[Tuple[Tensor3, np.ndarray]]]
    features: Tuple[Tensor3, Tensor3]
    reconstruction: List[Tuple[Tensor3, np.ndarray]] = field(default_factory=list)


def init_network(cfg: ArchConfig) -> NetworkParams:
    """
    He-normal kernels (unit gain on the linear output layer), zero biases

    Args:
        cfg: Architecture; cfg.seed fixes the draw

    Returns:
        float32 NetworkParams
    """
    rng = np.random.default_rng(cfg.seed)
    layers = []
    for index, (kh, kw, cin, cout) in enumerate(cfg.layer_shapes()):
        last = index == len(LAYER_NAMES) - 1
        fan_in = kh * kw * cin
        std = np.sqrt((1.0 if last else 2.0) / fan_in)
        kernel = (rng.standard_normal((kh, kw, cin, cout)) * std).astype(np.float32)
        layers.append(
            ConvLayer(kernel, np.zeros(cout, dtype=np.float32), Activation.LINEAR if last else Activation.RELU)
        )
    logger.info(f"Initialised network with {cfg.parameter_count()} parameters (merge={cfg.merge.value}, seed={cfg.seed})")
    return NetworkParams(cfg, layers)


def _run_layers(x: Tensor3, layers: List[ConvLayer]) -> Tuple[Tensor3, List[Tuple[Tensor3, np.ndarray]]]:
    trace = []
    for layer in layers:
        pre = conv2d_pre_activation(x, layer)
        trace.append((x, pre))
        x = Tensor3(activate(pre, layer.activation))
    return x, trace


def _back_layers(
    trace: List[Tuple[Tensor3, np.ndarray]], layers: List[ConvLayer], grad: Tensor3
) -> Tuple[Tensor3, List[Tuple[np.ndarray, np.ndarray]]]:
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        inp, pre = trace[i]
        grad, grad_kernel, grad_bias = conv2d_backward(inp, layers[i], grad, pre)
        grads[i] = (grad_kernel, grad_bias)
    return grad, grads


def forward(params: NetworkParams, y1: np.ndarray, y2: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """
    Fuse two luminance planes

    Args:
        params: Network parameters
        y1, y2: Under- and over-exposed Y planes of equal size

    Returns:
        Tuple of (fused plane before clamping, activation cache)

    Raises:
        ConfigurationError: Plane sizes differ
    """
    a = np.asarray(y1, dtype=np.float64)
    b = np.asarray(y2, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ConfigurationError(f"Network inputs must be equally sized planes, got {a.shape} and {b.shape}")

    pre_fusion, reconstruction = params.layers[:2], params.layers[2:]
    f1, trace1 = _run_layers(Tensor3(a), pre_fusion)
    f2, trace2 = _run_layers(Tensor3(b), pre_fusion)
    merged = merge_forward(f1, f2, params.arch.merge)
    out, trace3 = _run_layers(merged, reconstruction)
    return out.plane(), ForwardCache(params, (trace1, trace2), (f1, f2), trace3)


def backward(params: NetworkParams, cache: ForwardCache, grad_output: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """
    Parameter gradients for dLoss/dFused

    Tied layers receive the sum of both streams' contributions.

    Raises:
        UsageError: cache came from a forward call with other parameters
    """
    if cache.params is not params:
        raise UsageError("Activation cache does not belong to these parameters; run forward() again")
    grad = Tensor3(np.asarray(grad_output, dtype=np.float64))
    expected = cache.reconstruction[-1][1].shape
    if grad.shape != expected:
        raise ConfigurationError(f"Output gradient shape {grad.shape} != network output {expected}")

    pre_fusion, reconstruction = params.layers[:2], params.layers[2:]
    grad_merged, recon_grads = _back_layers(cache.reconstruction, reconstruction, grad)
    g1, g2 = merge_backward(cache.features[0], cache.features[1], params.arch.merge, grad_merged)
    _, stream1 = _back_layers(cache.streams[0], pre_fusion, g1)
    _, stream2 = _back_layers(cache.streams[1], pre_fusion, g2)

    tied = [(k1 + k2, b1 + b2) for (k1, b1), (k2, b2) in zip(stream1, stream2)]
    out = OrderedDict()
    for name, (grad_kernel, grad_bias) in zip(LAYER_NAMES, tied + recon_grads):
        out[f"{name}.kernel"] = grad_kernel
        out[f"{name}.bias"] = grad_bias
    return out


def checkpoint_overhead(arch: ArchConfig) -> int:
    """Bytes in a checkpoint that are not parameter values"""
    config_bytes = json.dumps(arch.to_dict(), sort_keys=True).encode("utf-8")
    return len(CHECKPOINT_MAGIC) + 2 + 4 + len(config_bytes) + 4 + 4


def save_checkpoint(params: NetworkParams, path: Union[str, Path]) -> Path:
    """
    Write parameters as a versioned, checksummed binary file

    The file is written beside the target and renamed into place.

    Raises:
        CheckpointWriteError: The file could not be written
    """
    path = Path(path)
    config_bytes = json.dumps(params.arch.to_dict(), sort_keys=True).encode("utf-8")
    values = np.concatenate([v.astype("<f4").ravel() for v in params.arrays().values()])
    body = b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<H", CHECKPOINT_VERSION),
            struct.pack("<I", len(config_bytes)),
            config_bytes,
            struct.pack("<I", values.size),
            values.tobytes(),
        ]
    )
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointWriteError(f"Could not write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} ({values.size} parameters)")
    return path


def _take(data: bytes, offset: int, size: int, path: Path) -> Tuple[bytes, int]:
    if offset + size > len(data):
        raise CheckpointTruncatedError(f"Checkpoint {path} is truncated ({len(data)} bytes)")
    return data[offset:offset + size], offset + size


def load_checkpoint(path: Union[str, Path]) -> NetworkParams:
    """
    Read a checkpoint written by save_checkpoint

    Raises:
        CheckpointError: Missing file or not a checkpoint
        CheckpointVersionError: Unsupported format version
        CheckpointTruncatedError: File ends early
        CheckpointChecksumError: Stored CRC does not match
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e

    magic, offset = _take(data, 0, len(CHECKPOINT_MAGIC), path)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a DeepFuse checkpoint")
    raw, offset = _take(data, offset, 2, path)
    (version,) = struct.unpack("<H", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"Checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")

    raw, offset = _take(data, offset, 4, path)
    (config_len,) = struct.unpack("<I", raw)
    config_bytes, offset = _take(data, offset, config_len, path)
    raw, offset = _take(data, offset, 4, path)
    (count,) = struct.unpack("<I", raw)
    payload, offset = _take(data, offset, 4 * count, path)
    raw, end = _take(data, offset, 4, path)
    (stored_crc,) = struct.unpack("<I", raw)

    if end != len(data):
        raise CheckpointChecksumError(f"Checkpoint {path} has {len(data) - end} unexpected trailing bytes")
    if zlib.crc32(data[:offset]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError(f"Checkpoint {path} failed its checksum")

    try:
        arch = ArchConfig.from_dict(json.loads(config_bytes.decode("utf-8")))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"Checkpoint {path} carries an invalid architecture: {e}") from e
    if count != arch.parameter_count():
        raise CheckpointError(f"Checkpoint {path} holds {count} parameters, architecture needs {arch.parameter_count()}")

    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    layers, cursor = [], 0
    for index, (kh, kw, cin, cout) in enumerate(arch.layer_shapes()):
        size = kh * kw * cin * cout
        kernel = values[cursor:cursor + size].reshape(kh, kw, cin, cout)
        bias = values[cursor + size:cursor + size + cout]
        cursor += size + cout
        last = index == len(LAYER_NAMES) - 1
        layers.append(ConvLayer(kernel.copy(), bias.copy(), Activation.LINEAR if last else Activation.RELU))
    logger.info(f"Loaded checkpoint {path} (merge={arch.merge.value})")
    return NetworkParams(arch, layers)
