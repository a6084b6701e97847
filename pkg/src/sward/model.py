"""Encoder architecture, prediction heads, and checkpoint serialization.

The trunk is a stack of conv blocks (3x3 conv, stride 1, pad 1, bias, ReLU,
2x2/2 max pool) followed by global average pooling and a linear embedding
layer.  Three heads read the embedding:

* projection: dense -> ReLU -> dense -> L2 normalize (contrastive space),
* composition: dense -> softmax, reported as percentages,
* scalars: dense -> sigmoid, two outputs (normalized mass and height).

Checkpoints serialize to a single binary file: magic ``SWRD``, a u32 format
version, a u64 metadata length, canonical JSON metadata (config, provenance,
seed, normalization stats, parameter name/shape list), then each parameter
as little-endian float32 in metadata order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import NormStats
from .rng import Rng
from .tensor import (
    Tape,
    Tensor,
    channel_bias,
    conv2d,
    dense,
    global_avg_pool,
    l2_normalize,
    max_pool2d,
    relu,
    sigmoid,
    softmax,
)

__all__ = [
    "PROVENANCES",
    "ModelConfig",
    "Checkpoint",
    "CheckpointError",
    "build",
    "params_to_tensors",
    "tensors_to_arrays",
    "trunk_param_names",
    "trunk_forward",
    "project_forward",
    "composition_forward",
    "scalars_forward",
    "encode",
    "project",
    "predict_composition",
    "predict_scalars",
    "denormalize",
    "checkpoint_to_bytes",
    "checkpoint_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"SWRD"
FORMAT_VERSION = 1
PROVENANCES = ("random_init", "imix_pretrained", "finetuned")


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 32
    input_channels: int = 3
    conv_channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 64
    projection_dim: int = 32
    n_species: int = 3
    predict_scalars: bool = True

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.n_species not in (3, 4):
            raise ValueError(f"n_species must be 3 or 4, got {self.n_species}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ValueError(f"invalid conv_channels {self.conv_channels}")
        if self.input_channels < 1 or self.embedding_dim < 1 or self.projection_dim < 1:
            raise ValueError("channel and dim fields must be positive")
        if self.input_size < 2 ** len(self.conv_channels):
            raise ValueError(
                f"input_size {self.input_size} too small for {len(self.conv_channels)} pooling stages")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    provenance: str
    seed: int
    norm_stats: NormStats | None = None
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not self.params:
            raise ValueError("checkpoint has no parameters")


# ---------------------------------------------------------------------------
# parameters


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter the config can carry."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.input_channels
    for i, c_out in enumerate(config.conv_channels, start=1):
        shapes[f"conv{i}.weight"] = (c_out, c_in, 3, 3)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    e = config.embedding_dim
    shapes["embed.weight"] = (c_in, e)
    shapes["embed.bias"] = (e,)
    shapes["proj1.weight"] = (e, e)
    shapes["proj1.bias"] = (e,)
    shapes["proj2.weight"] = (e, config.projection_dim)
    shapes["proj2.bias"] = (config.projection_dim,)
    shapes["comp.weight"] = (e, config.n_species)
    shapes["comp.bias"] = (config.n_species,)
    if config.predict_scalars:
        shapes["scalar.weight"] = (e, 2)
        shapes["scalar.bias"] = (2,)
    return shapes


def trunk_param_names(config: ModelConfig) -> list[str]:
    names = []
    for i in range(1, len(config.conv_channels) + 1):
        names += [f"conv{i}.weight", f"conv{i}.bias"]
    return names + ["embed.weight", "embed.bias"]


def _init_params(config: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, in canonical parameter order."""
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = float(np.sqrt(2.0 / fan_in))
            params[name] = (rng.normal(size=shape) * std).astype(np.float32)
    return params


def build(config: ModelConfig, seed: int) -> Checkpoint:
    """Freshly initialized model with all heads."""
    return Checkpoint(config=config, params=_init_params(config, Rng(seed)),
                      provenance="random_init", seed=int(seed))


def params_to_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = True,
                      dtype=None) -> dict[str, Tensor]:
    return {
        name: Tensor(arr.astype(dtype) if dtype is not None else arr, requires_grad=requires_grad)
        for name, arr in params.items()
    }


def tensors_to_arrays(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


# ---------------------------------------------------------------------------
# forward passes


def trunk_forward(params: Mapping[str, Tensor], x: Tensor, tape: Tape | None = None) -> Tensor:
    """Images (NCHW) to embeddings (N x embedding_dim)."""
    h = x
    i = 1
    while f"conv{i}.weight" in params:
        h = conv2d(h, params[f"conv{i}.weight"], stride=1, padding=1, tape=tape)
        h = channel_bias(h, params[f"conv{i}.bias"], tape=tape)
        h = relu(h, tape=tape)
        h = max_pool2d(h, window=2, stride=2, tape=tape)
        i += 1
    h = global_avg_pool(h, tape=tape)
    return dense(h, params["embed.weight"], params["embed.bias"], tape=tape)


def project_forward(params: Mapping[str, Tensor], emb: Tensor, tape: Tape | None = None) -> Tensor:
    """Embeddings to unit-norm contrastive features."""
    h = dense(emb, params["proj1.weight"], params["proj1.bias"], tape=tape)
    h = relu(h, tape=tape)
    h = dense(h, params["proj2.weight"], params["proj2.bias"], tape=tape)
    return l2_normalize(h, tape=tape)


def composition_forward(params: Mapping[str, Tensor], emb: Tensor, tape: Tape | None = None) -> Tensor:
    """Embeddings to species fractions (rows sum to 1)."""
    return softmax(dense(emb, params["comp.weight"], params["comp.bias"], tape=tape), tape=tape)


def scalars_forward(params: Mapping[str, Tensor], emb: Tensor, tape: Tape | None = None) -> Tensor:
    """Embeddings to (normalized mass, normalized height) in (0, 1)."""
    return sigmoid(dense(emb, params["scalar.weight"], params["scalar.bias"], tape=tape), tape=tape)


def _check_batch(config: ModelConfig, batch: np.ndarray) -> None:
    expected = (config.input_channels, config.input_size, config.input_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ValueError(f"batch shape {batch.shape} does not match config dims (N, {', '.join(map(str, expected))})")


def encode(ckpt: Checkpoint, batch: np.ndarray) -> np.ndarray:
    """Embeddings for a batch of images."""
    _check_batch(ckpt.config, batch)
    params = params_to_tensors(ckpt.params, requires_grad=False)
    return trunk_forward(params, Tensor(np.asarray(batch, dtype=np.float32))).data


def project(ckpt: Checkpoint, embeddings: np.ndarray) -> np.ndarray:
    """Unit-norm contrastive features for a batch of embeddings."""
    if "proj1.weight" not in ckpt.params:
        raise ValueError("checkpoint has no projection head")
    params = params_to_tensors(ckpt.params, requires_grad=False)
    return project_forward(params, Tensor(np.asarray(embeddings, dtype=np.float32))).data


def predict_composition(ckpt: Checkpoint, embeddings: np.ndarray) -> np.ndarray:
    """Species composition percentages (rows sum to 100)."""
    if "comp.weight" not in ckpt.params:
        raise ValueError("checkpoint has no composition head")
    params = params_to_tensors(ckpt.params, requires_grad=False)
    fractions = composition_forward(params, Tensor(np.asarray(embeddings, dtype=np.float32))).data
    return fractions * np.float32(100.0)


def predict_scalars(ckpt: Checkpoint, embeddings: np.ndarray) -> np.ndarray:
    """Normalized (mass, height) pairs in (0, 1)."""
    if "scalar.weight" not in ckpt.params:
        raise ValueError("checkpoint has no scalar head")
    params = params_to_tensors(ckpt.params, requires_grad=False)
    return scalars_forward(params, Tensor(np.asarray(embeddings, dtype=np.float32))).data


def denormalize(ckpt: Checkpoint, scalars: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map normalized (mass, height) pairs back to kg DM/ha and cm."""
    if ckpt.norm_stats is None:
        raise ValueError("checkpoint has no normalization stats")
    scalars = np.asarray(scalars, dtype=np.float64)
    if scalars.ndim != 2 or scalars.shape[1] != 2:
        raise ValueError(f"expected (N, 2) scalars, got {scalars.shape}")
    return (ckpt.norm_stats.denormalize_mass(scalars[:, 0]),
            ckpt.norm_stats.denormalize_height(scalars[:, 1]))


# ---------------------------------------------------------------------------
# serialization


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "config": {**asdict(ckpt.config), "conv_channels": list(ckpt.config.conv_channels)},
        "provenance": ckpt.provenance,
        "seed": ckpt.seed,
        "norm_stats": None if ckpt.norm_stats is None else asdict(ckpt.norm_stats),
        "params": [[name, list(arr.shape)] for name, arr in ckpt.params.items()],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<Q", len(blob)), blob]
    for arr in ckpt.params.values():
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + meta_len:
        raise CheckpointError("truncated checkpoint metadata")
    try:
        meta = json.loads(raw[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint metadata ({exc})") from None
    try:
        cfg_dict = dict(meta["config"])
        cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
        config = ModelConfig(**cfg_dict)
        provenance = meta["provenance"]
        if provenance not in PROVENANCES:
            raise CheckpointError(f"unknown provenance {provenance!r}")
        seed = int(meta["seed"])
        stats = None if meta["norm_stats"] is None else NormStats(**meta["norm_stats"])
        param_list = [(str(n), tuple(int(d) for d in s)) for n, s in meta["params"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint metadata ({exc})") from None

    expected = _param_shapes(config)
    params: dict[str, np.ndarray] = {}
    pos = 16 + meta_len
    for name, shape in param_list:
        if name not in expected:
            raise CheckpointError(f"unknown parameter {name!r} for this config")
        if shape != expected[name]:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, config expects {expected[name]}")
        nbytes = int(np.prod(shape)) * 4
        chunk = raw[pos:pos + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(f"truncated data for parameter {name!r}")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after parameter data")
    ckpt = Checkpoint(config=config, params=params, provenance=provenance,
                      seed=seed, norm_stats=stats, version=version)
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
