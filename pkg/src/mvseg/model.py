"""Triplet-encoder U-Net (tU-Net).

One encoder parameter set is shared by the axial, sagittal and coronal
inputs.  Latent maps of the supplied views are averaged and passed through
a bottleneck block; the decoder mirrors the encoder and receives skip
connections from the axial encoding only, so the same weights serve 1, 2
or 3 input views.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import Tensor, batch_norm, concat, conv2d, dropout, global_avg_pool, group_norm, maxpool2, relu, sigmoid, upconv2
from .core.tensor import as_tensor
from .errors import CheckpointError, ConfigError, ContractError, ShapeError

AXIAL, SAGITTAL, CORONAL = "axial", "sagittal", "coronal"
ROLES = (AXIAL, SAGITTAL, CORONAL)
CONVS_PER_BLOCK = (2, 2, 3, 3, 3)
DROPOUT_BLOCKS = (4, 5)
NORMS = ("batch", "group", "none")
# The first conv sees raw intensities and stays unnormalised.
UNNORMALIZED = ("enc.b1.c1",)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 8
    multipliers: tuple = (1, 2, 4, 8, 16)
    dropout: float = 0.5
    input_hw: int = 64
    # "conv": after every conv of the dropout blocks; "block": once per block output
    dropout_placement: str = "conv"
    # normalisation between each body conv and its ReLU
    norm: str = "batch"
    norm_groups: int = 8

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if len(self.multipliers) != 5:
            raise ConfigError(f"need five channel multipliers, got {self.multipliers}")
        if self.input_hw < 64 or self.input_hw % 64:
            raise ConfigError(f"input_hw must be a positive multiple of 64, got {self.input_hw}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dropout_placement not in ("conv", "block"):
            raise ConfigError(f"dropout_placement must be 'conv' or 'block', got {self.dropout_placement!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.norm_groups < 1:
            raise ConfigError(f"norm_groups must be >= 1, got {self.norm_groups}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.multipliers)

    @property
    def latent_channels(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        if "multipliers" in d:
            d["multipliers"] = tuple(d["multipliers"])
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in creation order."""
    shapes: dict[str, tuple[int, ...]] = {}
    ch = cfg.channels

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)
        if _normalized(cfg, name, k):
            shapes[f"{name}.scale"] = (cout,)
            shapes[f"{name}.shift"] = (cout,)

    def up(name, cin, cout):
        shapes[f"{name}.w"] = (cin, cout, 2, 2)
        shapes[f"{name}.b"] = (cout,)

    cin = cfg.in_channels
    for b, (c, n) in enumerate(zip(ch, CONVS_PER_BLOCK), start=1):
        for j in range(1, n + 1):
            conv(f"enc.b{b}.c{j}", cin, c)
            cin = c
    lat = cfg.latent_channels
    for j in range(1, 4):
        conv(f"bott.c{j}", lat, lat)
    up("dec.up0", lat, lat)
    cin = lat
    for b in range(5, 0, -1):
        c = ch[b - 1]
        up(f"dec.b{b}.up", cin, c)
        for j in range(1, CONVS_PER_BLOCK[b - 1] + 1):
            conv(f"dec.b{b}.c{j}", 2 * c if j == 1 else c, c)
        cin = c
    conv("dec.out", ch[0], 1, k=1)
    return shapes


def _normalized(cfg: ModelConfig, name: str, k: int = 3) -> bool:
    return cfg.norm != "none" and k == 3 and name not in UNNORMALIZED


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Running batch statistics (not trained by the optimizer)."""
    if cfg.norm != "batch":
        return {}
    return {
        f"{n[:-len('.scale')]}.{stat}": shape
        for n, shape in parameter_shapes(cfg).items()
        if n.endswith(".scale")
        for stat in ("mean", "var")
    }


def init_buffers(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {n: (np.ones if n.endswith(".var") else np.zeros)(shape, dtype=np.float32) for n, shape in buffer_shapes(cfg).items()}


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """He-style fan-in normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith((".b", ".shift")):
            data = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".scale"):
            data = np.ones(shape, dtype=np.float32)
        else:
            if name.startswith("dec.") and (".up" in name):
                fan_in = shape[0]
            else:
                fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name == "dec.out.w" else 2.0
            data = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class TUNet:
    """Shared-encoder multi-view U-Net.

    Parameters live in ``self.params`` (name -> Tensor) and running batch
    statistics in ``self.buffers`` (name -> array).  There is exactly one
    encoder parameter set (``enc.*``), used for every view.
    """

    def __init__(
        self,
        config: ModelConfig | None = None,
        seed: int = 0,
        params: Mapping[str, Tensor] | None = None,
        buffers: Mapping[str, np.ndarray] | None = None,
    ):
        self.config = config or ModelConfig()
        self.params = dict(params) if params is not None else init_params(self.config, seed)
        self.buffers = {n: np.array(a, dtype=np.float32) for n, a in buffers.items()} if buffers is not None else init_buffers(self.config)

    # -- bookkeeping -------------------------------------------------------
    def parameter_count(self, prefix: str = "") -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith(prefix))

    def encoder_parameter_sets(self) -> list[str]:
        """Distinct encoder prefixes; always ``['enc']``."""
        return sorted({n.split(".")[0] for n in self.params if n.startswith("enc")})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, as independent copies."""
        state = {n: p.data.copy() for n, p in self.params.items()}
        state.update((n, b.copy()) for n, b in self.buffers.items())
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = {**parameter_shapes(self.config), **buffer_shapes(self.config)}
        if set(state) != set(expected):
            raise CheckpointError(f"parameter names differ: missing {sorted(set(expected) - set(state))}, unexpected {sorted(set(state) - set(expected))}")
        for n, arr in state.items():
            if tuple(arr.shape) != expected[n]:
                raise CheckpointError(f"parameter {n!r} has shape {tuple(arr.shape)}, expected {expected[n]}")
            if n in self.params:
                self.params[n].data = np.array(arr, dtype=np.float32)
            else:
                self.buffers[n] = np.array(arr, dtype=np.float32)

    # -- building blocks ----------------------------------------------------
    def _conv(self, x: Tensor, name: str, training: bool = False, update_stats: bool = True) -> Tensor:
        p = self.params
        x = conv2d(x, p[f"{name}.w"], p[f"{name}.b"])
        if _normalized(self.config, name):
            scale, shift = p[f"{name}.scale"], p[f"{name}.shift"]
            if self.config.norm == "batch":
                buf = self.buffers
                x = batch_norm(x, scale, shift, buf[f"{name}.mean"], buf[f"{name}.var"], training, update_stats=update_stats)
            else:
                x = group_norm(x, math.gcd(x.shape[1], self.config.norm_groups), scale, shift)
        return relu(x)

    def _as_input(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        hw = self.config.input_hw
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2:] != (hw, hw):
            raise ShapeError(f"expected input (B, {self.config.in_channels}, {hw}, {hw}), got {x.shape}")
        return x

    def encode(self, x, role: str = AXIAL, training: bool = False, rng: np.random.Generator | None = None):
        """Shared encoder.

        Returns the five pre-pool block activations (skip candidates), the
        pooled latent map (H/32 x W/32) and its global-average embedding.
        Dropout is active only for the axial role in training mode, and only
        the axial pass updates the running batch statistics: inference
        normalises every role with axial statistics, which keeps eval-mode
        encoding role-invariant.
        """
        if role not in ROLES:
            raise ContractError(f"unknown view role {role!r}")
        x = self._as_input(x)
        use_dropout = training and role == AXIAL and self.config.dropout > 0
        skips = []
        per_conv = self.config.dropout_placement == "conv"
        for b, n in enumerate(CONVS_PER_BLOCK, start=1):
            drop_here = use_dropout and b in DROPOUT_BLOCKS
            for j in range(1, n + 1):
                x = self._conv(x, f"enc.b{b}.c{j}", training, update_stats=role == AXIAL)
                if drop_here and (per_conv or j == n):
                    x = dropout(x, self.config.dropout, True, rng)
            skips.append(x)
            x = maxpool2(x)
        return skips, x, global_avg_pool(x)

    def fuse(self, latents, training: bool = False) -> Tensor:
        """Mean of the 1-3 latent maps (axial first), then the bottleneck:
        conv, 2x2 pool, conv, conv."""
        latents = list(latents)
        if not latents or latents[0] is None:
            raise ContractError("fuse needs the axial latent map first")
        if len(latents) > 3:
            raise ContractError(f"at most three latent maps, got {len(latents)}")
        shape = latents[0].shape
        for lat in latents[1:]:
            if lat.shape != shape:
                raise ShapeError(f"latent shapes differ: {shape} vs {lat.shape}")
        x = latents[0]
        if len(latents) > 1:
            for lat in latents[1:]:
                x = x + lat
            x = x * (1.0 / len(latents))
        x = self._conv(x, "bott.c1", training)
        x = maxpool2(x)
        x = self._conv(x, "bott.c2", training)
        return self._conv(x, "bott.c3", training)

    def decode(self, fused: Tensor, skips, training: bool = False) -> Tensor:
        """Undo the bottleneck pool, then five up-blocks joined to the axial
        skips; 1x1 conv + sigmoid gives a (B, 1, H, W) probability map."""
        if len(skips) != 5:
            raise ShapeError(f"decoder needs five skip maps, got {len(skips)}")
        p = self.params
        x = upconv2(fused, p["dec.up0.w"], p["dec.up0.b"])
        for b in range(5, 0, -1):
            x = upconv2(x, p[f"dec.b{b}.up.w"], p[f"dec.b{b}.up.b"])
            skip = skips[b - 1]
            if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
                raise ShapeError(f"skip {b} has shape {skip.shape}, decoder is at {x.shape}")
            x = concat([x, skip], axis=1)
            for j in range(1, CONVS_PER_BLOCK[b - 1] + 1):
                x = self._conv(x, f"dec.b{b}.c{j}", training)
        return sigmoid(conv2d(x, p["dec.out.w"], p["dec.out.b"]))

    def forward(self, views: Mapping[str, object], training: bool = False, rng: np.random.Generator | None = None):
        """Run 1-3 views through the shared encoder, fuse, decode.

        ``views`` maps role -> (B, H, W) or (B, 1, H, W) images; the axial
        view is mandatory.  Returns ``(probabilities, embeddings)`` where
        ``embeddings`` maps each supplied role to its (B, C_lat) embedding.
        """
        supplied = {k: v for k, v in views.items() if v is not None}
        unknown = set(supplied) - set(ROLES)
        if unknown:
            raise ContractError(f"unknown view roles {sorted(unknown)}")
        if AXIAL not in supplied:
            raise ContractError("the axial view is required")
        skips, latents, embeddings = None, [], {}
        for role in ROLES:
            if role not in supplied:
                continue
            s, lat, emb = self.encode(supplied[role], role, training, rng)
            if role == AXIAL:
                skips = s
            latents.append(lat)
            embeddings[role] = emb
        batch = {lat.shape[0] for lat in latents}
        if len(batch) != 1:
            raise ShapeError(f"views disagree on batch size: {sorted(batch)}")
        return self.decode(self.fuse(latents, training), skips, training), embeddings

    __call__ = forward


# -- checkpoint format -----------------------------------------------------
# "TUN1", u32 count; per tensor: u16 name length, UTF-8 name, u8 rank,
# u32 extents, float32 payload; trailing u32 CRC32 over all payloads.

CKPT_MAGIC = b"TUN1"


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    crc = 0
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        payload = arr.tobytes()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(payload)
        crc = zlib.crc32(payload, crc)
    parts.append(struct.pack("<I", crc))
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path.name}: not a checkpoint (bad magic or too short)")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        out, crc = {}, 0
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(raw) - 4:
                raise CheckpointError(f"{path.name}: tensor {name!r} truncated")
            payload = raw[pos:pos + nbytes]
            pos += nbytes
            crc = zlib.crc32(payload, crc)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        (stored,) = struct.unpack_from("<I", raw, pos)
        pos += 4
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path.name}: malformed checkpoint ({exc})") from None
    if pos != len(raw):
        raise CheckpointError(f"{path.name}: {len(raw) - pos} trailing bytes")
    if stored != crc:
        raise CheckpointError(f"{path.name}: checksum mismatch")
    return out


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, model: TUNet, provenance: Mapping | None = None) -> Path:
    path = Path(path)
    write_tensors(path, model.state_dict())
    meta = {"config": model.config.to_dict(), "provenance": dict(provenance or {})}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, config: ModelConfig | None = None) -> TUNet:
    """Load a checkpoint; the config comes from the sidecar unless given."""
    path = Path(path)
    if config is None:
        side = sidecar_path(path)
        if not side.is_file():
            raise CheckpointError(f"{side.name}: missing sidecar with the model config")
        try:
            config = ModelConfig.from_dict(json.loads(side.read_text())["config"])
        except (KeyError, json.JSONDecodeError, ConfigError, TypeError) as exc:
            raise CheckpointError(f"{side.name}: invalid model config ({exc})") from None
    tensors = read_tensors(path)
    model = TUNet(config, seed=0)
    model.load_state_dict(tensors)
    return model


def load_provenance(path) -> dict:
    side = sidecar_path(path)
    return json.loads(side.read_text()).get("provenance", {}) if side.is_file() else {}
