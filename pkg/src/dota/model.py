"""Causal sequence-to-sequence dose model.

A 3-D stopping-power block is treated as a sequence of beam's-eye-view
slices. A weight-shared convolutional encoder turns each slice into a
token, a learned projection of the beam energy is prepended as token 0,
a causal transformer routes information forward along the beam, and a
weight-shared convolutional decoder turns each geometry token back into
a dose slice.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .grids import DataError, DoseGrid, GeometryGrid
from .tensor import ConfigurationError, Tensor

_f32 = np.float32

CHECKPOINT_MAGIC = b"DOTA"
CHECKPOINT_VERSION = 1


class EnergyRangeWarning(UserWarning):
    """Requested beam energy lies outside the configured training range."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``L`` slices of ``H``x``W`` voxels; ``N`` transformer blocks with
    ``N_h`` attention heads; ``K`` filters in the final encoder
    convolution. The token width is D = (H/4)(W/4)K after the two
    pooling stages.
    """

    L: int = 64
    H: int = 16
    W: int = 8
    N: int = 1
    K: int = 4
    N_h: int = 4
    mlp_ratio: int = 4
    dropout_rate: float = 0.1
    encoder_channels: tuple[int, int] = (8, 16)
    energy_range: tuple[float, float] = (80.0, 130.0)

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "energy_range", tuple(self.energy_range))
        for name in ("L", "H", "W", "N", "K", "N_h", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.H % 4 or self.W % 4:
            raise ConfigurationError("H and W must be divisible by 4 (two pooling stages)")
        if self.D % self.N_h:
            raise ConfigurationError(
                f"token width D={self.D} is not divisible by N_h={self.N_h}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must be in [0, 1)")
        if len(self.encoder_channels) != 2:
            raise ConfigurationError("encoder_channels must be a pair")
        for c in self.encoder_channels:
            if c < 1 or c % _groups_for(c):
                raise ConfigurationError(f"encoder channel count {c} breaks group norm")
        lo, hi = self.energy_range
        if not lo < hi:
            raise ConfigurationError("energy_range must be (low, high) with low < high")

    @property
    def D(self) -> int:
        return (self.H // 4) * (self.W // 4) * self.K

    @property
    def D_h(self) -> int:
        return self.D // self.N_h

    @classmethod
    def desk_scale(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-size preset: 256 slices of 48x16 voxels, D=480, 16 heads."""
        return cls(L=256, H=48, W=16, N=1, K=10, N_h=16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["energy_range"] = list(self.energy_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        d["energy_range"] = tuple(d["energy_range"])
        return cls(**d)

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


def _groups_for(channels: int) -> int:
    return min(channels, 4)


def causal_mask(length: int) -> np.ndarray:
    """Boolean (length, length) mask; position i may attend to j <= i."""
    return np.tril(np.ones((length, length), dtype=bool))


def _trunc_normal(rng, shape, std: float) -> np.ndarray:
    draw = rng.standard_normal(shape) * std
    return np.clip(draw, -2.0 * std, 2.0 * std).astype(_f32)


def _conv_init(rng, shape) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return _trunc_normal(rng, shape, np.sqrt(2.0 / fan_in))


def _convt_init(rng, shape) -> np.ndarray:
    # transposed convs consume their first axis as input channels
    fan_in = shape[0] * shape[2] * shape[3]
    return _trunc_normal(rng, shape, np.sqrt(2.0 / fan_in))


PROJECTION_STD = 0.02

# Conv biases that feed a GroupNorm get spread-out initial values: GN is
# exactly invariant to per-slice rescaling of its input when those biases
# are zero, which would hide absolute stopping-power levels (and decoded
# dose amplitudes) from the rest of the network until the biases drift.
GN_INPUT_BIAS_STD = 0.5
_GN_INPUT_BIASES = ("enc.conv1.b", "enc.conv2.b", "dec.convt1.b", "dec.convt2.b")


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Names and shapes of every learned tensor, in storage order."""
    c1, c2 = config.encoder_channels
    d, k, r = config.D, config.K, config.mlp_ratio
    shapes: dict[str, tuple] = {
        "enc.conv1.w": (c1, 1, 3, 3),
        "enc.conv1.b": (c1,),
        "enc.gn1.g": (c1,),
        "enc.gn1.b": (c1,),
        "enc.conv2.w": (c2, c1, 3, 3),
        "enc.conv2.b": (c2,),
        "enc.gn2.g": (c2,),
        "enc.gn2.b": (c2,),
        "enc.conv3.w": (k, c2, 3, 3),
        "enc.conv3.b": (k,),
        "energy.w": (d, 1),
        "pos": (config.L + 1, d),
    }
    for i in range(config.N):
        p = f"blk{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "qkv.w"] = (d, 3 * d)
        shapes[p + "proj.w"] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.fc1.w"] = (d, r * d)
        shapes[p + "mlp.fc1.b"] = (r * d,)
        shapes[p + "mlp.fc2.w"] = (r * d, d)
        shapes[p + "mlp.fc2.b"] = (d,)
    shapes.update(
        {
            "dec.convt1.w": (k, c2, 3, 3),
            "dec.convt1.b": (c2,),
            "dec.gn1.g": (c2,),
            "dec.gn1.b": (c2,),
            "dec.convt2.w": (c2, c1, 3, 3),
            "dec.convt2.b": (c1,),
            "dec.gn2.g": (c1,),
            "dec.gn2.b": (c1,),
            "dec.conv4.w": (c1, c1, 3, 3),
            "dec.conv4.b": (c1,),
            "dec.conv5.w": (1, c1, 3, 3),
            "dec.conv5.b": (1,),
        }
    )
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters.

    Convolutions are fan-in scaled; transformer projections use
    Glorot-style scaling so the attention and MLP branches contribute to
    the residual stream from the first step (std-0.02 projections under
    the norm-proportional LAMB updates leave those branches frozen for
    the whole desk-scale step budget). Norm gains start at one, biases
    at zero except the GN-feeding conv biases (see GN_INPUT_BIAS_STD).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape, _f32)
        elif name in _GN_INPUT_BIASES:
            arr = _trunc_normal(rng, shape, GN_INPUT_BIAS_STD)
        elif name.endswith(".b"):
            arr = np.zeros(shape, _f32)
        elif name.startswith("dec.convt"):
            arr = _convt_init(rng, shape)
        elif name.endswith("conv1.w") or name.endswith("conv2.w") or name.endswith(
            "conv3.w"
        ) or name.endswith("conv4.w") or name.endswith("conv5.w"):
            arr = _conv_init(rng, shape)
        elif name == "pos":
            arr = _trunc_normal(rng, shape, PROJECTION_STD)
        elif name.endswith(".w"):  # qkv, head/mlp/energy projections
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            arr = _trunc_normal(rng, shape, std)
        else:
            arr = _trunc_normal(rng, shape, PROJECTION_STD)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def param_count(config: ModelConfig) -> int:
    """Closed-form count of learned scalars for a configuration."""
    c1, c2 = config.encoder_channels
    d, k, r, s = config.D, config.K, config.mlp_ratio, config.L + 1
    encoder = (c1 * 9 + c1 + 2 * c1) + (c2 * c1 * 9 + c2 + 2 * c2) + (k * c2 * 9 + k)
    embeddings = d + s * d
    block = 2 * d + d * 3 * d + d * d + 2 * d + d * r * d + r * d + r * d * d + d
    decoder = (
        (k * c2 * 9 + c2 + 2 * c2)
        + (c2 * c1 * 9 + c1 + 2 * c1)
        + (c1 * c1 * 9 + c1)
        + (c1 * 9 + 1)
    )
    return encoder + embeddings + config.N * block + decoder


class DoseTransformer:
    """The trained mapping (geometry block, beam energy) -> dose block."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = parameter_shapes(config)
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ConfigurationError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigurationError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}"
                )
        self._mask = causal_mask(config.L + 1)

    # ------------------------------------------------------------------
    # stages

    def _as_batch(self, x) -> Tensor:
        if isinstance(x, Tensor):
            t = x
        else:
            t = Tensor(np.asarray(x, dtype=_f32))
        if t.ndim == 3:
            t = T.reshape(t, (1,) + t.shape)
        if t.ndim != 4 or t.shape[1:] != (self.config.L, self.config.H, self.config.W):
            raise T.DimensionError(
                f"geometry block must be (B, {self.config.L}, {self.config.H}, "
                f"{self.config.W}), got {t.shape}"
            )
        return t

    def encode_slices(self, x) -> Tensor:
        """Map each slice independently to a token; returns (B, L, D)."""
        cfg = self.config
        p = self.params
        xb = self._as_batch(x)
        b = xb.shape[0]
        h = T.reshape(xb, (b * cfg.L, 1, cfg.H, cfg.W))
        h = self._conv_block(h, "enc.conv1", "enc.gn1")
        h = self._conv_block(h, "enc.conv2", "enc.gn2")
        h = T.conv2d(h, p["enc.conv3.w"])
        h = T.add(h, T.reshape(p["enc.conv3.b"], (1, cfg.K, 1, 1)))
        return T.reshape(h, (b, cfg.L, cfg.D))

    def _conv_block(self, h: Tensor, conv: str, gn: str) -> Tensor:
        p = self.params
        c = p[conv + ".w"].shape[0]
        h = T.conv2d(h, p[conv + ".w"])
        h = T.add(h, T.reshape(p[conv + ".b"], (1, c, 1, 1)))
        h = T.group_norm(h, _groups_for(c), p[gn + ".g"], p[gn + ".b"])
        h = T.avg_pool2d(h)
        return T.relu(h)

    def embed_energy(self, energies) -> Tensor:
        """Project normalized beam energies to tokens; returns (B, 1, D)."""
        lo, hi = self.config.energy_range
        e = np.atleast_1d(np.asarray(energies, dtype=_f32))
        outside = (e < lo) | (e > hi)
        if outside.any():
            warnings.warn(
                f"energy {e[outside].tolist()} MeV outside trained range "
                f"[{lo}, {hi}]; extrapolating",
                EnergyRangeWarning,
                stacklevel=2,
            )
        norm = ((e - _f32(lo)) / _f32(hi - lo)).reshape(-1, 1, 1)
        w_row = T.transpose(self.params["energy.w"], (1, 0))  # (1, D)
        return T.matmul(Tensor(norm), w_row)

    def transformer_forward(self, z: Tensor, training: bool = False, rng=None,
                            attention_sink: list | None = None) -> Tensor:
        """Run the causal encoder blocks over the (B, L+1, D) sequence.

        The learnable positional embedding is added to every position,
        including the energy token, before the first block.
        """
        cfg = self.config
        p = self.params
        s = cfg.L + 1
        if z.shape[-2:] != (s, cfg.D):
            raise T.DimensionError(f"sequence must be (B, {s}, {cfg.D}), got {z.shape}")
        z = T.add(z, p["pos"])
        for i in range(cfg.N):
            pre = f"blk{i}."
            attended = self._attention(
                T.layer_norm(z, p[pre + "ln1.g"], p[pre + "ln1.b"]), pre, attention_sink
            )
            z = T.add(z, attended)
            hidden = self._mlp(
                T.layer_norm(z, p[pre + "ln2.g"], p[pre + "ln2.b"]), pre, training, rng
            )
            z = T.add(z, hidden)
        return z

    def _attention(self, zn: Tensor, prefix: str, sink: list | None) -> Tensor:
        cfg = self.config
        b, s, d = zn.shape
        nh, dh = cfg.N_h, cfg.D_h
        qkv = T.matmul(zn, self.params[prefix + "qkv.w"])          # (B, S, 3D)
        qkv = T.reshape(qkv, (b, s, 3, nh, dh))
        q = T.transpose(qkv[:, :, 0], (0, 2, 1, 3))                # (B, NH, S, DH)
        k = T.transpose(qkv[:, :, 1], (0, 2, 1, 3))
        v = T.transpose(qkv[:, :, 2], (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        weights = T.softmax(scores, mask=self._mask)
        if sink is not None:
            sink.append(weights.data.copy())
        mixed = T.matmul(weights, v)                               # (B, NH, S, DH)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, s, d))
        return T.matmul(merged, self.params[prefix + "proj.w"])

    def _mlp(self, zn: Tensor, prefix: str, training: bool, rng) -> Tensor:
        p = self.params
        rate = self.config.dropout_rate
        h = T.add(T.matmul(zn, p[prefix + "mlp.fc1.w"]), p[prefix + "mlp.fc1.b"])
        h = T.gelu(h)
        h = T.dropout(h, rate, training, rng)
        h = T.add(T.matmul(h, p[prefix + "mlp.fc2.w"]), p[prefix + "mlp.fc2.b"])
        return T.dropout(h, rate, training, rng)

    def decode_tokens(self, z: Tensor) -> Tensor:
        """Decode geometry tokens (energy output dropped) to (B, L, H, W)."""
        cfg = self.config
        p = self.params
        b = z.shape[0]
        c1, c2 = cfg.encoder_channels
        tokens = z[:, 1:, :]
        h = T.reshape(tokens, (b * cfg.L, cfg.K, cfg.H // 4, cfg.W // 4))
        h = T.conv2d_transposed(h, p["dec.convt1.w"])
        h = T.add(h, T.reshape(p["dec.convt1.b"], (1, c2, 1, 1)))
        h = T.group_norm(h, _groups_for(c2), p["dec.gn1.g"], p["dec.gn1.b"])
        h = T.relu(h)
        h = T.conv2d_transposed(h, p["dec.convt2.w"])
        h = T.add(h, T.reshape(p["dec.convt2.b"], (1, c1, 1, 1)))
        h = T.group_norm(h, _groups_for(c1), p["dec.gn2.g"], p["dec.gn2.b"])
        h = T.relu(h)
        h = T.conv2d(h, p["dec.conv4.w"])
        h = T.add(h, T.reshape(p["dec.conv4.b"], (1, c1, 1, 1)))
        h = T.relu(h)
        h = T.conv2d(h, p["dec.conv5.w"])
        h = T.add(h, T.reshape(p["dec.conv5.b"], (1, 1, 1, 1)))
        return T.reshape(h, (b, cfg.L, cfg.H, cfg.W))

    def forward(self, x, energies, training: bool = False, rng=None) -> Tensor:
        """Raw (unclamped) dose prediction for a batch; differentiable."""
        tokens = self.encode_slices(x)
        energy_token = self.embed_energy(energies)
        z = T.concat([energy_token, tokens], axis=1)
        z = self.transformer_forward(z, training=training, rng=rng)
        return self.decode_tokens(z)

    # ------------------------------------------------------------------
    # inference

    def predict_batch(self, x: np.ndarray, energies) -> np.ndarray:
        """Clamped dose blocks for a (B, L, H, W) geometry batch."""
        with T.no_grad():
            out = self.forward(x, energies, training=False)
        return np.maximum(out.data, _f32(0.0))

    def predict(self, geometry: GeometryGrid, energy: float) -> DoseGrid:
        """Dose for a single geometry block; negative outputs clamp to zero."""
        cfg = self.config
        if geometry.shape != (cfg.L, cfg.H, cfg.W):
            raise T.DimensionError(
                f"geometry shape {geometry.shape} does not match model "
                f"({cfg.L}, {cfg.H}, {cfg.W})"
            )
        values = self.predict_batch(geometry.values[None], [energy])[0]
        return DoseGrid(values, geometry.spacing, energy=float(energy))

    def param_count(self) -> int:
        return param_count(self.config)

    @classmethod
    def from_checkpoint(cls, path) -> "DoseTransformer":
        config, arrays = load_checkpoint(path)
        expected = parameter_shapes(config)
        params = {}
        for name, shape in expected.items():
            if name not in arrays:
                raise DataError(f"checkpoint {path} is missing tensor {name!r}")
            if arrays[name].shape != shape:
                raise DataError(
                    f"checkpoint tensor {name} has shape {arrays[name].shape}, "
                    f"expected {shape}"
                )
            params[name] = Tensor(arrays[name], requires_grad=True)
        return cls(config, params)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, config: ModelConfig, tensors: dict) -> Path:
    """Write named float32 tensors plus the configuration to ``path``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, value in tensors.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, _f32)
            arr = np.asarray(arr, dtype="<f4")  # tobytes() emits C order regardless
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Read a checkpoint; returns the configuration and all named tensors."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 6 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 6)
    offset = 10
    try:
        config = ModelConfig.from_dict(json.loads(raw[offset : offset + blob_len]))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed config block: {exc}") from exc
    offset += blob_len
    tensors: dict[str, np.ndarray] = {}
    while offset < len(raw):
        try:
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
        except (struct.error, ValueError) as exc:
            raise DataError(f"{path}: truncated tensor record: {exc}") from exc
        tensors[name] = arr.reshape(shape).copy()
    return config, tensors
