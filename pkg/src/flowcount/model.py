"""The flow regressor: conv encoder, attentive temporal fusion, conv decoder.

Two frames pass through a shared convolutional encoder; the two feature maps
are merged either by the attentive fusion block (keys from one frame,
queries and values from the other, plus a skip branch of the key frame's
features) applied symmetrically in both frame orders, or by plain channel
concatenation in the ablation mode.  A decoder turns the merged map into a
ten-channel flow field at feature resolution, through a non-negative output
activation and a hard mask that zeroes structurally illegal channels
(off-grid offsets, exterior away from the boundary).
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .flowgrid import (
    N_CHANNELS,
    FlowField,
    GridShape,
    Representation,
    validity_mask,
)

TEMPORAL_FUSION = "temporal_fusion"
PLAIN_CONCAT = "plain_concat"

CHECKPOINT_FORMAT = "flowcount-ckpt-v1"

_NONLINEARITIES = {
    "relu": nn.ReLU,
    "leaky_relu": nn.LeakyReLU,
    "elu": nn.ELU,
    "gelu": nn.GELU,
    "softplus": nn.Softplus,
    "tanh": nn.Tanh,
    "none": nn.Identity,
}


class IncompatibleCheckpointError(ValueError):
    """Checkpoint config does not match the model it is being loaded into."""


@dataclass(frozen=True)
class ConvStage:
    kernel: int = 3
    channels: int = 32
    nonlinearity: str = "relu"
    downsample: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"conv kernel must be odd and positive, got {self.kernel}")
        if self.channels < 1:
            raise ValueError("stage channels must be positive")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


def _default_encoder(feature_channels: int, stride: int, nonlinearity: str):
    n_down = int(round(math.log2(stride))) if stride > 1 else 0
    if 2 ** n_down != stride:
        raise ValueError(f"stride must be a power of two, got {stride}")
    if n_down == 0:
        return (ConvStage(3, feature_channels, nonlinearity, False),)
    widths = [min(32 * 2 ** i, feature_channels) for i in range(n_down - 1)]
    widths.append(feature_channels)
    return tuple(ConvStage(3, w, nonlinearity, True) for w in widths)


def _default_decoder(nonlinearity: str):
    return (
        ConvStage(3, 64, nonlinearity, False),
        ConvStage(3, 32, nonlinearity, False),
        ConvStage(1, N_CHANNELS, "none", False),
    )


@dataclass(frozen=True)
class ModelConfig:
    in_height: int = 360
    in_width: int = 640
    stride: int = 8
    feature_channels: int = 64
    key_channels: int = 32
    value_channels: int = 32
    encoder_spec: tuple = None
    decoder_spec: tuple = None
    fusion_mode: str = TEMPORAL_FUSION
    output_activation: str = "softplus"
    nonlinearity: str = "relu"
    pool: str = "max"
    seed: int = 0

    def __post_init__(self):
        if self.in_height % self.stride or self.in_width % self.stride:
            raise ValueError(
                f"input {self.in_width}x{self.in_height} not divisible by stride {self.stride}")
        if not 0 < self.value_channels < self.feature_channels:
            raise ValueError("value_channels must lie strictly between 0 and feature_channels")
        if self.key_channels < 1:
            raise ValueError("key_channels must be positive")
        if self.fusion_mode not in (TEMPORAL_FUSION, PLAIN_CONCAT):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.output_activation not in ("softplus", "relu"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.pool not in ("max", "avg"):
            raise ValueError(f"unknown pool kind {self.pool!r}")
        enc = self.encoder_spec or _default_encoder(self.feature_channels, self.stride,
                                                    self.nonlinearity)
        dec = self.decoder_spec or _default_decoder(self.nonlinearity)
        enc = tuple(s if isinstance(s, ConvStage) else ConvStage(**s) for s in enc)
        dec = tuple(s if isinstance(s, ConvStage) else ConvStage(**s) for s in dec)
        object.__setattr__(self, "encoder_spec", enc)
        object.__setattr__(self, "decoder_spec", dec)
        n_down = sum(1 for s in enc if s.downsample)
        if 2 ** n_down != self.stride:
            raise ValueError(
                f"encoder downsamples {n_down} times but stride is {self.stride}")
        if enc[-1].channels != self.feature_channels:
            raise ValueError("encoder must end with feature_channels channels")
        if dec[-1].channels != N_CHANNELS:
            raise ValueError(f"decoder must end with {N_CHANNELS} channels")

    @property
    def grid_height(self) -> int:
        return self.in_height // self.stride

    @property
    def grid_width(self) -> int:
        return self.in_width // self.stride

    @property
    def grid_shape(self) -> GridShape:
        return GridShape(width=self.grid_width, height=self.grid_height)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        for key in ("encoder_spec", "decoder_spec"):
            if doc.get(key):
                doc[key] = tuple(ConvStage(**s) if isinstance(s, dict) else ConvStage(*s)
                                 for s in doc[key])
        return cls(**doc)


def _conv_stack(stages, in_channels, pool):
    layers = []
    c = in_channels
    for s in stages:
        layers.append(nn.Conv2d(c, s.channels, s.kernel, padding=s.kernel // 2))
        if s.nonlinearity != "none":
            layers.append(_NONLINEARITIES[s.nonlinearity]())
        if s.downsample:
            layers.append(nn.MaxPool2d(2) if pool == "max" else nn.AvgPool2d(2))
        c = s.channels
    return nn.Sequential(*layers)


class FlowRegressor(nn.Module):
    """Maps an ordered pair of frames to the INCOMING flow of their interval."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.feature_channels
        self.encoder = _conv_stack(config.encoder_spec, 3, config.pool)
        # fusion projections; 3x3 with padding 1 keeps the spatial resolution
        self.query_proj = nn.Conv2d(c, config.key_channels, 3, padding=1)
        self.key_proj = nn.Conv2d(c, config.key_channels, 3, padding=1)
        self.value_proj = nn.Conv2d(c, config.value_channels, 3, padding=1)
        self.skip_proj = nn.Conv2d(c, c - config.value_channels, 3, padding=1)
        self.decoder = _conv_stack(config.decoder_spec, 2 * c, config.pool)
        mask = validity_mask(config.grid_shape).transpose(2, 0, 1)  # (10, h, w)
        self.register_buffer("channel_mask", torch.from_numpy(mask.astype(np.float32)))
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        """Fan-in-scaled uniform weights, zero biases, reproducible per seed."""
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if p.dim() >= 2:
                    fan_in = p.shape[1:].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    p.uniform_(-bound, bound, generator=gen)
                else:
                    p.zero_()

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- batched internals (B, C, H, W) ------------------------------------

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] != self.config.in_height or images.shape[3] != self.config.in_width:
            raise ValueError(
                f"image size {images.shape[3]}x{images.shape[2]} does not match config "
                f"{self.config.in_width}x{self.config.in_height}")
        return self.encoder(images)

    def _attention(self, feat_input: torch.Tensor, feat_target: torch.Tensor) -> torch.Tensor:
        b, _, h, w = feat_input.shape
        n = h * w
        q = self.query_proj(feat_target).reshape(b, self.config.key_channels, n).transpose(1, 2)
        k = self.key_proj(feat_input).reshape(b, self.config.key_channels, n).transpose(1, 2)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.config.key_channels)
        return torch.softmax(logits, dim=-1)  # rows: target positions

    def fuse_batch(self, feat_input: torch.Tensor, feat_target: torch.Tensor) -> torch.Tensor:
        b, c, h, w = feat_input.shape
        if c != self.config.feature_channels or feat_target.shape != feat_input.shape:
            raise ValueError("fusion inputs must both be (B, feature_channels, h, w)")
        attn = self._attention(feat_input, feat_target)
        v = self.value_proj(feat_target).reshape(b, self.config.value_channels, h * w)
        attended = (attn @ v.transpose(1, 2)).transpose(1, 2).reshape(
            b, self.config.value_channels, h, w)
        skip = self.skip_proj(feat_input)
        return torch.cat([skip, attended], dim=1)

    def _merge(self, feat_prev: torch.Tensor, feat_curr: torch.Tensor) -> torch.Tensor:
        if self.config.fusion_mode == PLAIN_CONCAT:
            return torch.cat([feat_prev, feat_curr], dim=1)
        fused_curr = self.fuse_batch(feat_prev, feat_curr)
        fused_prev = self.fuse_batch(feat_curr, feat_prev)
        return torch.cat([fused_prev, fused_curr], dim=1)

    def decode_batch(self, merged: torch.Tensor) -> torch.Tensor:
        """Decoder plus output activation and channel mask; (B, h, w, 10) out."""
        if merged.shape[1] != 2 * self.config.feature_channels:
            raise ValueError(
                f"decoder expects {2 * self.config.feature_channels} channels, "
                f"got {merged.shape[1]}")
        raw = self.decoder(merged)
        if self.config.output_activation == "softplus":
            out = F.softplus(raw)
        else:
            out = F.relu(raw)
        out = out * self.channel_mask
        out = out.permute(0, 2, 3, 1)
        if not torch.isfinite(out).all():
            raise FloatingPointError("flow regressor produced non-finite values")
        return out

    def forward(self, frames_prev: torch.Tensor, frames_curr: torch.Tensor) -> torch.Tensor:
        """Batched flow prediction for the interval (prev -> curr), (B, h, w, 10)."""
        feat_prev = self.encode_batch(frames_prev)
        feat_curr = self.encode_batch(frames_curr)
        return self.decode_batch(self._merge(feat_prev, feat_curr))

    def triplet_flows(self, prev, curr, nxt):
        """The four directed predictions a triplet needs, sharing encoder passes.

        Returns (f_fwd1, f_fwd2, f_bwd1, f_bwd2) for the intervals
        (t-1, t), (t, t+1), (t, t-1), (t+1, t); identical to four separate
        forward calls, but each frame is encoded once.
        """
        w_p = self.encode_batch(prev)
        w_c = self.encode_batch(curr)
        w_n = self.encode_batch(nxt)
        if self.config.fusion_mode == PLAIN_CONCAT:
            merged = [torch.cat(pair, dim=1) for pair in
                      ((w_p, w_c), (w_c, w_n), (w_c, w_p), (w_n, w_c))]
        else:
            o_c_from_p = self.fuse_batch(w_p, w_c)   # target t,   keys t-1
            o_p_from_c = self.fuse_batch(w_c, w_p)   # target t-1, keys t
            o_n_from_c = self.fuse_batch(w_c, w_n)   # target t+1, keys t
            o_c_from_n = self.fuse_batch(w_n, w_c)   # target t,   keys t+1
            merged = [
                torch.cat([o_p_from_c, o_c_from_p], dim=1),
                torch.cat([o_c_from_n, o_n_from_c], dim=1),
                torch.cat([o_c_from_p, o_p_from_c], dim=1),
                torch.cat([o_n_from_c, o_c_from_n], dim=1),
            ]
        return tuple(self.decode_batch(m) for m in merged)

    # -- single-sample API on channels-last arrays --------------------------

    def _single_image_to_batch(self, image) -> torch.Tensor:
        arr = torch.as_tensor(np.asarray(image), dtype=self._dtype())
        if arr.dim() != 3 or arr.shape[-1] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {tuple(arr.shape)}")
        return arr.permute(2, 0, 1).unsqueeze(0)

    def _dtype(self):
        return next(self.parameters()).dtype

    def encode(self, image) -> torch.Tensor:
        """Feature map (h, w, feature_channels) of one (H, W, 3) image."""
        with torch.no_grad():
            feat = self.encode_batch(self._single_image_to_batch(image))
        return feat[0].permute(1, 2, 0)

    def st_fuse(self, feat_input, feat_target) -> torch.Tensor:
        """Fusion of two (h, w, feature_channels) maps; keys/skip come from
        ``feat_input``, queries and values from ``feat_target``."""
        fi = torch.as_tensor(np.asarray(feat_input), dtype=self._dtype())
        ft = torch.as_tensor(np.asarray(feat_target), dtype=self._dtype())
        with torch.no_grad():
            out = self.fuse_batch(fi.permute(2, 0, 1).unsqueeze(0),
                                  ft.permute(2, 0, 1).unsqueeze(0))
        return out[0].permute(1, 2, 0)

    def attention_weights(self, feat_input, feat_target) -> torch.Tensor:
        """Row-stochastic (N, N) attention matrix between two feature maps."""
        fi = torch.as_tensor(np.asarray(feat_input), dtype=self._dtype())
        ft = torch.as_tensor(np.asarray(feat_target), dtype=self._dtype())
        with torch.no_grad():
            attn = self._attention(fi.permute(2, 0, 1).unsqueeze(0),
                                   ft.permute(2, 0, 1).unsqueeze(0))
        return attn[0]

    def decode(self, merged) -> torch.Tensor:
        """Flow (h, w, 10) from a merged (h, w, 2 * feature_channels) map."""
        m = torch.as_tensor(np.asarray(merged), dtype=self._dtype())
        with torch.no_grad():
            out = self.decode_batch(m.permute(2, 0, 1).unsqueeze(0))
        return out[0]

    def regress_flow(self, frame_prev, frame_curr) -> FlowField:
        """Predicted INCOMING flow field for one frame pair."""
        with torch.no_grad():
            out = self.forward(self._single_image_to_batch(frame_prev),
                               self._single_image_to_batch(frame_curr))
        values = out[0].cpu().numpy()
        return FlowField(self.config.grid_shape, values, Representation.INCOMING)


# ---------------------------------------------------------------------------
# Checkpoints: zip archive with a JSON manifest and raw f32le tensor buffers.
# ---------------------------------------------------------------------------

def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def _read_tensor(zf: zipfile.ZipFile, name: str, shape) -> torch.Tensor:
    raw = np.frombuffer(zf.read(name), dtype="<f4").reshape(shape)
    return torch.from_numpy(raw.copy())


def save_checkpoint(path, regressor: FlowRegressor, step: int = 0,
                    optimizer=None, rng_record=None, meta=None) -> None:
    """Write model (and optionally optimizer) state as a versioned archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = list(regressor.named_parameters())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": regressor.config.to_dict(),
        "step": int(step),
        "rng": rng_record,
        "meta": meta or {},
        "parameters": [
            {"name": name, "shape": list(p.shape), "dtype": "f32le"} for name, p in params
        ],
        "optimizer": None,
    }
    opt_tensors = []
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        opt_manifest = []
        for idx, (name, p) in enumerate(params):
            entry = state.get(idx)
            if entry is None:
                opt_manifest.append(None)
                continue
            slots = {}
            for slot in ("exp_avg", "exp_avg_sq"):
                arc = f"optim/{idx}.{slot}"
                opt_tensors.append((arc, entry[slot]))
                slots[slot] = {"shape": list(entry[slot].shape)}
            step_val = entry["step"]
            slots["step"] = float(step_val.item() if torch.is_tensor(step_val) else step_val)
            opt_manifest.append(slots)
        manifest["optimizer"] = {"type": "adam", "state": opt_manifest}

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        for name, p in params:
            zf.writestr(f"params/{name}", _tensor_bytes(p))
        for arc, t in opt_tensors:
            zf.writestr(arc, _tensor_bytes(t))


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpointError(
            f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path):
    """Rebuild a regressor from an archive; returns (regressor, manifest).

    The manifest keeps step counter, rng record, metadata, and, when present,
    the serialized optimizer moments under ``manifest['optimizer']`` with the
    tensors already inflated into ``manifest['optimizer']['state']``.
    """
    manifest = read_manifest(path)
    config = ModelConfig.from_dict(manifest["config"])
    regressor = FlowRegressor(config)
    with zipfile.ZipFile(path) as zf:
        new_state = {}
        for spec in manifest["parameters"]:
            new_state[spec["name"]] = _read_tensor(zf, f"params/{spec['name']}", spec["shape"])
        missing = [n for n, _ in regressor.named_parameters() if n not in new_state]
        if missing:
            raise IncompatibleCheckpointError(f"checkpoint lacks parameters: {missing}")
        regressor.load_state_dict(new_state, strict=False)
        opt = manifest.get("optimizer")
        if opt is not None:
            for idx, slots in enumerate(opt["state"]):
                if slots is None:
                    continue
                for slot in ("exp_avg", "exp_avg_sq"):
                    slots[slot] = _read_tensor(zf, f"optim/{idx}.{slot}", slots[slot]["shape"])
    return regressor, manifest


def check_config_compatible(config: ModelConfig, manifest: dict) -> None:
    """Raise with the offending field names when configs differ."""
    stored = ModelConfig.from_dict(manifest["config"]).to_dict()
    current = config.to_dict()
    bad = [k for k in current if stored.get(k) != current[k]]
    if bad:
        raise IncompatibleCheckpointError(
            "checkpoint config mismatch in field(s): " + ", ".join(sorted(bad)))
