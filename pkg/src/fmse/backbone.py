"""Backbone contract, a small reference network, objective heads and checkpoints.

A backbone is any callable ``net(x_in, y_in, t) -> Tensor`` taking complex
spectrograms ``(B, F, T)`` and per-sample times ``(B,)`` and returning a
complex tensor shaped like ``x_in``.  Full-scale runs plug an NCSN++ module in
here; the reference network below is sized for desk-scale experiments.
"""

from __future__ import annotations

import importlib
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvalidInputError
from .objectives import BackboneFn, ObjectiveKind, PrecondConfig, precondition, v_from_x1, x1_from_v

CHECKPOINT_FORMAT = "fmse-checkpoint/1"


def parameter_count(net) -> int:
    if isinstance(net, nn.Module):
        return sum(p.numel() for p in net.parameters())
    return int(getattr(net, "parameter_count", 0))


class TimeEmbedding(nn.Module):
    """Sinusoidal features of a scalar time, ``dim`` even."""

    def __init__(self, dim: int = 64, max_period: float = 10000.0):
        super().__init__()
        if dim < 2 or dim % 2:
            raise ConfigError(f"time embedding dim must be even and >= 2, got {dim}")
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        # times live in [0, 1]; stretch them so low frequencies still vary
        args = 1000.0 * t.to(self.freqs.dtype)[:, None] * self.freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _Block(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, h, emb):
        out = F.silu(self.conv1(h)) + self.emb(emb)[:, :, None, None]
        out = self.conv2(F.silu(out))
        return out + self.skip(h)


class ReferenceNet(nn.Module):
    """Small convolutional encoder-decoder over stacked real/imag channels.

    Inputs ``(x, y)`` become 4 real channels; the output has 2 channels read
    back as one complex spectrogram.  Each resolution stage receives the time
    embedding additively.
    """

    def __init__(self, channels: int = 32, depth: int = 2, emb_dim: int = 64, input_skip: bool = False):
        super().__init__()
        if channels < 4 or depth < 1:
            raise ConfigError(f"need channels >= 4 and depth >= 1, got {channels}, {depth}")
        self.channels = channels
        self.depth = depth
        self.emb_dim = emb_dim
        self.input_skip = input_skip
        self.time_embed = TimeEmbedding(emb_dim)
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.stem = nn.Conv2d(4, channels, 3, padding=1)
        self.down = nn.ModuleList(_Block(channels, channels, emb_dim) for _ in range(depth))
        self.pool = nn.ModuleList(nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in range(depth))
        self.mid = _Block(channels, channels, emb_dim)
        self.up = nn.ModuleList(_Block(2 * channels, channels, emb_dim) for _ in range(depth))
        self.head = nn.Conv2d(channels, 2, 3, padding=1)
        # per-bin linear map of the inputs added to the output
        self.shortcut = nn.Conv2d(4, 2, 1) if input_skip else None

    @property
    def parameter_count(self) -> int:
        return parameter_count(self)

    def config(self) -> dict:
        return {"channels": self.channels, "depth": self.depth, "emb_dim": self.emb_dim,
                "input_skip": self.input_skip}

    def forward(self, x: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise InvalidInputError("x and y must share a shape")
        squeeze = x.ndim == 2
        if squeeze:
            x, y = x[None], y[None]
        dtype = self.stem.weight.dtype
        h = torch.stack([x.real, x.imag, y.real, y.imag], dim=1).to(dtype)
        t = torch.as_tensor(t, dtype=dtype, device=h.device)
        if t.ndim == 0:
            t = t.expand(h.shape[0])
        emb = self.time_mlp(self.time_embed(t).to(dtype))

        n_freq, n_time = h.shape[-2:]
        mult = 2 ** self.depth
        h = F.pad(h, (0, (-n_time) % mult, 0, (-n_freq) % mult))
        inputs = h
        h = self.stem(h)
        skips = []
        for block, pool in zip(self.down, self.pool):
            h = block(h, emb)
            skips.append(h)
            h = pool(h)
        h = self.mid(h, emb)
        for block in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        out = self.head(F.silu(h))
        if self.shortcut is not None:
            out = out + self.shortcut(inputs)
        out = out[..., :n_freq, :n_time]
        res = torch.complex(out[:, 0].contiguous(), out[:, 1].contiguous())
        if torch.is_complex(x) and res.dtype != x.dtype:
            res = res.to(x.dtype)
        return res[0] if squeeze else res


def reference_net(channels: int = 32, depth: int = 2, emb_dim: int = 64, input_skip: bool = False) -> ReferenceNet:
    return ReferenceNet(channels, depth, emb_dim, input_skip)


class LinearBackbone(nn.Module):
    """``a * x + b * y`` with two real parameters; used for gradient checks."""

    def __init__(self, a: float = 0.5, b: float = 0.25, dtype=torch.float64):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(a, dtype=dtype))
        self.b = nn.Parameter(torch.tensor(b, dtype=dtype))

    @property
    def parameter_count(self) -> int:
        return 2

    def forward(self, x, y, t):
        return self.a * x + self.b * y


class ChannelStackAdapter(nn.Module):
    """Wrap a real-valued ``net(h, t)`` mapping ``(B, 4, F, T)`` to ``(B, 2, F, T)``.

    The four input channels are ``x.real, x.imag, y.real, y.imag``; the two
    output channels are read back as one complex spectrogram.  This is the
    hook for an NCSN++ module or any other image-style backbone.
    """

    def __init__(self, net: nn.Module):
        super().__init__()
        self.net = net

    def forward(self, x, y, t):
        dtype = next(self.net.parameters()).dtype
        h = torch.stack([x.real, x.imag, y.real, y.imag], dim=1).to(dtype)
        out = self.net(h, torch.as_tensor(t, dtype=dtype, device=h.device))
        res = torch.complex(out[:, 0].contiguous(), out[:, 1].contiguous())
        return res.to(x.dtype) if torch.is_complex(x) else res


def import_object(target: str):
    """Resolve ``"package.module:attr"``."""
    module, sep, attr = target.partition(":")
    if not sep or not module or not attr:
        raise ConfigError(f"backbone target must look like 'package.module:attr', got {target!r}")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot import backbone {target!r}: {exc}") from exc


@dataclass
class ObjectiveHead:
    """Velocity-space and clean-space views of one trained backbone."""

    net: BackboneFn
    kind: ObjectiveKind
    precond: PrecondConfig

    def _t(self, t, x):
        t = torch.as_tensor(t, dtype=x.real.dtype, device=x.device)
        return t.expand(x.shape[0]) if t.ndim == 0 else t

    def x1(self, x_t, y, t) -> torch.Tensor:
        tv = self._t(t, x_t)
        if self.kind is ObjectiveKind.VELOCITY:
            return x1_from_v(self.net(x_t, y, tv), x_t, tv)
        if self.kind is ObjectiveKind.X1:
            return self.net(x_t, y, tv)
        return precondition(self.net, x_t, y, tv, self.precond)

    def velocity(self, x_t, y, t) -> torch.Tensor:
        tv = self._t(t, x_t)
        if self.kind is ObjectiveKind.VELOCITY:
            return self.net(x_t, y, tv)
        return v_from_x1(self.x1(x_t, y, tv), x_t, tv)


def wrap_objective_head(net: BackboneFn, kind, precond: PrecondConfig = PrecondConfig()) -> ObjectiveHead:
    return ObjectiveHead(net, ObjectiveKind(kind), precond)


def save_checkpoint(path, payload: dict):
    """Write ``payload`` (see :func:`fmse.trainer.TrainState.checkpoint_payload`) tagged with the format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format": CHECKPOINT_FORMAT, **payload}, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    fmt = payload.get("format") if isinstance(payload, dict) else None
    if fmt != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path}: unsupported checkpoint format {fmt!r}")
    return payload


def build_backbone(spec: dict) -> nn.Module:
    """Rebuild a backbone from the ``model`` entry stored in a checkpoint."""
    spec = dict(spec)
    name = spec.pop("name", "reference")
    target, kwargs = spec.pop("target", None), spec.pop("kwargs", None) or {}
    if name == "reference":
        return ReferenceNet(**spec)
    if name == "linear":
        return LinearBackbone(**spec)
    if name == "external":
        if not target:
            raise ConfigError("external backbone needs model.target = 'package.module:attr'")
        return ChannelStackAdapter(import_object(target)(**kwargs))
    raise ConfigError(f"unknown backbone {name!r}")
