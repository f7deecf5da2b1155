"""Fixed-step ODE integration of a learned velocity field."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Callable

import torch

from .backbone import wrap_objective_head
from .errors import DivergenceError, InvalidInputError
from .objectives import BackboneFn, ObjectiveKind, PrecondConfig
from .path import PathConfig, sample_prior
from .spectral import ComplexSpectrogram, SpectralConfig, Waveform, istft, stft

VelocityFieldFn = Callable[[torch.Tensor, torch.Tensor, float], torch.Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 5
    t_start: float = 0.0
    t_end: float = 1.0
    scheme: str = "euler"

    def __post_init__(self):
        if self.n_steps < 1:
            raise InvalidInputError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0 <= self.t_start < self.t_end <= 1:
            raise InvalidInputError(f"need 0 <= t_start < t_end <= 1, got {self.t_start}, {self.t_end}")
        if self.scheme not in ("euler", "midpoint"):
            raise InvalidInputError(f"unknown scheme {self.scheme!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def time_grid(config: SamplerConfig) -> list[float]:
    h = (config.t_end - config.t_start) / config.n_steps
    return [config.t_start + i * h for i in range(config.n_steps + 1)]


@torch.no_grad()
def integrate(velocity: VelocityFieldFn, x0: torch.Tensor, y: torch.Tensor,
              config: SamplerConfig = SamplerConfig()) -> torch.Tensor:
    """Integrate ``dx/dt = velocity(x, y, t)`` from ``t_start`` to ``t_end``.

    The field is only evaluated at left endpoints (Euler) or interval
    midpoints (midpoint rule), never at ``t_end``.
    """
    if not torch.isfinite(x0).all():
        raise InvalidInputError("initial state contains non-finite entries")
    h = (config.t_end - config.t_start) / config.n_steps
    x = x0
    for i in range(config.n_steps):
        t = config.t_start + i * h
        if config.scheme == "euler":
            x = x + h * velocity(x, y, t)
        else:
            x_mid = x + 0.5 * h * velocity(x, y, t)
            x = x + h * velocity(x_mid, y, t + 0.5 * h)
        if not torch.isfinite(x).all():
            raise DivergenceError(f"non-finite state after integration step {i}", step=i)
    return x


@torch.no_grad()
def enhance(net: BackboneFn, kind, y_spec: ComplexSpectrogram, path: PathConfig = PathConfig(),
            precond: PrecondConfig = PrecondConfig(), sampler: SamplerConfig = SamplerConfig(),
            generator: torch.Generator | None = None) -> ComplexSpectrogram:
    """Run the reverse flow from the noisy prior to a clean estimate."""
    head = wrap_objective_head(net, ObjectiveKind(kind), precond)
    y = y_spec.data
    squeeze = y.ndim == 2
    if squeeze:
        y = y[None]
    x0 = sample_prior(y, path, generator)
    x1 = integrate(head.velocity, x0, y, sampler)
    return ComplexSpectrogram(x1[0] if squeeze else x1, y_spec.config, y_spec.original_length)


def utterance_seed(utterance_id: str, base_seed: int = 0) -> int:
    """Stable per-utterance seed so enhancement noise does not depend on order."""
    return (zlib.crc32(utterance_id.encode()) + 1000003 * base_seed) % (2 ** 63)


class Enhancer:
    """Waveform-to-waveform enhancement with a trained backbone.

    Call as ``enhancer(waveform, seed=...)``; the seed fixes the prior draw.
    """

    def __init__(self, net: BackboneFn, kind, spectral: SpectralConfig = SpectralConfig(),
                 path: PathConfig = PathConfig(), precond: PrecondConfig = PrecondConfig(),
                 sampler: SamplerConfig = SamplerConfig(), dtype=torch.float32):
        self.net = net
        self.kind = ObjectiveKind(kind)
        self.spectral = spectral
        self.path = path
        self.precond = precond
        self.sampler = sampler
        self.dtype = dtype

    def __call__(self, noisy: Waveform, seed: int = 0) -> Waveform:
        spec = stft(Waveform(noisy.samples.to(self.dtype), noisy.sample_rate), self.spectral)
        gen = torch.Generator().manual_seed(seed)
        out = enhance(self.net, self.kind, spec, self.path, self.precond, self.sampler, gen)
        return istft(out)
