"""Conditional optimal-transport path between noisy and clean spectrograms.

The path is Gaussian with mean ``t * x1 + (1 - t) * y`` and standard
deviation ``(1 - t) * sigma_max``: it starts at the noisy condition blurred by
``sigma_max`` and collapses onto the clean target at ``t = 1``.  The
conditional velocity is ``(x1 - x_t) / (1 - t)``, which is the time
derivative of ``x_t`` along a fixed draw and is constant along it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import InvalidInputError


@dataclass(frozen=True)
class PathConfig:
    sigma_max: float = 0.5
    t_eps: float = 0.03

    def __post_init__(self):
        if not 0 < self.t_eps < 1:
            raise InvalidInputError(f"t_eps must lie in (0, 1), got {self.t_eps}")
        if self.sigma_max < 0:
            raise InvalidInputError(f"sigma_max must be non-negative, got {self.sigma_max}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PathSample:
    """One draw (or a batch of draws) from the conditional path.

    ``t`` is a tensor of shape ``(B,)`` for batched samples; all other fields
    share the shape ``(B, F, T)``.
    """

    t: torch.Tensor
    x_t: torch.Tensor
    x1: torch.Tensor
    y: torch.Tensor
    eps: torch.Tensor
    v_target: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.x_t.shape[0]


def expand_time(t, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-sample ``(B,)`` time against ``like``."""
    t = torch.as_tensor(t, dtype=like.real.dtype if torch.is_complex(like) else like.dtype,
                        device=like.device)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def complex_normal(shape, generator: torch.Generator | None = None, dtype=torch.complex64,
                   device=None) -> torch.Tensor:
    """Complex noise with independent unit-variance normals on real and imaginary parts."""
    real_dtype = torch.empty((), dtype=dtype).real.dtype
    re = torch.randn(shape, generator=generator, dtype=real_dtype, device=device)
    im = torch.randn(shape, generator=generator, dtype=real_dtype, device=device)
    return torch.complex(re, im)


def sample_t(count: int, config: PathConfig, generator: torch.Generator | None = None,
             dtype=torch.float32) -> torch.Tensor:
    """i.i.d. draws from ``U[t_eps, 1)``."""
    if count <= 0:
        raise InvalidInputError(f"count must be positive, got {count}")
    u = torch.rand(count, generator=generator, dtype=dtype)
    return config.t_eps + (1.0 - config.t_eps) * u


def interpolate(x1, y, eps, t, config: PathConfig) -> torch.Tensor:
    """Path point ``t*x1 + (1-t)*y + (1-t)*sigma_max*eps``; valid on the closed interval."""
    tt = expand_time(t, x1)
    return tt * x1 + (1 - tt) * (y + config.sigma_max * eps)


def conditional_velocity(x1, x_t, t) -> torch.Tensor:
    tt = expand_time(t, x_t)
    if torch.any(tt >= 1):
        raise InvalidInputError("conditional velocity is undefined at t >= 1")
    return (x1 - x_t) / (1 - tt)


def sample_path(x1: torch.Tensor, y: torch.Tensor, t, config: PathConfig,
                generator: torch.Generator | None = None, eps: torch.Tensor | None = None) -> PathSample:
    """Draw ``x_t`` from the conditional path at time(s) ``t``.

    ``eps`` may be supplied to pin the noise draw; otherwise it is sampled
    from ``generator``.
    """
    if x1.shape != y.shape:
        raise InvalidInputError(f"x1 and y shapes differ: {tuple(x1.shape)} vs {tuple(y.shape)}")
    t = torch.as_tensor(t, dtype=x1.real.dtype if torch.is_complex(x1) else x1.dtype)
    if torch.any(t < 0) or torch.any(t >= 1):
        raise InvalidInputError("t must lie in [0, 1)")
    if eps is None:
        eps = complex_normal(x1.shape, generator, dtype=x1.dtype if torch.is_complex(x1) else torch.complex64,
                             device=x1.device)
    elif eps.shape != x1.shape:
        raise InvalidInputError("eps must match the shape of x1")
    x_t = interpolate(x1, y, eps, t, config)
    return PathSample(t=t, x_t=x_t, x1=x1, y=y, eps=eps,
                      v_target=conditional_velocity(x1, x_t, t))


def sample_prior(y: torch.Tensor, config: PathConfig,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Starting point of the flow: ``y + sigma_max * eps``."""
    if not torch.isfinite(y).all():
        raise InvalidInputError("prior mean contains non-finite entries")
    if config.sigma_max == 0:
        return y.clone()
    dtype = y.dtype if torch.is_complex(y) else torch.complex64
    return y + config.sigma_max * complex_normal(y.shape, generator, dtype=dtype, device=y.device)
