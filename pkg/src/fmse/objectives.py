"""Flow-matching training objectives and the velocity <-> clean-estimate conversions."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import torch

from .errors import InvalidInputError, SingularityError
from .losses import PerceptualLossFn, pesq_loss, si_sdr_loss
from .path import PathSample, expand_time
from .spectral import SpectralConfig, istft_tensor

BackboneFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class ObjectiveKind(str, enum.Enum):
    VELOCITY = "velocity"
    X1 = "x1"
    X1_EDM = "x1-edm"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class PrecondConfig:
    sigma_data: float = 0.1
    sigma_max: float = 0.5
    # "t" follows the published coefficients verbatim (noise level t*sigma_max);
    # "one-minus-t" matches the path's actual noise level (1-t)*sigma_max.
    noise_level_map: str = "t"

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise InvalidInputError(f"sigma_data must be positive, got {self.sigma_data}")
        if not self.sigma_max > 0:
            raise InvalidInputError(f"sigma_max must be positive, got {self.sigma_max}")
        if self.noise_level_map not in ("t", "one-minus-t"):
            raise InvalidInputError(f"unknown noise_level_map {self.noise_level_map!r}")

    def noise_level(self, t):
        t = torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
        level = t if self.noise_level_map == "t" else 1 - t
        return level * self.sigma_max

    def to_dict(self) -> dict:
        return asdict(self)


class EDMCoefficients(NamedTuple):
    c_skip: torch.Tensor
    c_out: torch.Tensor
    c_in: torch.Tensor
    weight: torch.Tensor | None


def edm_coefficients(t, config: PrecondConfig = PrecondConfig(), with_weight: bool = True) -> EDMCoefficients:
    """Preconditioning coefficients at time(s) ``t``.

    With ``s`` the noise level and ``sd`` the data std::

        c_skip = sd^2 / (sd^2 + s^2)      c_out = s sd / sqrt(sd^2 + s^2)
        c_in   = 1 / sqrt(sd^2 + s^2)     weight = (s^2 + sd^2) / (s^2 sd^2)

    ``weight`` diverges where ``s = 0``; requesting it there raises
    :class:`SingularityError`.
    """
    s = config.noise_level(t)
    sd2 = config.sigma_data ** 2
    total = sd2 + s * s
    root = torch.sqrt(total)
    c_skip = sd2 / total
    c_out = s * config.sigma_data / root
    c_in = 1.0 / root
    weight = None
    if with_weight:
        if torch.any(s == 0):
            raise SingularityError("loss weight diverges at zero noise level")
        weight = total / (s * s * sd2)
    return EDMCoefficients(c_skip, c_out, c_in, weight)


def _time_vector(t, x: torch.Tensor) -> torch.Tensor:
    real = x.real.dtype if torch.is_complex(x) else x.dtype
    t = torch.as_tensor(t, dtype=real, device=x.device)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    return t


def precondition(net: BackboneFn, x_t: torch.Tensor, y: torch.Tensor, t,
                 config: PrecondConfig = PrecondConfig()) -> torch.Tensor:
    """Denoiser ``c_skip x_t + c_out net(c_in x_t, c_in y, t)``."""
    if x_t.shape != y.shape:
        raise InvalidInputError("x_t and y must share a shape")
    tv = _time_vector(t, x_t)
    c_skip, c_out, c_in, _ = edm_coefficients(tv, config, with_weight=False)
    c_skip, c_out, c_in = (expand_time(c, x_t) for c in (c_skip, c_out, c_in))
    return c_skip * x_t + c_out * net(c_in * x_t, c_in * y, tv)


def v_from_x1(x1_pred: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
    tt = expand_time(t, x_t)
    if torch.any(tt >= 1):
        raise SingularityError("velocity from a clean estimate is undefined at t >= 1")
    return (x1_pred - x_t) / (1 - tt)


def x1_from_v(v_pred: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
    return x_t + (1 - expand_time(t, x_t)) * v_pred


def complex_sq_error(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = a - b
    if torch.is_complex(d):
        return d.real.square() + d.imag.square()
    return d.square()


@dataclass
class ObjectiveOutput:
    loss: torch.Tensor
    x1_hat: torch.Tensor
    v_hat: torch.Tensor


def cfm_loss(kind: ObjectiveKind, net: BackboneFn, batch: PathSample,
             precond: PrecondConfig = PrecondConfig()) -> ObjectiveOutput:
    """Flow-matching regression loss for one batch (mean over batch and elements)."""
    kind = ObjectiveKind(kind)
    tv = _time_vector(batch.t, batch.x_t)
    if kind is ObjectiveKind.VELOCITY:
        v_hat = net(batch.x_t, batch.y, tv)
        loss = complex_sq_error(v_hat, batch.v_target).mean()
        x1_hat = x1_from_v(v_hat, batch.x_t, tv)
    elif kind is ObjectiveKind.X1:
        x1_hat = net(batch.x_t, batch.y, tv)
        loss = complex_sq_error(x1_hat, batch.x1).mean()
        v_hat = v_from_x1(x1_hat, batch.x_t, tv)
    else:
        x1_hat = precondition(net, batch.x_t, batch.y, tv, precond)
        weight = edm_coefficients(tv, precond).weight
        per_sample = complex_sq_error(x1_hat, batch.x1).flatten(1).mean(1)
        loss = (weight * per_sample).mean()
        v_hat = v_from_x1(x1_hat, batch.x_t, tv)
    return ObjectiveOutput(loss=loss, x1_hat=x1_hat, v_hat=v_hat)


@dataclass
class LossTerms:
    total: torch.Tensor
    cfm: torch.Tensor
    pesq: torch.Tensor | None
    si_sdr: torch.Tensor | None
    output: ObjectiveOutput

    def as_floats(self) -> dict:
        out = {"loss": float(self.total.detach()), "cfm": float(self.cfm.detach())}
        if self.pesq is not None:
            out["pesq"] = float(self.pesq.detach())
        if self.si_sdr is not None:
            out["si_sdr"] = float(self.si_sdr.detach())
        return out


def combined_loss(kind: ObjectiveKind, net: BackboneFn, batch: PathSample,
                  precond: PrecondConfig = PrecondConfig(), alpha_p: float = 0.0,
                  alpha_s: float = 0.0, perceptual: PerceptualLossFn | None = None,
                  frontend: SpectralConfig = SpectralConfig(), length: int | None = None) -> LossTerms:
    """CFM term plus weighted PESQ-style and SI-SDR terms on resynthesised audio.

    Auxiliary terms with zero weight are not evaluated at all.
    """
    for name, a in (("alpha_p", alpha_p), ("alpha_s", alpha_s)):
        if not (a >= 0 and a != float("inf")):
            raise InvalidInputError(f"{name} must be finite and non-negative, got {a}")
    out = cfm_loss(kind, net, batch, precond)
    total = out.loss
    pesq_term = sisdr_term = None
    if alpha_p > 0 or alpha_s > 0:
        est = istft_tensor(out.x1_hat, frontend, length)
        ref = istft_tensor(batch.x1, frontend, length)
        if alpha_p > 0:
            if perceptual is None:
                raise InvalidInputError("alpha_p > 0 requires a perceptual loss")
            pesq_term = pesq_loss(perceptual, est, ref)
            total = total + alpha_p * pesq_term
        if alpha_s > 0:
            sisdr_term = si_sdr_loss(est, ref)
            total = total + alpha_s * sisdr_term
    return LossTerms(total=total, cfm=out.loss, pesq=pesq_term, si_sdr=sisdr_term, output=out)
