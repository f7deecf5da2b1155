"""Time-domain auxiliary losses: SI-SDR and a pluggable perceptual term."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .errors import InvalidInputError, PerceptualLossError
from .spectral import Waveform

# Added to both energies in the SI-SDR ratio; bounds the loss when the
# residual vanishes and leaves exact 0 dB cases exact.
SI_SDR_EPS = 1e-8


def _as_tensor(x):
    return x.samples if isinstance(x, Waveform) else torch.as_tensor(x)


def si_sdr_loss(estimate, reference, eps: float = SI_SDR_EPS, reduction: str = "mean") -> torch.Tensor:
    """Negative scale-invariant SDR in dB over the last axis.

    ``omega = <est, ref> / <ref, ref>`` is the optimal gain on the reference
    and the loss is ``-10 log10((|omega ref|^2 + eps) / (|est - omega ref|^2 + eps))``.
    No mean removal is applied.

    Parameters
    ----------
    estimate, reference : Tensor or Waveform, shape (..., L)
    reduction : {"mean", "none"}
    """
    est = _as_tensor(estimate)
    ref = _as_tensor(reference)
    if est.shape != ref.shape:
        raise InvalidInputError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if est.shape[-1] < 1:
        raise InvalidInputError("signals must contain at least one sample")
    ref_energy = (ref * ref).sum(-1, keepdim=True)
    if torch.any(ref_energy == 0):
        raise InvalidInputError("reference signal is identically zero")
    omega = (est * ref).sum(-1, keepdim=True) / ref_energy
    target = omega * ref
    residual = est - target
    ratio = ((target * target).sum(-1) + eps) / ((residual * residual).sum(-1) + eps)
    loss = -10.0 * torch.log10(ratio)
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise InvalidInputError(f"unknown reduction {reduction!r}")


def si_sdr(estimate, reference, eps: float = SI_SDR_EPS) -> float:
    """SI-SDR in dB of a single pair (higher is better)."""
    return -float(si_sdr_loss(estimate, reference, eps))


@dataclass
class PerceptualLossFn:
    """A named perceptual loss ``evaluate(estimate, reference) -> scalar``.

    Contract: 16 kHz mono signals shaped ``(..., L)`` in, a scalar batch mean
    out, lower is better.  ``reentrant=False`` tells callers to serialise
    concurrent use.
    """

    name: str
    evaluate: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
    differentiable: bool = True
    reentrant: bool = True
    minimum: float | None = None
    options: dict = field(default_factory=dict)


def pesq_loss(fn: PerceptualLossFn, estimate, reference, training: bool = False) -> torch.Tensor:
    if training and not fn.differentiable:
        raise PerceptualLossError(f"perceptual loss {fn.name!r} is not differentiable")
    est = _as_tensor(estimate)
    ref = _as_tensor(reference)
    try:
        value = fn.evaluate(est, ref)
    except Exception as exc:  # noqa: BLE001 - evaluator internals are opaque
        raise PerceptualLossError(f"perceptual evaluator {fn.name!r} failed: {exc}") from exc
    value = torch.as_tensor(value)
    if not torch.isfinite(value).all():
        raise PerceptualLossError(f"perceptual evaluator {fn.name!r} returned a non-finite value")
    return value


def log_spectral_distance(estimate: torch.Tensor, reference: torch.Tensor, n_fft: int = 512,
                          hop: int = 128, floor: float = 1e-6, deficit_weight: float = 0.5) -> torch.Tensor:
    """Asymmetric log-power spectral distance, a dependency-free stand-in for PESQ.

    Bins where the estimate carries more energy than the reference (added
    noise) cost ``d**2``; bins with missing energy cost ``deficit_weight * d**2``,
    mirroring PESQ's harsher treatment of additive distortion.  Zero iff the
    log-power spectra agree.
    """
    window = torch.hann_window(n_fft, dtype=reference.dtype, device=reference.device)

    def logpow(x):
        flat = x.reshape(-1, x.shape[-1])
        if flat.shape[-1] < n_fft:
            flat = torch.nn.functional.pad(flat, (0, n_fft - flat.shape[-1]))
        s = torch.stft(flat, n_fft, hop, window=window, center=True, pad_mode="constant",
                       return_complex=True)
        return torch.log(s.real.square() + s.imag.square() + floor)

    d = logpow(estimate) - logpow(reference)
    weight = torch.where(d > 0, torch.ones_like(d), torch.full_like(d, deficit_weight))
    return (weight * d.square()).mean()


def log_spectral_surrogate(**options) -> PerceptualLossFn:
    return PerceptualLossFn(
        name="log-spectral",
        evaluate=lambda est, ref: log_spectral_distance(est, ref, **options),
        differentiable=True,
        reentrant=True,
        minimum=0.0,
        options=options,
    )


def torch_pesq_adapter(factor: float = 1.0, sample_rate: int = 16000) -> PerceptualLossFn:
    """Adapter for the ``torch_pesq`` package (differentiable PESQ loss).

    The package is imported lazily; install it separately to use this adapter.
    """
    try:
        from torch_pesq import PesqLoss
    except ImportError as exc:
        raise PerceptualLossError(
            "the 'torch-pesq' adapter needs the torch_pesq package (pip install torch-pesq)"
        ) from exc
    module = PesqLoss(factor, sample_rate=sample_rate)

    def evaluate(est, ref):
        # PesqLoss(ref, deg) returns per-utterance losses
        return module(ref.to(torch.float32), est.to(torch.float32)).mean()

    return PerceptualLossFn(name="torch-pesq", evaluate=evaluate, differentiable=True,
                            reentrant=False, options={"factor": factor})


PERCEPTUAL_LOSSES: dict[str, Callable[..., PerceptualLossFn]] = {
    "log-spectral": log_spectral_surrogate,
    "torch-pesq": torch_pesq_adapter,
}


def get_perceptual_loss(name: str, **options) -> PerceptualLossFn:
    try:
        factory = PERCEPTUAL_LOSSES[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown perceptual loss {name!r}; available: {sorted(PERCEPTUAL_LOSSES)}"
        ) from None
    return factory(**options)
