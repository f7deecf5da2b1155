"""Waveform <-> compressed complex spectrogram conversion.

Framing convention: frames are centred (``n_fft // 2`` reflection padding on
both sides), so a signal of ``L`` samples yields ``T = 1 + L // hop`` frames.
Signals shorter than ``n_fft`` are first zero-padded to ``n_fft`` samples.
The inverse uses the canonical dual window (analysis window divided by the
overlap-added squared window), which reconstructs exactly for any hop that
keeps the squared-window envelope non-zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from .errors import InvalidInputError

# Magnitudes below this are treated as exact zeros by ``decompress``.
DECOMPRESS_FLOOR = 1e-12

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class SpectralConfig:
    n_fft: int = 510
    hop: int = 128
    window: str = "periodic-hann"
    alpha: float = 0.5
    beta: float = 0.15

    def __post_init__(self):
        if self.window != "periodic-hann":
            raise InvalidInputError(f"unsupported window {self.window!r}")
        if not 0 < self.alpha <= 1:
            raise InvalidInputError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.beta > 0:
            raise InvalidInputError(f"beta must be positive, got {self.beta}")
        if not 0 < self.hop <= self.n_fft:
            raise InvalidInputError(f"hop must lie in (0, n_fft], got {self.hop}")

    @property
    def n_freqs(self) -> int:
        return math.ceil((self.n_fft + 1) / 2)

    def window_tensor(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.hann_window(self.n_fft, periodic=True, dtype=dtype, device=device)

    def n_frames(self, length: int) -> int:
        """Frame count produced by :func:`stft` for ``length`` samples."""
        return 1 + max(length, self.n_fft) // self.hop

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Waveform:
    samples: torch.Tensor
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = torch.as_tensor(self.samples)
        if self.samples.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {tuple(self.samples.shape)}")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not torch.isfinite(self.samples).all():
            raise InvalidInputError("waveform contains NaN or Inf samples")

    def __len__(self):
        return self.samples.shape[-1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """Compressed-domain STFT coefficients of shape ``(..., F, T)``."""

    data: torch.Tensor
    config: SpectralConfig
    original_length: int

    def __post_init__(self):
        if not torch.is_complex(self.data):
            raise InvalidInputError("spectrogram data must be a complex tensor")
        if self.data.ndim < 2 or self.data.shape[-2] != self.config.n_freqs:
            raise InvalidInputError(
                f"expected {self.config.n_freqs} frequency bins, got shape {tuple(self.data.shape)}"
            )
        if not torch.isfinite(self.data).all():
            raise InvalidInputError("spectrogram contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]


def _check_finite(c: torch.Tensor, what: str):
    if not torch.isfinite(c).all():
        raise InvalidInputError(f"{what} contains NaN or Inf")


def _safe_magnitude(c: torch.Tensor, floor: float):
    # sqrt has an infinite derivative at 0; substitute 1 where the magnitude is
    # negligible so backward passes stay finite.
    mag2 = c.real.square() + c.imag.square()
    keep = mag2 > floor * floor
    mag = torch.sqrt(torch.where(keep, mag2, torch.ones_like(mag2)))
    return mag, keep


def compress(c: torch.Tensor, config: SpectralConfig) -> torch.Tensor:
    """Apply ``beta * |c|**alpha * exp(i angle(c))`` elementwise; zero maps to zero."""
    c = torch.as_tensor(c)
    if not torch.is_complex(c):
        c = c.to(torch.complex128)
    _check_finite(c, "compress input")
    mag, keep = _safe_magnitude(c, 0.0)
    gain = torch.where(keep, config.beta * mag.pow(config.alpha - 1.0), torch.zeros_like(mag))
    return c * gain


def decompress(c: torch.Tensor, config: SpectralConfig) -> torch.Tensor:
    """Inverse of :func:`compress`: ``(|c|/beta)**(1/alpha) * exp(i angle(c))``."""
    c = torch.as_tensor(c)
    if not torch.is_complex(c):
        c = c.to(torch.complex128)
    _check_finite(c, "decompress input")
    mag, keep = _safe_magnitude(c, DECOMPRESS_FLOOR)
    gain = torch.where(
        keep, (mag / config.beta).pow(1.0 / config.alpha) / mag, torch.zeros_like(mag)
    )
    return c * gain


def stft_tensor(x: torch.Tensor, config: SpectralConfig) -> torch.Tensor:
    """Compressed STFT of real signals ``(..., L)`` -> ``(..., F, T)``."""
    length = x.shape[-1]
    if length == 0:
        raise InvalidInputError("cannot transform an empty waveform")
    if length < config.n_fft:
        x = torch.nn.functional.pad(x, (0, config.n_fft - length))
    batch_shape = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    spec = torch.stft(
        flat,
        n_fft=config.n_fft,
        hop_length=config.hop,
        window=config.window_tensor(dtype=x.dtype, device=x.device),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    spec = spec.reshape(*batch_shape, *spec.shape[-2:])
    return compress(spec, config)


def istft_tensor(spec: torch.Tensor, config: SpectralConfig, length: int | None = None) -> torch.Tensor:
    """Inverse of :func:`stft_tensor`; ``length`` defaults to ``(T - 1) * hop``."""
    if spec.shape[-2] != config.n_freqs:
        raise InvalidInputError(
            f"spectrogram has {spec.shape[-2]} bins but config implies {config.n_freqs}"
        )
    raw = decompress(spec, config)
    batch_shape = raw.shape[:-2]
    flat = raw.reshape(-1, *raw.shape[-2:])
    n_out = (flat.shape[-1] - 1) * config.hop
    target = n_out if length is None else max(length, config.n_fft)
    # torch.istft divides by the overlap-added squared window: the dual-window inverse.
    out = torch.istft(
        flat,
        n_fft=config.n_fft,
        hop_length=config.hop,
        window=config.window_tensor(dtype=flat.real.dtype, device=flat.device),
        center=True,
        length=target,
    )
    if length is not None:
        out = out[..., :length]
    return out.reshape(*batch_shape, out.shape[-1])


def stft(w: Waveform, config: SpectralConfig = SpectralConfig()) -> ComplexSpectrogram:
    if len(w) == 0:
        raise InvalidInputError("cannot transform an empty waveform")
    if w.sample_rate != SAMPLE_RATE:
        raise InvalidInputError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")
    return ComplexSpectrogram(stft_tensor(w.samples, config), config, len(w))


def istft(s: ComplexSpectrogram) -> Waveform:
    return Waveform(istft_tensor(s.data, s.config, s.original_length), SAMPLE_RATE)


def read_wav(path) -> Waveform:
    """Read a mono WAV (integer PCM or float) as a float64 waveform in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        if data.shape[1] != 1:
            raise InvalidInputError(f"{path}: expected mono audio, found {data.shape[1]} channels")
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported WAV sample type {data.dtype}")
    return Waveform(torch.from_numpy(samples), int(rate))


def write_wav(path, w: Waveform, pcm16: bool = False):
    """Write ``w`` as float32 WAV, or 16-bit PCM with clipping when ``pcm16``."""
    samples = w.samples.detach().cpu().numpy()
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, data)
