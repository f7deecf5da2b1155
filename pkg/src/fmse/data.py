"""Paired clean/noisy corpora: scanning, loading, cropping and synthesis.

On-disk layouts
---------------
``voicebank``
    The VoiceBank-DEMAND distribution layout::

        root/clean_trainset*_wav/p232_001.wav   root/noisy_trainset*_wav/p232_001.wav
        root/clean_testset_wav/...              root/noisy_testset_wav/...

    Training-set speakers ``p226`` and ``p287`` form the validation split;
    the test directories form the test split.
``paired-dirs``
    ``root/clean/*.wav`` with same-named files in ``root/noisy/``, all put in
    one split; or ``root/{train,val,test}/{clean,noisy}/``.

Speaker ids are the filename prefix before the first underscore.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import lfilter, resample_poly

from .errors import CorpusError, InvalidInputError
from .spectral import SAMPLE_RATE, SpectralConfig, Waveform, read_wav, stft_tensor, write_wav

log = logging.getLogger(__name__)

VALIDATION_SPEAKERS = ("p226", "p287")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PairEntry:
    clean_path: str
    noisy_path: str
    speaker_id: str
    utterance_id: str
    split: str = "train"
    snr_db: float | None = None


@dataclass
class CorpusManifest:
    pairs: list[PairEntry]
    split: str | None = None
    unmatched: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def select(self, split: str) -> "CorpusManifest":
        if split not in SPLITS:
            raise InvalidInputError(f"unknown split {split!r}")
        return CorpusManifest([p for p in self.pairs if p.split == split], split, list(self.unmatched))

    def head(self, n: int) -> "CorpusManifest":
        return CorpusManifest(self.pairs[:n], self.split, list(self.unmatched))

    @property
    def speakers(self) -> set[str]:
        return {p.speaker_id for p in self.pairs}

    def to_json(self) -> str:
        return json.dumps({"split": self.split, "unmatched": self.unmatched,
                           "pairs": [asdict(p) for p in self.pairs]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        doc = json.loads(text)
        return cls([PairEntry(**p) for p in doc["pairs"]], doc.get("split"), doc.get("unmatched", []))


def _speaker(uid: str) -> str:
    return uid.split("_", 1)[0]


def _pair_dir(clean_dir: Path, noisy_dir: Path, split_of, unmatched: list) -> list[PairEntry]:
    clean = {p.stem: p for p in clean_dir.glob("*.wav")}
    noisy = {p.stem: p for p in noisy_dir.glob("*.wav")}
    for uid in sorted(clean.keys() ^ noisy.keys()):
        missing = noisy_dir if uid in clean else clean_dir
        unmatched.append(f"{uid}: no counterpart in {missing}")
    pairs = []
    for uid in sorted(clean.keys() & noisy.keys()):
        spk = _speaker(uid)
        pairs.append(PairEntry(str(clean[uid]), str(noisy[uid]), spk, uid, split_of(spk)))
    return pairs


def scan_corpus(root, layout: str = "voicebank", split: str = "train") -> CorpusManifest:
    """Build a manifest of every clean/noisy pair under ``root``.

    ``split`` only applies to a flat ``paired-dirs`` layout.  Files lacking a
    counterpart are listed in ``manifest.unmatched`` and left out.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} does not exist")
    unmatched: list[str] = []
    pairs: list[PairEntry] = []
    if layout == "voicebank":
        for kind, split_of in (
            ("trainset", lambda spk: "val" if spk in VALIDATION_SPEAKERS else "train"),
            ("testset", lambda spk: "test"),
        ):
            clean_dirs = sorted(root.glob(f"clean_{kind}*"))
            noisy_dirs = sorted(root.glob(f"noisy_{kind}*"))
            if len(clean_dirs) > 1 or len(noisy_dirs) > 1:
                raise CorpusError(f"ambiguous {kind} directories under {root}")
            if clean_dirs and noisy_dirs:
                pairs += _pair_dir(clean_dirs[0], noisy_dirs[0], split_of, unmatched)
            elif clean_dirs or noisy_dirs:
                raise CorpusError(f"{root}: found only one of clean_{kind}*/noisy_{kind}*")
    elif layout == "paired-dirs":
        if (root / "clean").is_dir() and (root / "noisy").is_dir():
            if split not in SPLITS:
                raise InvalidInputError(f"unknown split {split!r}")
            pairs += _pair_dir(root / "clean", root / "noisy", lambda spk: split, unmatched)
        else:
            for name, sub_split in (("train", "train"), ("val", "val"), ("valid", "val"), ("test", "test")):
                sub = root / name
                if (sub / "clean").is_dir() and (sub / "noisy").is_dir():
                    pairs += _pair_dir(sub / "clean", sub / "noisy", lambda spk, s=sub_split: s, unmatched)
    else:
        raise InvalidInputError(f"unknown layout {layout!r}")
    if unmatched:
        log.warning("%d unmatched files under %s", len(unmatched), root)
    if not pairs:
        raise CorpusError(f"corpus under {root} is empty")
    pairs.sort(key=lambda p: (SPLITS.index(p.split), p.utterance_id))
    return CorpusManifest(pairs, None, unmatched)


def resample(w: Waveform, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Polyphase (Kaiser windowed-sinc) resampling; identity when rates match."""
    if w.sample_rate == target_rate:
        return w
    g = math.gcd(w.sample_rate, target_rate)
    up, down = target_rate // g, w.sample_rate // g
    out = resample_poly(w.samples.numpy(), up, down)
    return Waveform(torch.from_numpy(np.ascontiguousarray(out)), target_rate)


def load_pair(entry: PairEntry, target_rate: int = SAMPLE_RATE) -> tuple[Waveform, Waveform]:
    """Load, resample and length-align one clean/noisy pair (no normalisation)."""
    loaded = []
    for path in (entry.clean_path, entry.noisy_path):
        try:
            w = read_wav(path)
        except InvalidInputError:
            raise
        except Exception as exc:
            raise CorpusError(f"cannot read {path}: {exc}") from exc
        loaded.append(resample(w, target_rate))
    clean, noisy = loaded
    if len(clean) != len(noisy):
        n = min(len(clean), len(noisy))
        log.info("%s: truncating clean/noisy from %d/%d to %d samples",
                 entry.utterance_id, len(clean), len(noisy), n)
        clean = Waveform(clean.samples[:n], target_rate)
        noisy = Waveform(noisy.samples[:n], target_rate)
    return clean, noisy


def snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return float(10 * np.log10(np.sum(clean ** 2) / np.sum(noise ** 2)))


def synth_utterance(rng: np.random.Generator, n_samples: int, sample_rate: int = SAMPLE_RATE):
    """One harmonic "voiced" clean signal, its colored-noise mixture and the drawn SNR."""
    t = np.arange(n_samples) / sample_rate
    f0 = rng.uniform(100.0, 300.0)
    n_harm = int(rng.integers(2, 5))
    clean = np.zeros(n_samples)
    for k in range(1, n_harm + 1):
        clean += rng.uniform(0.3, 1.0) / k * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    env_rate = rng.uniform(0.5, 2.0)
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * env_rate * t + rng.uniform(0, 2 * np.pi))
    clean *= envelope
    clean *= rng.uniform(0.3, 0.5) / np.max(np.abs(clean))

    rho = rng.uniform(0.0, 0.9)
    noise = lfilter([1.0], [1.0, -rho], rng.standard_normal(n_samples))
    target_snr = rng.uniform(0.0, 10.0)
    noise *= np.sqrt(np.sum(clean ** 2) / (np.sum(noise ** 2) * 10 ** (target_snr / 10)))
    return clean, clean + noise, float(target_snr)


def synth_corpus(root, n_utts: int, seed: int = 0, duration_s: float = 2.0, n_val: int = 0,
                 sample_rate: int = SAMPLE_RATE) -> CorpusManifest:
    """Write a seeded synthetic corpus in the ``voicebank`` layout.

    The last ``n_val`` utterances belong to the validation speakers
    (p226/p287); the rest are spread over five training speakers.  Files are
    32-bit float WAV at 16 kHz.  Drawn SNRs are recorded on the manifest and
    in ``synth_meta.json``.
    """
    if n_utts < 1:
        raise InvalidInputError("n_utts must be >= 1")
    if not 0 <= n_val <= n_utts:
        raise InvalidInputError("n_val must lie in [0, n_utts]")
    root = Path(root)
    clean_dir = root / "clean_trainset_wav"
    noisy_dir = root / "noisy_trainset_wav"
    rng = np.random.default_rng(seed)
    n_samples = int(round(duration_s * sample_rate))
    pairs = []
    n_train = n_utts - n_val
    for i in range(n_utts):
        if i < n_train:
            spk, split = f"p{1 + i % 5:03d}", "train"
        else:
            spk, split = VALIDATION_SPEAKERS[(i - n_train) % 2], "val"
        uid = f"{spk}_{i:03d}"
        clean, noisy, target = synth_utterance(rng, n_samples, sample_rate)
        cp, np_ = clean_dir / f"{uid}.wav", noisy_dir / f"{uid}.wav"
        write_wav(cp, Waveform(torch.from_numpy(clean), sample_rate))
        write_wav(np_, Waveform(torch.from_numpy(noisy), sample_rate))
        pairs.append(PairEntry(str(cp), str(np_), spk, uid, split, target))
    pairs.sort(key=lambda p: (SPLITS.index(p.split), p.utterance_id))
    manifest = CorpusManifest(pairs)
    meta = {"seed": seed, "n_utts": n_utts, "n_val": n_val, "duration_s": duration_s,
            "snr_db": {p.utterance_id: p.snr_db for p in pairs}}
    (root / "synth_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return manifest


@dataclass
class Utterance:
    utterance_id: str
    clean: Waveform
    noisy: Waveform


class SpectrogramDataset:
    """In-memory paired spectrograms with random fixed-length crops.

    Crops shorter utterances are zero-padded on the right.  ``crop_frames``
    defaults to 256 STFT frames (about 2 s at hop 128).
    """

    def __init__(self, manifest: CorpusManifest, spectral: SpectralConfig = SpectralConfig(),
                 crop_frames: int = 256, dtype=torch.float32):
        if len(manifest) == 0:
            raise CorpusError("dataset manifest is empty")
        if crop_frames < 1:
            raise InvalidInputError("crop_frames must be >= 1")
        self.spectral = spectral
        self.crop_frames = crop_frames
        self.utterances: list[Utterance] = []
        self.clean_specs: list[torch.Tensor] = []
        self.noisy_specs: list[torch.Tensor] = []
        for entry in manifest:
            clean, noisy = load_pair(entry)
            self.utterances.append(Utterance(entry.utterance_id, clean, noisy))
            self.clean_specs.append(stft_tensor(clean.samples.to(dtype), spectral))
            self.noisy_specs.append(stft_tensor(noisy.samples.to(dtype), spectral))

    def __len__(self):
        return len(self.utterances)

    def _crop(self, spec: torch.Tensor, start: int) -> torch.Tensor:
        out = spec[..., start:start + self.crop_frames]
        if out.shape[-1] < self.crop_frames:
            out = torch.nn.functional.pad(out, (0, self.crop_frames - out.shape[-1]))
        return out

    def sample_batch(self, batch_size: int, generator: torch.Generator | None = None):
        """Random (clean, noisy) crops, each ``(B, F, crop_frames)``."""
        idx = torch.randint(len(self), (batch_size,), generator=generator).tolist()
        clean, noisy = [], []
        for i in idx:
            n_frames = self.clean_specs[i].shape[-1]
            hi = max(n_frames - self.crop_frames, 0) + 1
            start = int(torch.randint(hi, (1,), generator=generator))
            clean.append(self._crop(self.clean_specs[i], start))
            noisy.append(self._crop(self.noisy_specs[i], start))
        return torch.stack(clean), torch.stack(noisy)
