"""Optimisation loop with EMA tracking, validation curves and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
from torch import nn

from .backbone import save_checkpoint
from .data import SpectrogramDataset, Utterance
from .errors import DivergenceError, InvalidInputError
from .losses import PerceptualLossFn, get_perceptual_loss, si_sdr
from .objectives import ObjectiveKind, PrecondConfig, combined_loss
from .path import PathConfig, sample_path, sample_t
from .sampler import Enhancer, SamplerConfig, utterance_seed
from .spectral import SpectralConfig, Waveform

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    ema_decay: float = 0.999
    max_steps: int = 1000
    val_interval: int = 100
    alpha_p: float = 0.0
    alpha_s: float = 0.0
    objective: str = "x1-edm"
    seed: int = 0
    crop_frames: int = 256
    # cap on validation utterances per evaluation; None uses the whole split
    val_limit: int | None = None
    perceptual: str = "log-spectral"
    # max global gradient norm; None disables clipping
    grad_clip: float | None = None
    # "constant" or "cosine" (decays to zero at max_steps)
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidInputError("learning_rate must be non-negative")
        if not 0 < self.ema_decay < 1:
            raise InvalidInputError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1 or self.max_steps < 0 or self.val_interval < 1:
            raise InvalidInputError("batch_size, val_interval must be >= 1 and max_steps >= 0")
        if self.alpha_p < 0 or self.alpha_s < 0:
            raise InvalidInputError("alpha_p and alpha_s must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidInputError("grad_clip must be positive or None")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidInputError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        ObjectiveKind(self.objective)

    def lr_at(self, step: int) -> float:
        """Learning rate for the update that follows ``step`` completed steps."""
        if self.lr_schedule == "constant" or self.max_steps == 0:
            return self.learning_rate
        return 0.5 * self.learning_rate * (1 + math.cos(math.pi * step / self.max_steps))


class EMA:
    """Shadow copy of parameters: ``ema <- decay * ema + (1 - decay) * param``."""

    def __init__(self, net: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in net.state_dict().items()}

    @torch.no_grad()
    def update(self, net: nn.Module):
        for k, v in net.state_dict().items():
            if v.is_floating_point():
                self.shadow[k].mul_(self.decay).add_(v, alpha=1 - self.decay)
            else:
                self.shadow[k].copy_(v)

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state: dict):
        self.shadow = {k: v.detach().clone() for k, v in state.items()}

    def copy_to(self, net: nn.Module):
        net.load_state_dict(self.shadow)


@dataclass
class TrainState:
    step: int = 0
    params: dict | None = None
    ema_params: dict | None = None
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None
    best_val: float = -math.inf
    history: list[tuple[int, float]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def checkpoint_payload(self) -> dict:
        return {
            "step": self.step,
            "params": self.params,
            "ema_params": self.ema_params,
            "optimizer": self.optimizer_state,
            "rng_state": self.rng_state,
            "best_val": self.best_val,
            "history": [list(h) for h in self.history],
            "losses": list(self.losses),
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "TrainState":
        return cls(
            step=payload["step"],
            params=payload["params"],
            ema_params=payload["ema_params"],
            optimizer_state=payload.get("optimizer"),
            rng_state=payload.get("rng_state"),
            best_val=payload.get("best_val", -math.inf),
            history=[tuple(h) for h in payload.get("history", [])],
            losses=list(payload.get("losses", [])),
        )


MetricFn = Callable[[Waveform, Waveform], float]


def si_sdr_metric(estimate: Waveform, reference: Waveform) -> float:
    return si_sdr(estimate.samples.to(torch.float64), reference.samples.to(torch.float64))


def validate(enhancer: Enhancer, utterances: Sequence[Utterance], metric: MetricFn = si_sdr_metric,
             seed: int = 0) -> float:
    """Mean metric of enhanced audio over ``utterances`` (higher is better)."""
    scores = []
    for utt in utterances:
        est = enhancer(utt.noisy, seed=utterance_seed(utt.utterance_id, seed))
        scores.append(metric(est, utt.clean))
    return float(sum(scores) / len(scores))


def steps_to_threshold(history: Sequence[tuple[int, float]], threshold: float) -> int | None:
    """First step whose metric reaches ``threshold`` (inclusive), else ``None``."""
    if not history:
        raise InvalidInputError("history is empty")
    for step, value in history:
        if value >= threshold:
            return int(step)
    return None


def train(config: TrainConfig, data: SpectrogramDataset, net: nn.Module, *,
          path: PathConfig = PathConfig(), precond: PrecondConfig = PrecondConfig(),
          sampler: SamplerConfig = SamplerConfig(), val_data: Sequence[Utterance] | None = None,
          val_metric: MetricFn = si_sdr_metric, perceptual: PerceptualLossFn | None = None,
          log_path=None, checkpoint_dir=None, state: TrainState | None = None,
          extra_checkpoint: dict | None = None) -> TrainState:
    """Train ``net`` in place for ``config.max_steps`` total steps.

    Each step draws random crops, one time per utterance, a path sample and
    the combined loss, takes an Adam step and updates the EMA.  Every
    ``val_interval`` steps (and at the last step) the EMA weights enhance the
    validation utterances and ``val_metric`` is recorded in ``history``.
    Passing a ``state`` from a checkpoint resumes exactly where it stopped.
    """
    if len(data) == 0:
        raise InvalidInputError("training data is empty")
    kind = ObjectiveKind(config.objective)
    spectral: SpectralConfig = data.spectral
    if perceptual is None and config.alpha_p > 0:
        perceptual = get_perceptual_loss(config.perceptual)
    dtype = next(net.parameters()).dtype

    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    generator = torch.Generator()
    if state is None:
        generator.manual_seed(config.seed)
        state = TrainState()
        ema = EMA(net, config.ema_decay)
    else:
        state = copy.deepcopy(state)
        net.load_state_dict(state.params)
        ema = EMA(net, config.ema_decay)
        ema.load_state_dict(state.ema_params)
        if state.optimizer_state is not None:
            optimizer.load_state_dict(state.optimizer_state)
        generator.set_state(state.rng_state)

    val_data = list(val_data or [])
    if config.val_limit is not None:
        val_data = val_data[: config.val_limit]
    eval_net = copy.deepcopy(net)
    enhancer = Enhancer(eval_net, kind, spectral, path, precond, sampler, dtype=dtype)
    log_file = open(log_path, "a") if log_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None

    def snapshot():
        state.params = {k: v.detach().clone() for k, v in net.state_dict().items()}
        state.ema_params = ema.state_dict()
        state.optimizer_state = copy.deepcopy(optimizer.state_dict())
        state.rng_state = generator.get_state()

    def checkpoint(name):
        payload = state.checkpoint_payload()
        payload.update({
            "objective": kind.value,
            "train": asdict(config),
            "path": path.to_dict(),
            "precond": precond.to_dict(),
            "spectral": spectral.to_dict(),
            "sampler": sampler.to_dict(),
        })
        payload.update(extra_checkpoint or {})
        save_checkpoint(ckpt_dir / name, payload)

    try:
        net.train()
        while state.step < config.max_steps:
            t0 = time.perf_counter()
            x1, y = data.sample_batch(config.batch_size, generator)
            t = sample_t(config.batch_size, path, generator, dtype=dtype)
            batch = sample_path(x1, y, t, path, generator)
            terms = combined_loss(kind, net, batch, precond, config.alpha_p, config.alpha_s,
                                  perceptual, spectral)
            if not torch.isfinite(terms.total):
                raise DivergenceError(
                    f"non-finite loss at step {state.step}", step=state.step,
                    details={"t": t.tolist(), **terms.as_floats()},
                )
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            max_norm = config.grad_clip if config.grad_clip is not None else float("inf")
            grad_norm = float(torch.nn.utils.clip_grad_norm_(net.parameters(), max_norm))
            for group in optimizer.param_groups:
                group["lr"] = config.lr_at(state.step)
            optimizer.step()
            ema.update(net)
            state.step += 1
            state.losses.append(float(terms.total.detach()))
            record = {"step": state.step, **terms.as_floats(), "grad_norm": grad_norm}

            if val_data and (state.step % config.val_interval == 0 or state.step == config.max_steps):
                ema.copy_to(eval_net)
                eval_net.eval()
                value = validate(enhancer, val_data, val_metric, config.seed)
                state.history.append((state.step, value))
                record["val_metric"] = value
                if value > state.best_val:
                    state.best_val = value
                    if ckpt_dir:
                        snapshot()
                        checkpoint("best.pt")
            record["wall_time"] = time.perf_counter() - t0
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    snapshot()
    if ckpt_dir:
        checkpoint("last.pt")
    return state
