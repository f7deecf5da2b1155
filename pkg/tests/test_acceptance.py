"""Acceptance criteria, one test group per criterion.

Each test carries ``@pytest.mark.criterion(n)``; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the session.
"""

import math
import time
from pathlib import Path

import pytest
import torch
from torch import nn

from fmse.backbone import LinearBackbone, ReferenceNet, load_checkpoint
from fmse.data import SpectrogramDataset, synth_corpus
from fmse.evaluation import (PUBLISHED_BASELINE_TABLE, PUBLISHED_COMBINED_TABLE, PUBLISHED_OBJECTIVE_TABLE,
                             compare_runs, published_rows)
from fmse.losses import log_spectral_surrogate, si_sdr, si_sdr_loss
from fmse.objectives import ObjectiveKind, PrecondConfig, cfm_loss, combined_loss, edm_coefficients
from fmse.path import PathConfig, sample_path
from fmse.sampler import Enhancer, SamplerConfig, integrate
from fmse.spectral import SpectralConfig, Waveform, compress, decompress, istft, stft
from fmse.trainer import TrainConfig, TrainState, steps_to_threshold, train, validate

ROOT = Path(__file__).resolve().parents[1]
PRE = PrecondConfig()
KINDS = [k.value for k in ObjectiveKind]


def crandn(*shape, g):
    return torch.randn(*shape, dtype=torch.complex128, generator=g)


def random_batch(seed, shape=(4, 256, 6)):
    g = torch.Generator().manual_seed(seed)
    x1 = 0.2 * crandn(*shape, g=g)
    y = x1 + 0.1 * crandn(*shape, g=g)
    t = 0.03 + 0.97 * torch.rand(shape[0], generator=g, dtype=torch.float64)
    return sample_path(x1, y, t, PathConfig(), g)


# ---------------------------------------------------------------- 1, 2

@pytest.mark.criterion(1)
def test_edm_identities():
    start = time.perf_counter()
    t = 1 - torch.rand(1000, generator=torch.Generator().manual_seed(0), dtype=torch.float64)  # (0, 1]
    c = edm_coefficients(t, PrecondConfig(sigma_data=0.1, sigma_max=0.5))
    s2 = (0.5 * t) ** 2
    assert torch.max(torch.abs(c.weight * c.c_out ** 2 - 1)) < 1e-12
    assert torch.max(torch.abs(c.c_in ** 2 * (0.01 + s2) - 1)) < 1e-12
    assert torch.max(torch.abs(c.c_skip - 0.01 * c.c_in ** 2)) < 1e-12
    assert time.perf_counter() - start < 1.0


@pytest.mark.criterion(2)
def test_edm_spot_values():
    c = edm_coefficients(1.0, PrecondConfig(sigma_data=0.1, sigma_max=0.5, noise_level_map="t"))
    got = (c.c_skip.item(), c.c_out.item(), c.c_in.item(), c.weight.item())
    assert got == pytest.approx((0.0384615, 0.0980581, 1.9611614, 104.0), abs=1e-6)


# ---------------------------------------------------------------- 3

def oracle_net(kind, batch):
    if kind == "velocity":
        return lambda x, y, t: batch.v_target
    if kind == "x1":
        return lambda x, y, t: batch.x1
    c = edm_coefficients(batch.t, PRE)
    c_skip, c_out = c.c_skip[:, None, None], c.c_out[:, None, None]
    return lambda x, y, t: (batch.x1 - c_skip * batch.x_t) / c_out


@pytest.mark.criterion(3)
@pytest.mark.parametrize("kind", KINDS)
def test_oracle_objectives_vanish(kind):
    for seed in range(5):
        batch = random_batch(seed)
        assert cfm_loss(kind, oracle_net(kind, batch), batch, PRE).loss.item() < 1e-10


@pytest.mark.criterion(3)
@pytest.mark.parametrize("kind", KINDS)
def test_conversion_identity_all_heads(kind):
    batch = random_batch(10)
    torch.manual_seed(0)
    net = ReferenceNet(4, 1).double()
    with torch.no_grad():
        out = cfm_loss(kind, net, batch, PRE)
    t = batch.t[:, None, None]
    assert torch.max(torch.abs(out.x1_hat - (batch.x_t + (1 - t) * out.v_hat))) < 1e-6


# ---------------------------------------------------------------- 4

@pytest.mark.criterion(4)
def test_single_euler_step_exact():
    g = torch.Generator().manual_seed(0)
    x1 = crandn(3, 16, 4, g=g)
    for t in (0.0, 0.03, 0.5, 0.9, 0.999):
        x_t = crandn(3, 16, 4, g=g)
        out = integrate(lambda x, y, s: (x1 - x) / (1 - s), x_t, x_t, SamplerConfig(1, t_start=t))
        assert torch.max(torch.abs(out - x1)) < 1e-12


@pytest.mark.criterion(4)
def test_five_euler_steps_from_prior():
    g = torch.Generator().manual_seed(1)
    x1, y = crandn(2, 256, 8, g=g), crandn(2, 256, 8, g=g)
    x0 = y + 0.5 * crandn(2, 256, 8, g=g)
    out = integrate(lambda x, yy, s: (x1 - x) / (1 - s), x0, y, SamplerConfig(5))
    assert torch.max(torch.abs(out - x1)) < 1e-9


@pytest.mark.criterion(4)
def test_midpoint_order_two():
    # dx/dt = -x^2 + cos(3t) has a smooth solution; reference from a fine grid
    field = lambda x, y, t: -x * x + math.cos(3 * t)  # noqa: E731
    x0 = torch.tensor([0.5], dtype=torch.float64)
    ref = integrate(field, x0, x0, SamplerConfig(4096, scheme="midpoint")).item()
    errors = [abs(integrate(field, x0, x0, SamplerConfig(n, scheme="midpoint")).item() - ref) for n in (5, 10, 20)]
    for coarse, fine in zip(errors, errors[1:]):
        assert 3 <= coarse / fine <= 5


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5)
def test_compress_round_trip_and_phase():
    cfg = SpectralConfig()
    g = torch.Generator().manual_seed(0)
    c = torch.complex(torch.randn(10000, generator=g, dtype=torch.float64),
                      torch.randn(10000, generator=g, dtype=torch.float64)) * torch.logspace(-4, 3, 10000)
    assert torch.max(torch.abs(decompress(compress(c, cfg), cfg) - c) / c.abs()) < 1e-9
    assert torch.max(torch.abs(decompress(compress(c, cfg), cfg) - c)) < 1e-9 * 1e3
    # unit phasors of the input and output are identical
    phase_in = c / c.abs()
    out = compress(c, cfg)
    assert torch.max(torch.abs(out / out.abs() - phase_in)) < 1e-15 * 10


@pytest.mark.criterion(5)
def test_stft_round_trip():
    g = torch.Generator().manual_seed(1)
    for n in (16000, 32000, 12345):
        x = 0.3 * torch.randn(n, generator=g, dtype=torch.float64)
        y = istft(stft(Waveform(x))).samples
        assert len(y) == n
        interior = slice(510, n - 510)
        assert torch.max(torch.abs(y[interior] - x[interior])) < 1e-6


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6)
def test_si_sdr_contract():
    one = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    est = torch.tensor([1.0, 1.0, 0.0], dtype=torch.float64)
    assert abs(si_sdr_loss(est, one).item()) < 1e-9

    g = torch.Generator().manual_seed(2)
    ref = torch.randn(16000, generator=g, dtype=torch.float64)
    noise = torch.randn(16000, generator=g, dtype=torch.float64)
    est = ref + 0.7 * noise
    base = si_sdr_loss(est, ref).item()
    for a in (0.5, 2.0, -3.0, 10.0):
        assert abs(si_sdr_loss(a * est, ref).item() - base) < 1e-9

    losses = [si_sdr_loss((1 - a) * noise + a * ref, ref).item() for a in torch.linspace(0, 1, 11).tolist()]
    assert all(nxt < cur for cur, nxt in zip(losses, losses[1:]))


# ---------------------------------------------------------------- 7

class TinyConv(nn.Module):
    """75-parameter conv backbone with a time gain, float64."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(4, 2, 3, padding=1, dtype=torch.float64)
        self.gain = nn.Parameter(torch.tensor(0.3, dtype=torch.float64))

    def forward(self, x, y, t):
        h = torch.stack([x.real, x.imag, y.real, y.imag], dim=1)
        out = self.conv(h) * (1 + self.gain * t[:, None, None, None])
        return torch.complex(out[:, 0], out[:, 1])


def flat_params(net):
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


def set_params(net, vec):
    i = 0
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(vec[i:i + p.numel()].reshape(p.shape))
            i += p.numel()


def gradient_error(net, loss_fn, h=1e-6):
    theta = flat_params(net)
    net.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in net.parameters()])
    numeric = torch.zeros_like(theta)
    for i in range(theta.numel()):
        for sign in (1, -1):
            shifted = theta.clone()
            shifted[i] += sign * h
            set_params(net, shifted)
            with torch.no_grad():
                numeric[i] += sign * loss_fn().item()
        numeric[i] /= 2 * h
    set_params(net, theta)
    return (torch.linalg.norm(analytic - numeric) / torch.linalg.norm(analytic)).item()


def small_batch(seed):
    g = torch.Generator().manual_seed(seed)
    x1 = 0.3 * crandn(2, 256, 5, g=g)
    y = x1 + 0.2 * crandn(2, 256, 5, g=g)
    t = torch.tensor([0.2, 0.7], dtype=torch.float64)
    return sample_path(x1, y, t, PathConfig(), g)


_GRAD_START = []


@pytest.mark.criterion(7)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("model", ["linear", "tinyconv"])
def test_gradient_check_cfm(kind, model):
    _GRAD_START.append(time.perf_counter())
    torch.manual_seed(0)
    net = LinearBackbone(0.6, 0.2) if model == "linear" else TinyConv()
    assert sum(p.numel() for p in net.parameters()) <= 100
    batch = small_batch(1)
    assert gradient_error(net, lambda: cfm_loss(kind, net, batch, PRE).loss) < 1e-4


@pytest.mark.criterion(7)
@pytest.mark.parametrize("kind", KINDS)
def test_gradient_check_combined(kind):
    torch.manual_seed(0)
    net = TinyConv()
    batch = small_batch(2)
    surrogate = log_spectral_surrogate()
    terms = combined_loss(kind, net, batch, PRE, 0.5, 0.05, surrogate)
    assert terms.pesq.item() > 0 and terms.si_sdr is not None
    err = gradient_error(net, lambda: combined_loss(kind, net, batch, PRE, 0.5, 0.05, surrogate).total)
    assert err < 1e-4
    assert time.perf_counter() - _GRAD_START[0] < 120


# ---------------------------------------------------------------- 8

# Toy configuration (see README "Acceptance suite").
TOY = dict(n_utts=60, n_val=10, duration_s=2.0, corpus_seed=0, channels=16, depth=2, learning_rate=6e-3,
           batch_size=8, crop_frames=32, ema_decay=0.99, max_steps=2000, val_interval=100,
           noise_level_map="one-minus-t", grad_clip=1.0, lr_schedule="cosine")
TOY_BUDGET_S = 30 * 60


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    manifest = synth_corpus(root, TOY["n_utts"], seed=TOY["corpus_seed"], duration_s=TOY["duration_s"],
                            n_val=TOY["n_val"])
    data = SpectrogramDataset(manifest.select("train"), crop_frames=TOY["crop_frames"])
    val = SpectrogramDataset(manifest.select("val")).utterances
    noisy = sum(si_sdr(u.noisy.samples.double(), u.clean.samples.double()) for u in val) / len(val)
    return {"data": data, "val": val, "noisy": noisy, "runs": {}, "start": time.perf_counter(),
            "precond": PrecondConfig(noise_level_map=TOY["noise_level_map"])}


def toy_run(toy, kind, seed=0):
    key = (kind, seed)
    if key not in toy["runs"]:
        torch.manual_seed(seed)
        net = ReferenceNet(TOY["channels"], TOY["depth"])
        cfg = TrainConfig(learning_rate=TOY["learning_rate"], batch_size=TOY["batch_size"],
                          ema_decay=TOY["ema_decay"], max_steps=TOY["max_steps"],
                          val_interval=TOY["val_interval"], objective=kind, seed=seed,
                          crop_frames=TOY["crop_frames"], grad_clip=TOY["grad_clip"],
                          lr_schedule=TOY["lr_schedule"])
        toy["runs"][key] = train(cfg, toy["data"], net, precond=toy["precond"], val_data=toy["val"])
    return toy["runs"][key]


@pytest.mark.criterion(8)
@pytest.mark.slow
@pytest.mark.parametrize("kind", KINDS)
def test_toy_enhancement_gain(toy, kind):
    state = toy_run(toy, kind)
    final = state.history[-1][1]
    print(f"\n[toy] {kind}: noisy {toy['noisy']:.2f} dB -> enhanced {final:.2f} dB "
          f"(curve {[(s, round(v, 1)) for s, v in state.history]})")
    assert state.step <= 2000
    assert final - toy["noisy"] >= 3.0


@pytest.mark.criterion(8)
@pytest.mark.slow
@pytest.mark.parametrize("kind", KINDS)
def test_toy_training_loss_drops(toy, kind):
    losses = toy_run(toy, kind).losses
    early = sum(losses[25:75]) / 50
    late = sum(losses[-50:]) / 50
    assert late < 0.2 * early


def _edm_not_slower(toy, seed):
    x1 = toy_run(toy, "x1", seed).history
    edm = toy_run(toy, "x1-edm", seed).history
    top = min(max(v for _, v in x1), max(v for _, v in edm))
    threshold = 0.5 * (toy["noisy"] + top)
    a, b = steps_to_threshold(edm, threshold), steps_to_threshold(x1, threshold)
    print(f"\n[toy] seed {seed}: threshold {threshold:.2f} dB, steps x1-edm {a}, x1 {b}")
    return a is not None and b is not None and a <= b


@pytest.mark.criterion(8)
@pytest.mark.slow
def test_toy_edm_converges_no_slower_than_x1(toy):
    assert _edm_not_slower(toy, 0) or _edm_not_slower(toy, 1)


@pytest.mark.criterion(8)
@pytest.mark.slow
def test_toy_runtime(toy):
    for kind in KINDS:
        toy_run(toy, kind)
    elapsed = time.perf_counter() - toy["start"]
    print(f"\n[toy] wall time {elapsed:.0f} s")
    assert elapsed <= TOY_BUDGET_S


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9)
def test_published_tables_format_only():
    assert {k: v["PESQ"][0] for k, v in PUBLISHED_OBJECTIVE_TABLE.items()} == {
        "velocity": 3.04, "x1": 2.93, "x1-edm": 3.08}
    assert {k: (v["alpha_p"], v["alpha_s"]) for k, v in PUBLISHED_COMBINED_TABLE.items()} == {
        "velocity": (5e-2, 5e-3), "x1": (1e-3, 1e-4), "x1-edm": (1e-6, 1e-7)}
    for table in (PUBLISHED_OBJECTIVE_TABLE, PUBLISHED_COMBINED_TABLE, PUBLISHED_BASELINE_TABLE):
        rows = published_rows(table)
        cmp = compare_runs(list(rows.values()), list(rows))
        text = cmp.to_text()
        assert text.splitlines()[0].split()[0] == "run" and "±" in text
        assert set(cmp.to_dict()) == {"labels", "metrics", "rows", "best"}


@pytest.mark.criterion(9)
def test_full_scale_recipe_documented():
    readme = (ROOT / "README.md").read_text()
    for needle in ("VoiceBank-DEMAND", "NCSN++", "PESQ", "ESTOI", "DNSMOS", "WER"):
        assert needle in readme


# ---------------------------------------------------------------- 10

@pytest.fixture(scope="module")
def det_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("det")
    manifest = synth_corpus(root, 6, seed=3, duration_s=0.5, n_val=2)
    return (SpectrogramDataset(manifest.select("train"), crop_frames=16),
            SpectrogramDataset(manifest.select("val")).utterances)


def det_cfg(steps):
    return TrainConfig(learning_rate=1e-3, batch_size=4, ema_decay=0.9, max_steps=steps, val_interval=3,
                       objective="x1-edm", seed=5, crop_frames=16, alpha_p=1e-3, alpha_s=1e-4)


@pytest.mark.criterion(10)
def test_seeded_training_reproducible(det_data):
    data, val = det_data
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        runs.append(train(det_cfg(6), data, ReferenceNet(8, 1), val_data=val))
    assert runs[0].losses == runs[1].losses
    assert runs[0].history == runs[1].history
    for k in runs[0].ema_params:
        assert torch.equal(runs[0].ema_params[k], runs[1].ema_params[k])


@pytest.mark.criterion(10)
def test_seeded_enhancement_reproducible(det_data):
    _, val = det_data
    torch.manual_seed(0)
    enhancer = Enhancer(ReferenceNet(8, 1).eval(), "velocity")
    a = enhancer(val[0].noisy, seed=42).samples
    b = enhancer(val[0].noisy, seed=42).samples
    assert torch.equal(a, b)
    assert validate(enhancer, val) == validate(enhancer, val)


@pytest.mark.criterion(10)
def test_checkpoint_resume_matches(det_data, tmp_path):
    data, val = det_data
    torch.manual_seed(0)
    full = train(det_cfg(6), data, ReferenceNet(8, 1), val_data=val)
    torch.manual_seed(0)
    train(det_cfg(3), data, ReferenceNet(8, 1), val_data=val, checkpoint_dir=tmp_path)
    state = TrainState.from_checkpoint(load_checkpoint(tmp_path / "last.pt"))
    resumed = train(det_cfg(6), data, ReferenceNet(8, 1), val_data=val, state=state)
    assert resumed.losses == full.losses
    assert resumed.history == full.history
    for k in full.params:
        assert torch.equal(resumed.params[k], full.params[k])
        assert torch.equal(resumed.ema_params[k], full.ema_params[k])
