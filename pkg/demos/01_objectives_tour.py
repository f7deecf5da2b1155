# ---
# jupyter:
#   jupytext:
#     formats: py:percent,ipynb
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
"""
# Three ways to train a flow-matching enhancer

| Metadata | Value |
|----------|-------|
| **Runtime** | a few seconds on CPU |
| **Dataset** | none (random spectrograms) |

All three objectives share one probability path from the noisy spectrogram
`y` to the clean spectrogram `x1`:

    x_t = t * x1 + (1 - t) * y + (1 - t) * sigma_max * eps

They differ only in what the network is asked to output:

* `velocity` regresses `v = (x1 - x_t) / (1 - t)`;
* `x1` regresses the clean spectrogram directly;
* `x1-edm` wraps the network in EDM preconditioning and regresses `x1`
  with the EDM loss weight.

This tour builds each loss by hand on a toy batch, checks that an oracle
network drives it to zero and shows how the preconditioning coefficients
move over time.
"""

# %%
import torch

from fmse.objectives import PrecondConfig, cfm_loss, edm_coefficients, v_from_x1, x1_from_v
from fmse.path import PathConfig, sample_path

torch.manual_seed(0)

# %% [markdown]
"""
## A toy batch on the path
"""

# %%
g = torch.Generator().manual_seed(0)
x1 = 0.1 * torch.randn(4, 256, 16, dtype=torch.complex128, generator=g)
y = x1 + 0.05 * torch.randn(4, 256, 16, dtype=torch.complex128, generator=g)
t = torch.tensor([0.05, 0.3, 0.6, 0.95], dtype=torch.float64)
batch = sample_path(x1, y, t, PathConfig(), g)
print("x_t", tuple(batch.x_t.shape), "t", batch.t.tolist())

# %% [markdown]
"""
## Oracle networks reach zero loss

An oracle returns exactly the regression target of its objective.  For
`x1-edm` the raw network output is mapped through `c_skip * x_t + c_out * F`,
so the oracle inverts that map.
"""

# %%
pre = PrecondConfig()
c = edm_coefficients(batch.t, pre)
oracles = {
    "velocity": lambda x, yy, s: batch.v_target,
    "x1": lambda x, yy, s: batch.x1,
    "x1-edm": lambda x, yy, s: (batch.x1 - c.c_skip[:, None, None] * batch.x_t) / c.c_out[:, None, None],
}
for kind, net in oracles.items():
    print(f"{kind:9s} oracle loss {cfm_loss(kind, net, batch, pre).loss.item():.2e}")

# %% [markdown]
"""
## Converting between heads

Velocity and clean-target predictions are interchangeable at any `t < 1`,
which lets every objective run through the same sampler.
"""

# %%
v = x1_from_v(batch.v_target, batch.x_t, batch.t)
print("x1 from v max error", (v - batch.x1).abs().max().item())
print("v from x1 max error", (v_from_x1(batch.x1, batch.x_t, batch.t) - batch.v_target).abs().max().item())

# %% [markdown]
"""
## Preconditioning coefficients over time

With the default noise-level map the EDM noise level grows with `t`.  The
alternative map `one-minus-t` follows the actual residual noise on the
path, which shrinks towards the clean end.
"""

# %%
grid = torch.tensor([0.03, 0.25, 0.5, 0.75, 1.0], dtype=torch.float64)
for noise_map in ("t", "one-minus-t"):
    cfg = PrecondConfig(noise_level_map=noise_map)
    coef = edm_coefficients(grid.clamp(max=0.999) if noise_map == "one-minus-t" else grid, cfg)
    print(f"map {noise_map}")
    for name in ("c_skip", "c_out", "c_in", "weight"):
        print(f"  {name:7s}", " ".join(f"{v:9.4f}" for v in getattr(coef, name).tolist()))
