"""
The noisy link and the rate penalty
===================================

The student's feature map is scaled to unit power per sample and sent over an
additive white Gaussian noise channel. Separately, training penalizes how much
the feature says about its input through a sampled upper bound on mutual
information. This script checks both pieces numerically and plots them.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from semdistill.channel import ChannelState, apply_awgn, measured_snr_db, normalize_power
from semdistill.ib_loss import mi_upper_bound

###############################################################################
# Target against measured SNR over a million unit-power elements.

g = torch.Generator().manual_seed(0)
x = normalize_power(torch.randn(1, 1_000_000, generator=g, dtype=torch.float64))
targets = [-4.0, 0.0, 4.0, 8.0, 12.0]
measured = [measured_snr_db(x, apply_awgn(x, ChannelState(s), g)) for s in targets]
for t, m in zip(targets, measured):
    print(f"target {t:+5.1f} dB  measured {m:+.3f} dB")

###############################################################################
# The bound is zero when every input maps to the same feature, and grows as
# the per-input means spread apart relative to the encoder noise.

base = torch.randn(1, 4, 4, 4, generator=g, dtype=torch.float64)
spreads = [0.0, 0.1, 0.3, 1.0, 3.0]
rates = []
for spread in spreads:
    means = base + spread * torch.randn(16, 4, 4, 4, generator=g, dtype=torch.float64)
    samples = means + torch.randn(means.shape, generator=g, dtype=torch.float64)
    rates.append(mi_upper_bound(means, samples, 0.0).item())
    print(f"spread {spread:4.1f}  bound {rates[-1]:9.3f} nats")

fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
a.plot(targets, measured, "o-")
a.plot(targets, targets, "k:", lw=1)
a.set_xlabel("target SNR (dB)")
a.set_ylabel("measured SNR (dB)")
b.plot(spreads, rates, "o-")
b.set_xlabel("spread of means")
b.set_ylabel("rate bound (nats)")
fig.tight_layout()
fig.savefig("channel_and_rate.png", dpi=100)
