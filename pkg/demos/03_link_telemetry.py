# %% [markdown]
# # A week of link telemetry
#
# Each QKD link is a stochastic source: secret-key rate and error rate are
# drawn around configured means. Here we sample every link every 30 s for a
# simulated week and compare against the configuration.

# %%
import numpy as np

from qkdn.config import MEASURED_LINKS, reference_config
from qkdn.network import telemetry_week

stats = telemetry_week(reference_config())

# %%
print(f"{'link':>6} {'skr kb/s':>18} {'qber %':>16}")
for link_id, (skr, skr_std, qber, qber_std) in MEASURED_LINKS.items():
    s = stats[link_id]
    print(f"{link_id:>6} {s['skr_mean']:7.2f} ({skr:5.1f}) +/-{s['skr_std']:5.2f} "
          f"{s['qber_mean']:6.2f} ({qber:3.1f})")

# %% [markdown]
# Relative error of the sampled means against the configuration:

# %%
errors = np.array([[stats[k]["skr_mean"] / v[0] - 1, stats[k]["qber_mean"] / v[2] - 1]
                   for k, v in MEASURED_LINKS.items()])
print("worst |error|:", np.abs(errors).max().round(4))
