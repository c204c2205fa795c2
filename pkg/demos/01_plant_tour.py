"""A walk through the simulated testbed.

Four counter-propagating pumps feed Raman gain into 44 probe channels on a
50 km span.  We look at how the pumps decay and trade power, what the
signal sees, and what the OTDR chain makes of it.

    python demos/01_plant_tour.py
"""
# %%
import numpy as np

from ramanshape import plant as pl, traces

cfg = pl.PlantConfig()
print("pumps (THz):", cfg.pump_frequencies, " p_max (W):", cfg.pump_p_max)
print("channels:", len(cfg.channel_freqs), "from", cfg.channel_freqs[0], "to", cfg.channel_freqs[-1], "THz")

# %% Pump evolution.  Pumps enter at z = L and travel backwards.
p = np.array([0.3, 0.3, 0.3, 0.3])
field = pl.solve_pump_evolution(cfg.setting(p), cfg)
uncoupled = pl.solve_pump_evolution(cfg.setting(p), pl.PlantConfig(pump_pump_coupling=False))
for j, f in enumerate(cfg.pump_frequencies):
    print(f"{f:6.1f} THz  P(L) = {field.powers[j, -1]:.3f} W  P(0) = {field.powers[j, 0] * 1e3:6.2f} mW"
          f"  (uncoupled {uncoupled.powers[j, 0] * 1e3:6.2f} mW)")
# the highest pump feeds the lowest one on the way

# %% Signal along the fiber, pumps on and off
on = pl.solve_signal_profile(p, cfg)
off = pl.solve_signal_profile(np.zeros(4), cfg)
gain = on[:, -1] - off[:, -1]
print(f"on/off gain at z = L: {gain.min():.1f} .. {gain.max():.1f} dB across the band")
print("flattest channel pair:", np.argsort(np.abs(gain - gain.mean()))[:2])

# %% What the measurement chain returns
plant = pl.Plant()
clean = pl.Plant(noiseless=True).apply(p)
noisy = plant.apply(p, noise_seed=1)
print("profile grid:", clean.shape, "z from", clean.z_grid[0], "to", clean.z_grid[-1], "m")
print(f"MAE between noisy and clean measurement: {traces.mae(noisy, clean):.3f} dB")
print(f"MAE between two noisy measurements:      "
      f"{traces.mae(noisy, plant.apply(p, noise_seed=2)):.3f} dB")

# %% Save the profile for plotting elsewhere
traces.save_profile_csv(noisy, "profile_max_pumps.csv")
print("wrote profile_max_pumps.csv")
