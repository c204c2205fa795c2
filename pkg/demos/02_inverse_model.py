"""Learning pump powers from a measured 2D profile.

A small version of the experiment: a few hundred random pump settings,
a short training run, then the two numbers that matter: R2 of the
predicted powers and the MAE of the profile they actually produce.

    python demos/02_inverse_model.py      (about two minutes)
"""
# %%
import numpy as np

from ramanshape import cnn, dataset
from ramanshape.plant import Plant

plant = Plant()
ds = dataset.generate(400, master_seed=11, plant=plant)
ds = dataset.split(ds, (300, 60, 40), seed=11)
print("dataset:", ds.profiles.shape, "split sizes:", {k: len(v) for k, v in ds.split.items()})

# %%
model = cnn.NetworkModel(p_max=plant.p_max, seed=0)
tc = cnn.TrainConfig(max_epochs=25, patience=8)
model, history = cnn.train(model, ds, tc,
                           callback=lambda h: print(f"epoch {h['epoch']:3d}  val {h['val_loss']:.2e}"))

# %% How good is the inverse map?
rep = cnn.evaluate(model, ds, plant, seed=11)
print("R2 per pump:", np.round(rep.r2, 3))
print(f"plant-verified MAE: mean {rep.mu:.2f} dB, std {rep.sigma:.2f} dB, worst {rep.mae.max():.2f} dB")

# %% Errors against true power, pump 1
err = np.abs(rep.predicted[:, 0] - rep.truth[:, 0])
order = np.argsort(rep.truth[:, 0])
q = len(order) // 4
print(f"p1 abs error, lowest quartile {err[order[:q]].mean() * 1e3:.1f} mW, "
      f"highest {err[order[-q:]].mean() * 1e3:.1f} mW")
