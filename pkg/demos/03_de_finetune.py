"""Fine-tuning pump powers with differential evolution.

Pick a target profile, start DE once from a rough guess (standing in for a
CNN prediction) and once from random pumps, and compare.

    python demos/03_de_finetune.py        (about a minute)
"""
# %%
import numpy as np

from ramanshape import evolve
from ramanshape.plant import Plant
from ramanshape.traces import mae

plant = Plant()
truth = np.array([0.24, 0.08, 0.17, 0.29])
target = plant.apply(truth, noise_seed=3)

guess = np.clip(truth + np.array([-0.04, 0.05, 0.03, -0.05]), 0, 0.3)
first = plant.apply(guess, noise_seed=4)
print(f"guess {guess} -> MAE {mae(target, first):.2f} dB")

# %%
cfg = evolve.DeConfig(max_iterations=40, seed=1)
for mode in ("cnn-assisted", "random"):
    run = evolve.finetune(target, plant, cfg, mode, cnn_pred=guess, log_fn=lambda line: None)
    print(f"{mode:13s} best {np.round(run.best_powers, 3)}  MAE {run.best_mae:.3f} dB "
          f"after {run.evaluations} plant calls")
    print("   best cost per 10 generations:", np.round(run.history[::10], 3))
