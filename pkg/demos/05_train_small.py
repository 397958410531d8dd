"""End-to-end miniature: generate data, train briefly, inspect predictions.

A scaled-down run (small blocks, few epochs) that exercises the whole
pipeline in about a minute. The full desk-scale experiment lives in
tests/test_acceptance.py.
"""

import pathlib
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dota import evaluation as E
from dota import physics as P
from dota import training as TR
from dota.model import DoseTransformer, ModelConfig

OUT = pathlib.Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# a 96 mm deep block only contains beams up to ~95 MeV, so the demo
# restricts the sampled energy range accordingly
SHAPE = (32, 8, 8)
ENERGIES = (80.0, 95.0)
cfg = ModelConfig(L=32, H=8, W=8, K=4, N_h=4, dropout_rate=0.0, energy_range=ENERGIES)

with tempfile.TemporaryDirectory() as tmp:
    data = pathlib.Path(tmp) / "data"
    print("generating 150 geometries x 4 energies ...")
    P.generate_dataset(
        150, P.PhantomSpec(seed=42, layout="slabs"), data, shape=SHAPE,
        energy_range=ENERGIES,
    )

    tc = TR.TrainConfig(epochs=10, seed=0, batch_size=4, lr_halving_period=6)
    result = TR.train(cfg, tc, data, pathlib.Path(tmp) / "run", log=print)
    model = DoseTransformer.from_checkpoint(result.best_checkpoint)

    # fresh phantoms the model has never seen
    test_spec = P.PhantomSpec(seed=4242, layout="slabs")
    rates, rhos = [], []
    for i in range(10):
        g = P.generate_phantom(test_spec, shape=SHAPE, sample_index=i, max_energy=ENERGIES[1])
        energy = 80.0 + 1.5 * i
        ref = TR.mask_noise(P.simulate_dose(g, P.BeamSpec(energy)), 0.006)
        pred = model.predict(g, energy)
        rates.append(E.gamma_pass_rate(pred, ref).pass_rate)
        rhos.append(E.relative_error(pred, ref))
    print(f"held-out gamma pass {np.mean(rates):.1f}%  relative error {np.mean(rhos):.2f}%")

    g = P.generate_phantom(test_spec, shape=SHAPE, sample_index=11, max_energy=ENERGIES[1])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3), sharey=True)
    for e, color in [(82.0, "tab:blue"), (93.0, "tab:orange")]:
        ref = P.simulate_dose(g, P.BeamSpec(e)).values.max(axis=(1, 2))
        pred = model.predict(g, e).values.max(axis=(1, 2))
        axes[0].plot(ref, color=color, label=f"oracle {e:.0f} MeV")
        axes[1].plot(pred, color=color, label=f"model {e:.0f} MeV")
    axes[0].set_title("oracle depth profiles")
    axes[1].set_title("model depth profiles")
    for ax in axes:
        ax.set_xlabel("slice")
        ax.legend(fontsize=8)
    axes[0].set_ylabel("max dose in slice")
    fig.tight_layout()
    fig.savefig(OUT / "train_small_profiles.png", dpi=120)
    print(f"wrote {OUT / 'train_small_profiles.png'}")
