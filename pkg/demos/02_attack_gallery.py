"""All five white-box attacks against one trained model.

For each attack the table lists accuracy after the attack, success rate and
the mean L-infinity and L2 size of the perturbation. CW has no epsilon
budget, so its row is the same at every epsilon.

    python demos/02_attack_gallery.py [epsilon]
"""

import sys

import numpy as np

from faultguard.attacks import KINDS, AttackSpec, run_attack
from faultguard.dataset import synth_dataset
from faultguard.predictor import PredictorConfig, init_model, predict, train_standard

eps = float(sys.argv[1]) if len(sys.argv) > 1 else 0.2
data = synth_dataset(4, 400, 3.0, seed=0)
cfg = PredictorConfig(hidden_size=64, n_classes=4, epochs=80, seed=0)
model = init_model(cfg)
train_standard(model, data, cfg)
x, y = data.test.data, data.test.fault_type
print(f"clean accuracy {np.mean(predict(model, x) == y):.3f}; epsilon {eps}\n")

print(f"{'attack':<6} {'accuracy':>8} {'success':>8} {'Linf':>7} {'L2':>7}")
for kind in KINDS:
    batch = run_attack(model, x, y, AttackSpec(kind, 0.0 if kind == "CW" else eps, seed=0))
    acc = np.mean(predict(model, batch.perturbed) == y)
    print(f"{kind:<6} {acc:>8.3f} {batch.success_rate:>8.3f} {batch.linf().mean():>7.3f} {batch.l2().mean():>7.3f}")
