"""Train a fault-type classifier on synthetic telemetry, then break it with FGSM.

Online adversarial training (OAT) is the first line of defense. This script
trains both variants on one seed and shows how far a single-step attack
moves each of them.

    python demos/01_train_and_break.py [seed]
"""

import sys

import numpy as np

from faultguard.attacks import AttackSpec, run_attack
from faultguard.dataset import synth_dataset
from faultguard.predictor import PredictorConfig, evaluate_accuracy, init_model, predict
from faultguard.predictor import train_online_adversarial, train_standard

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
data = synth_dataset(n_classes=4, n_windows=400, separation=3.0, seed=seed)
print(f"windows: train {len(data.train)}, validation {len(data.validation)}, test {len(data.test)}")

cfg = PredictorConfig(hidden_size=64, n_classes=4, epochs=80, seed=seed)
plain = init_model(cfg)
trace = train_standard(plain, data, cfg)
print(f"standard training: {trace.seconds:.1f}s, final loss {trace.loss[-1]:.4f}")

oat_cfg = PredictorConfig(hidden_size=64, n_classes=4, epochs=60, seed=seed)
robust = init_model(oat_cfg)
trace = train_online_adversarial(robust, data, oat_cfg)
print(f"online adversarial training: {trace.seconds:.1f}s")

x, y = data.test.data, data.test.fault_type
print(f"\n{'epsilon':>8} {'standard':>9} {'OAT':>6}")
for eps in (0.0, 0.05, 0.1, 0.2, 0.3):
    row = []
    for model in (plain, robust):
        adv = run_attack(model, x, y, AttackSpec("FGSM", eps)).perturbed if eps else x
        row.append(np.mean(predict(model, adv) == y))
    print(f"{eps:>8.2f} {row[0]:>9.3f} {row[1]:>6.3f}")

print(f"\nclean accuracy via evaluate_accuracy: {evaluate_accuracy(plain, data.test):.3f}")
