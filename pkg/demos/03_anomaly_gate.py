"""A GAN discriminator as a gate in front of the classifier.

Two detectors are trained on the same data: a plain GAN and one whose
discriminator also sees FGSM and BIM windows labelled fake (adversarial
learning). Each is scored on clean test windows plus one malicious set per
attack; a window passes the gate when its mean record score is at least 0.5.

    python demos/03_anomaly_gate.py [seed]
"""

import sys

import numpy as np

from faultguard.ads import AdsConfig, evaluate_ads, gate, legitimate_mask, train_ads
from faultguard.attacks import AttackSpec, run_attack
from faultguard.dataset import synth_dataset
from faultguard.predictor import PredictorConfig, init_model, predict, train_standard

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
data = synth_dataset(4, 400, 3.0, seed=seed)
cfg = PredictorConfig(hidden_size=64, n_classes=4, epochs=80, seed=seed)
model = init_model(cfg)
train_standard(model, data, cfg)

x, y = data.test.data, data.test.fault_type
malicious = {f"{k}@{e}": run_attack(model, x, y, AttackSpec(k, e)).perturbed
             for k in ("FGSM", "BIM", "PGD") for e in (0.1, 0.2)}

for al in (False, True):
    ads = train_ads(data.train, model, AdsConfig(seed=seed, adversarial_learning=al))
    disc = ads.discriminator
    scores = evaluate_ads(disc, x, malicious)
    print(f"\nadversarial learning {'on' if al else 'off'}: "
          f"{np.mean(legitimate_mask(disc, x)):.3f} of clean windows pass")
    for name, acc in scores.items():
        print(f"  {name:<9} detection accuracy {acc:.3f}")

# End to end with the AL detector: whatever passes the gate reaches the classifier.
stream = np.concatenate([x, malicious["BIM@0.2"]])
passed, rejected = gate(disc, stream)
print(f"\nmixed stream of {len(stream)} windows: {len(passed)} passed, {len(rejected)} rejected")
keep = legitimate_mask(disc, x)
print(f"classifier accuracy on the clean windows that passed: {np.mean(predict(model, x[keep]) == y[keep]):.3f}")
