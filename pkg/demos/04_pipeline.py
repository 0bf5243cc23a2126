"""The whole framework from one config: train, attack, defend, report.

Equivalent to ``faultguard pipeline --config demos/desk.toml``. Writes
report.csv, report.json and plot-data files under the chosen directory and
prints a short digest of the epsilon sweep.

    python demos/04_pipeline.py [out_dir]
"""

import sys
from pathlib import Path

from faultguard.harness import ExperimentConfig, emit_report, run_full_pipeline

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = ExperimentConfig.load(Path(__file__).with_name("desk.toml"))
cfg.out = out
report = run_full_pipeline(cfg)
paths = emit_report(report, out)
print(f"{len(report.rows)} rows, config hash {cfg.hash()}; wrote {len(paths)} files to {out}")

print(f"\n{'attack':<6} {'eps':>5} {'undefended':>10} {'OAT':>6} {'OAT+gate':>9} {'ADS(AL)':>8}")
for kind in cfg.attacks:
    for eps in (0.1, 0.2, 0.3):
        get = lambda d, m="accuracy": report.value(task="type", defense=d, attack=kind, epsilon=eps, metric=m)  # noqa: E731
        print(f"{kind:<6} {eps:>5.2f} {get('oat=0,gate=0,al=0'):>10.3f} {get('oat=1,gate=0,al=0'):>6.3f} "
              f"{get('oat=1,gate=1,al=1'):>9.3f} {get('oat=0,gate=0,al=1', 'ads_accuracy'):>8.3f}")

asr = report.value(task="type", defense="oat=0,gate=0,al=0", attack="graybox", epsilon=None, metric="asr")
print(f"\ngray-box ASR against the undefended model: {asr:.3f}")
