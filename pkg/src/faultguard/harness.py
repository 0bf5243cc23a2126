"""
Experiment orchestration: metrics, epsilon sweeps, the full pipeline and
report emission.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from faultguard import ads as ads_mod
from faultguard import attacks
from faultguard.dataset import (
    N_FAULT_TYPES,
    N_FAULT_ZONES,
    DatasetSplit,
    ingest,
    make_windows,
    split,
    synth_dataset,
)
from faultguard.predictor import (
    PredictorConfig,
    PredictorModel,
    as_tensor,
    init_model,
    predict,
    train_online_adversarial,
    train_standard,
)

log = logging.getLogger(__name__)

DEFAULT_EPSILONS = tuple(round(0.05 * i, 2) for i in range(1, 11))
TIMING_METRICS = ("train_seconds",)
TASK_CLASSES = {"type": N_FAULT_TYPES, "zone": N_FAULT_ZONES}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


# combinatorial accuracy

def _check_acc(accuracy, batches):
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must be in [0, 1], got {accuracy}")
    if int(batches) != batches or batches < 1:
        raise ValueError(f"batches must be an integer >= 1, got {batches}")


def combinatorial_accuracy(accuracy: float, batches: int) -> float:
    """Probability that at least one of ``batches`` independent classifications is correct."""
    _check_acc(accuracy, batches)
    return 1.0 - (1.0 - accuracy) ** int(batches)


def false_alarm_probability(accuracy: float, batches: int) -> float:
    _check_acc(accuracy, batches)
    return (1.0 - accuracy) ** int(batches)


@dataclass(frozen=True)
class CombinatorialAccuracyPoint:
    accuracy: float
    batches: int
    value: float


def combinatorial_curve(accuracy: float, max_batches: int = 10) -> list[CombinatorialAccuracyPoint]:
    return [CombinatorialAccuracyPoint(accuracy, k, combinatorial_accuracy(accuracy, k))
            for k in range(1, max_batches + 1)]


# configuration

@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"source": "synthetic", "n_classes": 4,
                                                   "n_windows": 400, "separation": 3.0})
    tasks: list = field(default_factory=lambda: ["type"])
    predictor: dict = field(default_factory=lambda: {"hidden_size": 64})
    oat_epochs: int | None = 60
    ads: dict = field(default_factory=dict)
    graybox: dict = field(default_factory=lambda: {"epochs": 150, "latent_dim": 64, "learning_rate": 2e-4,
                                                   "n_batches": 1500, "batch_size": 64})
    attacks: list = field(default_factory=lambda: list(attacks.KINDS))
    epsilons: list = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    attack_params: dict = field(default_factory=dict)
    oat: bool = True
    al: bool = True
    gate: bool = True
    notification_batches: int = 2
    max_batches: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs/default"

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("at least one task must be selected")
        for t in self.tasks:
            if t not in TASK_CLASSES:
                raise ValueError(f"unknown task {t!r}; expected 'type' or 'zone'")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError("epsilon grid values must be positive")
        for k in self.attacks:
            if k.upper() not in attacks.KINDS:
                raise ValueError(f"unknown attack {k!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        known = {f.name for f in fields(PredictorConfig)}
        bad = set(self.predictor) - known
        if bad:
            raise ValueError(f"unknown predictor keys: {sorted(bad)}")
        bad = set(self.ads) - {f.name for f in fields(ads_mod.AdsConfig)}
        if bad:
            raise ValueError(f"unknown ads keys: {sorted(bad)}")
        bad = set(self.graybox) - {"epochs", "latent_dim", "learning_rate", "n_batches", "batch_size"}
        if bad:
            raise ValueError(f"unknown graybox keys: {sorted(bad)}")
        bad = set(self.attack_params) - {"steps", "cw_steps", "cw_c", "cw_kappa", "cw_lr"}
        if bad:
            raise ValueError(f"unknown attack_params keys: {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            return cls.from_dict(json.loads(text))
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return cls.from_dict(tomllib.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def predictor_config(self, task: str, seed: int, oat: bool = False) -> PredictorConfig:
        kw = {"n_classes": self.n_classes(task), **self.predictor, "seed": seed}
        if oat and self.oat_epochs is not None:
            kw["epochs"] = self.oat_epochs
        return PredictorConfig(**kw)

    def ads_config(self, task: str, seed: int, al: bool) -> ads_mod.AdsConfig:
        return ads_mod.AdsConfig(**{**self.ads, "task": task, "seed": seed, "adversarial_learning": al})

    def n_classes(self, task: str) -> int:
        if self.dataset.get("source") == "synthetic":
            n = int(self.dataset.get("n_classes", 4))
            return n if task == "type" else min(n, N_FAULT_ZONES)
        return TASK_CLASSES[task]

    def attack_spec(self, kind: str, epsilon: float, seed: int) -> attacks.AttackSpec:
        p = self.attack_params
        if kind.upper() == "CW":
            return attacks.AttackSpec("CW", 0.0, p.get("cw_steps", 100), 0.0, cw_c=p.get("cw_c", 1.0),
                                      cw_kappa=p.get("cw_kappa", 0.0), cw_lr=p.get("cw_lr", 0.01), seed=seed)
        steps = 1 if kind.upper() in ("FGSM", "RFGSM") else p.get("steps", 10)
        return attacks.AttackSpec(kind, epsilon, steps, seed=seed)


def load_dataset(config: ExperimentConfig, seed: int) -> DatasetSplit:
    d = dict(config.dataset)
    source = d.pop("source", "synthetic")
    if source == "synthetic":
        allowed = {"n_classes", "n_windows", "separation", "noise", "supply_amplitude", "samples_per_cycle"}
        bad = set(d) - allowed
        if bad:
            raise ValueError(f"unknown synthetic dataset keys: {sorted(bad)}")
        return synth_dataset(seed=seed, **d)
    if source == "csv":
        bad = set(d) - {"path", "window", "stride", "shuffle"}
        if bad:
            raise ValueError(f"unknown csv dataset keys: {sorted(bad)}")
        windows = make_windows(ingest(d["path"]), d.get("window", 16), d.get("stride", 8))
        return split(windows, seed=seed, shuffle=d.get("shuffle", False))
    raise ValueError(f"unknown dataset source {source!r}")


# report

@dataclass
class ReportRow:
    task: str
    defense: str
    attack: str
    epsilon: float | None
    metric: str
    value: float
    std: float
    runtime: float
    config_hash: str

    def key(self) -> tuple:
        return (self.task, self.defense, self.attack, self.epsilon, self.metric)


ROW_FIELDS = [f.name for f in fields(ReportRow)]


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, *args, **kw) -> ReportRow:
        row = ReportRow(*args, **kw)
        self.rows.append(row)
        return row

    def metric_rows(self) -> list[tuple]:
        """Rows without wall-clock data; these are reproducible from config and seed."""
        return [
            (r.task, r.defense, r.attack, r.epsilon, r.metric, r.value, r.std, r.config_hash)
            for r in self.rows
            if r.metric not in TIMING_METRICS
        ]

    def select(self, **kw) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def value(self, **kw) -> float:
        rows = self.select(**kw)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {kw}")
        return rows[0].value

    def to_json(self) -> dict:
        nested: dict = {}
        for r in self.rows:
            eps = "none" if r.epsilon is None else repr(r.epsilon)
            cell = nested.setdefault(r.task, {}).setdefault(r.defense, {}).setdefault(r.attack, {})
            cell.setdefault(eps, {})[r.metric] = {
                "value": r.value, "std": r.std, "runtime": r.runtime, "config_hash": r.config_hash,
            }
        return {"provenance": self.provenance, "results": nested}

    @classmethod
    def from_json(cls, d: dict) -> ExperimentReport:
        rep = cls(provenance=d.get("provenance", {}))
        for task, by_def in d["results"].items():
            for defense, by_atk in by_def.items():
                for attack, by_eps in by_atk.items():
                    for eps, by_metric in by_eps.items():
                        for metric, v in by_metric.items():
                            rep.add(task, defense, attack, None if eps == "none" else float(eps), metric,
                                    v["value"], v["std"], v["runtime"], v["config_hash"])
        return rep


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(report: ExperimentReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROW_FIELDS)
        for r in report.rows:
            w.writerow([_fmt(getattr(r, k)) for k in ROW_FIELDS])
    return path


def read_csv(path) -> ExperimentReport:
    rep = ExperimentReport()
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rep.add(rec["task"], rec["defense"], rec["attack"],
                    None if rec["epsilon"] == "" else float(rec["epsilon"]), rec["metric"],
                    float(rec["value"]), float(rec["std"]), float(rec["runtime"]), rec["config_hash"])
    return rep


def emit_report(report: ExperimentReport, out_dir, formats=("csv", "json", "plots")) -> list[Path]:
    """Write report.csv, report.json and per-figure plot-data CSVs."""
    if not report.rows:
        raise ValueError("empty report")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"output directory {out_dir} is not writable: {e}") from e
    written = []
    if "csv" in formats:
        written.append(write_csv(report, out_dir / "report.csv"))
    if "json" in formats:
        p = out_dir / "report.json"
        p.write_text(json.dumps(report.to_json(), indent=2))
        written.append(p)
    if "plots" in formats:
        written.extend(_plot_files(report, out_dir / "plots"))
    return written


def _plot_files(report: ExperimentReport, plot_dir: Path) -> list[Path]:
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    sweep = [r for r in report.rows if r.epsilon is not None and r.metric in ("accuracy", "ads_accuracy")]
    groups: dict = {}
    for r in sweep:
        groups.setdefault((r.task, r.defense, r.metric), []).append(r)
    for (task, defense, metric), rows in sorted(groups.items()):
        kinds = sorted({r.attack for r in rows})
        eps = sorted({r.epsilon for r in rows})
        table = {(r.attack, r.epsilon): r for r in rows}
        p = plot_dir / f"{metric}_vs_epsilon_{task}_{_slug(defense)}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", *kinds])
            for e in eps:
                w.writerow([repr(e), *(_fmt(table[(k, e)].value) if (k, e) in table else "" for k in kinds)])
        written.append(p)
    curves: dict = {}
    for r in report.rows:
        if r.metric.startswith("combinatorial_accuracy_b"):
            curves.setdefault((r.task, r.defense), []).append((int(r.metric.rsplit("_b", 1)[1]), r.value))
    for (task, defense), pts in sorted(curves.items()):
        p = plot_dir / f"combinatorial_{task}_{_slug(defense)}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batches", "combinatorial_accuracy"])
            for k, v in sorted(pts):
                w.writerow([k, repr(v)])
        written.append(p)
    return written


def _slug(s: str) -> str:
    return s.replace(",", "_").replace("=", "")


# evaluation

def defense_label(oat: bool = False, gate: bool = False, al: bool = False) -> str:
    return f"oat={int(oat)},gate={int(gate)},al={int(al)}"


def gated_accuracy(model: PredictorModel, windows: np.ndarray, labels: np.ndarray, discriminator,
                   threshold: float, adversarial: bool) -> float:
    """End-to-end accuracy with the gate in front of the predictor.

    Rejected adversarial windows count as defended; rejected legitimate ones as errors.
    """
    passed = ads_mod.legitimate_mask(discriminator, windows, threshold)
    correct = predict(model, windows) == labels
    ok = np.where(passed, correct, adversarial)
    return float(ok.mean())


def run_epsilon_sweep(config: ExperimentConfig, task: str, split_: DatasetSplit, predictors: dict,
                      ads_models: dict, seed: int, target: str = "standard") -> list[tuple]:
    """Craft every (attack, epsilon) test set and score models and detectors on it.

    ``predictors`` maps a variant name ("standard", "oat") to a trained model;
    ``ads_models`` maps an AL flag to a trained ``AdsModel``. Adversarial sets
    for the detector rows are crafted against ``predictors[target]``.
    Returns (defense, attack, epsilon, metric, value, seconds) tuples.
    """
    if not predictors:
        raise PipelineError("sweep", ValueError("no trained predictor supplied"))
    test = split_.test
    x = as_tensor(test.data, next(iter(predictors.values())))
    y = torch.as_tensor(test.labels(task))
    threshold = config.ads_config(task, seed, True).threshold
    cells = []
    cw_cache: dict = {}
    for kind in config.attacks:
        kind = kind.upper()
        for eps in sorted(config.epsilons):
            crafted = {}
            for name, model in predictors.items():
                t0 = time.perf_counter()
                if kind == "CW":
                    if name not in cw_cache:
                        cw_cache[name] = attacks.craft_tensor(model, x, y, config.attack_spec(kind, eps, seed))
                    adv = cw_cache[name]
                else:
                    adv = attacks.craft_tensor(model, x, y, config.attack_spec(kind, eps, seed))
                crafted[name] = adv.numpy()
                acc = float((predict(model, crafted[name]) == test.labels(task)).mean())
                dt = time.perf_counter() - t0
                oat = name == "oat"
                cells.append((defense_label(oat=oat), kind, eps, "accuracy", acc, dt))
                if config.gate and ads_models:
                    disc = ads_models[max(ads_models)].discriminator
                    g = gated_accuracy(model, crafted[name], test.labels(task), disc, threshold, adversarial=True)
                    cells.append((defense_label(oat=oat, gate=True, al=max(ads_models)), kind, eps, "accuracy", g,
                                  dt))
            for al, ads in sorted(ads_models.items()):
                t0 = time.perf_counter()
                acc = ads_mod.evaluate_ads(ads.discriminator, test.data, {kind: crafted[target]}, threshold)[kind]
                cells.append((defense_label(al=al), kind, eps, "ads_accuracy", acc, time.perf_counter() - t0))
    return cells


def _run_seed(config: ExperimentConfig, task: str, seed: int, artifacts_dir: Path | None = None) -> list[tuple]:
    stage = "dataset"
    try:
        split_ = load_dataset(config, seed)
        cells = []
        stage = "predictor"
        predictors: dict = {}
        variants = [False, True] if config.oat else [False]
        for oat in variants:
            cfg = config.predictor_config(task, seed, oat)
            model = init_model(cfg)
            trace = (train_online_adversarial if oat else train_standard)(model, split_, cfg, task)
            name = "oat" if oat else "standard"
            predictors[name] = model
            cells.append((defense_label(oat=oat), "clean", None, "train_seconds", trace.seconds, trace.seconds))
            acc = float((predict(model, split_.test.data) == split_.test.labels(task)).mean())
            cells.append((defense_label(oat=oat), "clean", None, "accuracy", acc, 0.0))
            if artifacts_dir is not None:
                from faultguard.predictor import save_checkpoint

                save_checkpoint(model, artifacts_dir / f"predictor_{task}_{name}_seed{seed}")

        stage = "ads"
        ads_models: dict = {}
        if config.gate or config.al:
            for al in ([False, True] if config.al else [False]):
                t0 = time.perf_counter()
                ads_models[al] = ads_mod.train_ads(split_.train, predictors["standard"],
                                                   config.ads_config(task, seed, al))
                dt = time.perf_counter() - t0
                cells.append((defense_label(al=al), "clean", None, "train_seconds", dt, dt))
                if artifacts_dir is not None:
                    ads_mod.save_ads(ads_models[al], artifacts_dir / f"ads_{task}_al{int(al)}_seed{seed}")
        threshold = config.ads_config(task, seed, True).threshold
        if ads_models:
            for al, ads in ads_models.items():
                passed = ads_mod.legitimate_mask(ads.discriminator, split_.test.data, threshold)
                cells.append((defense_label(al=al), "clean", None, "gate_pass_rate", float(passed.mean()), 0.0))
            if config.gate:
                disc = ads_models[max(ads_models)].discriminator
                for name, model in predictors.items():
                    g = gated_accuracy(model, split_.test.data, split_.test.labels(task), disc, threshold, False)
                    cells.append((defense_label(oat=name == "oat", gate=True, al=max(ads_models)), "clean", None,
                                  "accuracy", g, 0.0))

        stage = "graybox"
        gb = config.graybox
        t0 = time.perf_counter()
        attacker = attacks.train_graybox_generator(split_.train, gb.get("latent_dim", 64), seed,
                                                   gb.get("epochs", 150), gb.get("learning_rate", 2e-4))
        dt = time.perf_counter() - t0
        cells.append(("graybox", "graybox", None, "train_seconds", dt, dt))
        generated = attacks.generate_graybox(attacker, gb.get("n_batches", 1500), gb.get("batch_size", 64), seed)
        for name, model in predictors.items():
            asr = attacks.graybox_asr(model, generated, model.config.n_classes)
            cells.append((defense_label(oat=name == "oat"), "graybox", None, "asr", asr, 0.0))
        for al, ads in sorted(ads_models.items()):
            acc = ads_mod.evaluate_ads(ads.discriminator, split_.test.data, {"graybox": generated.windows},
                                       threshold)["graybox"]
            cells.append((defense_label(al=al), "graybox", None, "ads_accuracy", acc, 0.0))

        stage = "sweep"
        cells.extend(run_epsilon_sweep(config, task, split_, predictors, ads_models, seed))

        stage = "combinatorial"
        for name in predictors:
            acc = next(c[4] for c in cells if c[0] == defense_label(oat=name == "oat") and c[1] == "clean"
                       and c[3] == "accuracy")
            for pt in combinatorial_curve(acc, config.max_batches):
                cells.append((defense_label(oat=name == "oat"), "clean", None,
                              f"combinatorial_accuracy_b{pt.batches}", pt.value, 0.0))
            cells.append((defense_label(oat=name == "oat"), "clean", None, "false_alarm_probability",
                          false_alarm_probability(acc, config.notification_batches), 0.0))
        return cells
    except PipelineError:
        raise
    except Exception as e:  # stage-tagged diagnostics
        raise PipelineError(stage, e) from e


def aggregate(config: ExperimentConfig, per_seed: dict) -> ExperimentReport:
    """Fold per-seed (task, cell) results into mean/std rows, preserving first-seen order."""
    h = config.hash()
    report = ExperimentReport()
    groups: dict = {}
    for (task, _seed), cells in per_seed.items():
        for defense, attack, eps, metric, value, secs in cells:
            groups.setdefault((task, defense, attack, eps, metric), []).append((value, secs))
    for (task, defense, attack, eps, metric), vals in groups.items():
        v = np.array([a for a, _ in vals], dtype=np.float64)
        s = np.array([b for _, b in vals], dtype=np.float64)
        report.add(task, defense, attack, eps, metric, float(v.mean()), float(v.std()), float(s.mean()), h)
    return report


def run_full_pipeline(config: ExperimentConfig, save_artifacts: bool = False) -> ExperimentReport:
    """Train everything, evaluate every row family, aggregate over seeds."""
    started = time.time()
    artifacts_dir = Path(config.out) / "artifacts" if save_artifacts else None
    per_seed = {}
    fingerprints = {}
    for task in config.tasks:
        for seed in config.seeds:
            log.info("pipeline task=%s seed=%d", task, seed)
            per_seed[(task, seed)] = _run_seed(config, task, seed, artifacts_dir)
            fingerprints[f"{task}/{seed}"] = load_dataset(config, seed).fingerprint()
    report = aggregate(config, per_seed)
    report.provenance = {
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "seeds": list(config.seeds),
        "dataset_fingerprints": fingerprints,
        "started": started,
        "finished": time.time(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    return report


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(config, **kw)
