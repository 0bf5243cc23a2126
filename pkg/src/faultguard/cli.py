"""Command-line entry point: ``faultguard <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from faultguard import ads as ads_mod
from faultguard import attacks, harness
from faultguard.dataset import load_windows, save_windows
from faultguard.predictor import (
    evaluate_accuracy,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_online_adversarial,
    train_standard,
)

log = logging.getLogger("faultguard")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    overrides = {"out": args.out, "oat": args.oat, "al": args.al, "gate": args.gate}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.task is not None:
        overrides["tasks"] = [args.task]
    return harness.with_overrides(cfg, **overrides)


def _seed(cfg) -> int:
    return cfg.seeds[0]


def _task(cfg) -> str:
    return cfg.tasks[0]


def _out(cfg) -> Path:
    return Path(cfg.out)


def _dataset(cfg):
    path = _out(cfg) / "dataset"
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no prepared dataset in {path}; run `faultguard prepare` first")
    return load_windows(path)


def _predictor_path(cfg, oat: bool) -> Path:
    return _out(cfg) / f"predictor_{_task(cfg)}_{'oat' if oat else 'standard'}"


def _ads_path(cfg, al: bool) -> Path:
    return _out(cfg) / f"ads_{_task(cfg)}_al{int(al)}"


def _load_predictor(cfg, oat: bool):
    path = _predictor_path(cfg, oat)
    if not path.with_suffix(".npz").is_file():
        raise FileNotFoundError(f"missing trained predictor {path}.npz; run `faultguard train-predictor`")
    return load_checkpoint(path)


def cmd_prepare(cfg, args):
    split_ = harness.load_dataset(cfg, _seed(cfg))
    path = save_windows(split_, _out(cfg) / "dataset")
    print(f"prepared {len(split_.train)}/{len(split_.validation)}/{len(split_.test)} windows in {path}")


def cmd_train_predictor(cfg, args):
    split_ = _dataset(cfg)
    task, seed = _task(cfg), _seed(cfg)
    for oat in ([False, True] if cfg.oat else [False]):
        pcfg = cfg.predictor_config(task, seed, oat)
        model = init_model(pcfg)
        trace = (train_online_adversarial if oat else train_standard)(model, split_, pcfg, task)
        save_checkpoint(model, _predictor_path(cfg, oat), {"task": task, "oat": oat, "train_seconds": trace.seconds})
        acc = evaluate_accuracy(model, split_.test, task)
        print(f"{'oat' if oat else 'standard'} predictor ({task}): test accuracy {acc:.4f}, {trace.seconds:.1f}s")


def cmd_train_ads(cfg, args):
    split_ = _dataset(cfg)
    predictor = _load_predictor(cfg, False)
    for al in ([False, True] if cfg.al else [False]):
        model = ads_mod.train_ads(split_.train, predictor, cfg.ads_config(_task(cfg), _seed(cfg), al))
        ads_mod.save_ads(model, _ads_path(cfg, al))
        passed = ads_mod.legitimate_mask(model.discriminator, split_.test.data, model.config.threshold).mean()
        print(f"ADS al={int(al)}: clean pass rate {passed:.4f}")


def cmd_train_graybox(cfg, args):
    split_ = _dataset(cfg)
    gb = cfg.graybox
    attacker = attacks.train_graybox_generator(split_.train, gb.get("latent_dim", 64), _seed(cfg),
                                               gb.get("epochs", 150), gb.get("learning_rate", 2e-4))
    attacks.save_graybox(attacker, _out(cfg) / "graybox")
    for oat in ([False, True] if cfg.oat else [False]):
        path = _predictor_path(cfg, oat)
        if path.with_suffix(".npz").is_file():
            model = load_checkpoint(path)
            generated = attacks.generate_graybox(attacker, gb.get("n_batches", 1500), gb.get("batch_size", 64),
                                                 _seed(cfg))
            print(f"gray-box ASR vs {'oat' if oat else 'standard'}: {attacks.graybox_asr(model, generated):.3f}")


def cmd_attack(cfg, args):
    split_ = _dataset(cfg)
    model = _load_predictor(cfg, bool(args.target_oat))
    spec = cfg.attack_spec(args.kind, args.epsilon, _seed(cfg))
    batch = attacks.run_attack(model, split_.test.data, split_.test.labels(_task(cfg)), spec)
    out = attacks.save_adversarial(batch, _out(cfg) / f"attack_{spec.kind}_{args.epsilon:g}")
    print(f"{spec.kind} eps={args.epsilon:g}: success rate {batch.success_rate:.4f}; saved to {out}")


def cmd_sweep(cfg, args):
    split_ = _dataset(cfg)
    predictors = {"standard": _load_predictor(cfg, False)}
    if cfg.oat and _predictor_path(cfg, True).with_suffix(".npz").is_file():
        predictors["oat"] = _load_predictor(cfg, True)
    ads_models = {}
    for al in (False, True):
        if _ads_path(cfg, al).with_suffix(".npz").is_file():
            ads_models[al] = ads_mod.load_ads(_ads_path(cfg, al))
    cells = harness.run_epsilon_sweep(cfg, _task(cfg), split_, predictors, ads_models, _seed(cfg))
    report = harness.aggregate(cfg, {(_task(cfg), _seed(cfg)): cells})
    report.provenance = {"config_hash": cfg.hash(), "config": cfg.to_dict(), "seeds": [_seed(cfg)],
                         "dataset_fingerprints": {_task(cfg): split_.fingerprint()}}
    for p in harness.emit_report(report, _out(cfg) / "sweep"):
        print(p)


def cmd_pipeline(cfg, args):
    report = harness.run_full_pipeline(cfg, save_artifacts=args.save_artifacts)
    for p in harness.emit_report(report, _out(cfg)):
        print(p)


def cmd_report(cfg, args):
    src = Path(args.input) if args.input else _out(cfg) / "report.json"
    if not src.is_file():
        raise FileNotFoundError(f"no report at {src}")
    report = (harness.ExperimentReport.from_json(json.loads(src.read_text())) if src.suffix == ".json"
              else harness.read_csv(src))
    for p in harness.emit_report(report, _out(cfg) / "report" if args.input is None else _out(cfg)):
        print(p)


COMMANDS = {
    "prepare": cmd_prepare,
    "train-predictor": cmd_train_predictor,
    "train-ads": cmd_train_ads,
    "train-graybox": cmd_train_graybox,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "pipeline": cmd_pipeline,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--task", choices=["type", "zone"])
    common.add_argument("--out", help="output directory")
    common.add_argument("--oat", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--al", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--gate", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="faultguard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "attack":
            p.add_argument("--kind", required=True, choices=[k.lower() for k in attacks.KINDS] + list(attacks.KINDS))
            p.add_argument("--epsilon", type=float, default=0.2)
            p.add_argument("--target-oat", action="store_true", help="attack the OAT predictor")
        if name == "pipeline":
            p.add_argument("--save-artifacts", action="store_true")
        if name == "report":
            p.add_argument("--input", help="report.json or report.csv to re-emit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except Exception as e:
        print(f"faultguard {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
