"""Command-line entry point: gen / train / attack / evaluate / report.

One experiment is one JSON config file; a few flags can override single
keys.  Every command derives all randomness from the config seed, so
rerunning a config reproduces its outputs byte for byte.  Outputs land in
a fresh run directory named by the config hash and a timestamp.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import data, defenses, evaluation, nn
from .attacks import GREY_BOX, WHITE_BOX, AttackConfig, outcomes_to_rows, run_attack_suite

WORKERS_ENV = "MALROBUST_WORKERS"


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"seed", "output_dir", "workers", "dataset", "model", "defenses",
             "attacks", "threat_model", "surrogate", "evaluation"}
_DATASET_KEYS = {"synthetic", "paths", "split"}
_SYNTH_KEYS = {"dim", "classes", "per_class", "flip_noise", "seed", "class_densities"}
_PATH_KEYS = {"train", "val", "test", "policy"}
_MODEL_KEYS = {"hidden", "activation", "epochs", "batch_size", "lr"}
_DEFENSE_KEYS = {"label", "kind", "flags", "config"}
_FLAG_KEYS = {"use_dae", "use_binarization", "known_manipulation_set"}
_DEFENSE_CFG_KEYS = {"inner_lr", "inner_steps", "restarts", "noise_ratio_max",
                     "subspace_ratio", "ensemble_size", "data_fraction",
                     "oversample_ratio", "epochs", "batch_size", "lr",
                     "hidden", "activation", "latent_dim"}
_ATTACK_KEYS = {"name", "max_steps", "step_size", "epsilon_ball", "ead_beta",
                "ead_kappa", "ead_c", "mimicry_candidates",
                "mimicry_selection", "seed"}
_EVAL_KEYS = {"attack_pool", "positive_class"}


def _check_keys(section, allowed, where):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def validate_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    cfg.setdefault("seed", 0)
    cfg.setdefault("output_dir", "runs")
    cfg.setdefault("threat_model", WHITE_BOX)
    if cfg["threat_model"] not in (WHITE_BOX, GREY_BOX):
        raise ConfigError(f"unknown threat_model {cfg['threat_model']!r}")
    ds = cfg.get("dataset", {})
    _check_keys(ds, _DATASET_KEYS, "dataset")
    if "synthetic" in ds:
        _check_keys(ds["synthetic"], _SYNTH_KEYS, "dataset.synthetic")
    if "paths" in ds:
        _check_keys(ds["paths"], _PATH_KEYS, "dataset.paths")
    if "model" in cfg:
        _check_keys(cfg["model"], _MODEL_KEYS, "model")
    for i, entry in enumerate(cfg.get("defenses", [])):
        _check_keys(entry, _DEFENSE_KEYS, f"defenses[{i}]")
        if "label" not in entry:
            raise ConfigError(f"defenses[{i}] needs a label")
        _check_keys(entry.get("flags", {}), _FLAG_KEYS, f"defenses[{i}].flags")
        _check_keys(entry.get("config", {}), _DEFENSE_CFG_KEYS, f"defenses[{i}].config")
    labels = [e["label"] for e in cfg.get("defenses", [])]
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate defense labels")
    for i, entry in enumerate(cfg.get("attacks", [])):
        _check_keys(entry, _ATTACK_KEYS, f"attacks[{i}]")
        if "name" not in entry:
            raise ConfigError(f"attacks[{i}] needs a name")
    if "surrogate" in cfg:
        _check_keys(cfg["surrogate"], _MODEL_KEYS, "surrogate")
    if "evaluation" in cfg:
        _check_keys(cfg["evaluation"], _EVAL_KEYS, "evaluation")
    return cfg


def load_config(path, overrides=None) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    cfg = validate_config(cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()[:12]


def make_run_dir(cfg: dict, command: str, out_dir=None) -> str:
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        return out_dir
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(cfg["output_dir"], f"{command}-{config_hash(cfg)}-{stamp}")
    path = base
    n = 1
    while os.path.exists(path):
        path = f"{base}-{n}"
        n += 1
    os.makedirs(path)
    return path


def _workers(cfg, args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    if cfg.get("workers"):
        return int(cfg["workers"])
    return int(os.environ.get(WORKERS_ENV, "1"))


def _load_dataset_files(cfg):
    paths = cfg.get("dataset", {}).get("paths")
    if not paths:
        raise ConfigError("dataset.paths required for this command")
    for key in ("train", "test", "policy"):
        if key not in paths:
            raise ConfigError(f"dataset.paths.{key} missing")
        if not os.path.exists(paths[key]):
            raise ConfigError(f"dataset file not found: {paths[key]}")
    train = data.read_sparse(paths["train"])
    test = data.read_sparse(paths["test"])
    val = data.read_sparse(paths["val"]) if paths.get("val") else None
    policy = data.read_policy(paths["policy"])
    if policy.dim != train.dim:
        raise ConfigError("policy dimension does not match dataset")
    return train, val, test, policy


def _defense_specs(cfg):
    entries = cfg.get("defenses") or [{"label": "basic", "kind": "plain"}]
    model_defaults = cfg.get("model", {})
    specs = []
    for entry in entries:
        raw = dict(entry.get("config", {}))
        for key in ("hidden", "epochs", "batch_size", "lr", "activation"):
            if key not in raw and key in model_defaults:
                raw[key] = model_defaults[key]
        if "hidden" in raw:
            raw["hidden"] = tuple(raw["hidden"])
        dc = defenses.DefenseConfig(seed=cfg["seed"], **raw)
        flags = entry.get("flags", {})
        specs.append(evaluation.DefenseSpec(
            label=entry["label"], kind=entry.get("kind", "plain"), config=dc,
            use_dae=flags.get("use_dae", False),
            use_binarization=flags.get("use_binarization", False),
            known_manipulation_set=flags.get("known_manipulation_set", True)))
    return specs


def _attack_configs(cfg):
    configs = []
    for entry in cfg.get("attacks", []):
        kwargs = {k: v for k, v in entry.items() if k != "name"}
        kwargs.setdefault("seed", cfg["seed"])
        configs.append(AttackConfig.for_attack(entry["name"], **kwargs))
    return configs


def cmd_gen(cfg: dict, out_dir=None) -> str:
    synth = cfg.get("dataset", {}).get("synthetic")
    if not synth:
        raise ConfigError("dataset.synthetic required for gen")
    run_dir = make_run_dir(cfg, "gen", out_dir)
    dataset, policy = data.generate_synthetic(
        dim=synth.get("dim", 200), classes=synth.get("classes", 2),
        per_class=synth.get("per_class", 500),
        flip_noise=synth.get("flip_noise", 0.05),
        seed=synth.get("seed", cfg["seed"]),
        class_densities=synth.get("class_densities"))
    fractions = cfg.get("dataset", {}).get("split", [0.6, 0.2, 0.2])
    train, val, test = data.split(dataset, fractions, seed=nn.child_seed(cfg["seed"], 3))
    data.write_sparse(os.path.join(run_dir, "train.txt"), train)
    data.write_sparse(os.path.join(run_dir, "val.txt"), val)
    data.write_sparse(os.path.join(run_dir, "test.txt"), test)
    data.write_policy(os.path.join(run_dir, "policy.txt"), policy)
    print(f"dim={dataset.dim} classes={dataset.class_count}")
    for name, part in (("train", train), ("val", val), ("test", test)):
        counts = np.bincount(part.y, minlength=part.class_count).tolist()
        print(f"{name}: n={len(part)} class_counts={counts}")
    print(run_dir)
    return run_dir


def cmd_train(cfg: dict, out_dir=None) -> str:
    train, _, _, policy = _load_dataset_files(cfg)
    specs = _defense_specs(cfg)
    run_dir = make_run_dir(cfg, "train", out_dir)
    traces = {}
    for k, spec in enumerate(specs):
        clf, trace = evaluation.train_defense(spec, train, policy,
                                              seed=nn.child_seed(cfg["seed"], k))
        traces[spec.label] = trace
        if spec.kind == "plain":
            nn.save_model(os.path.join(run_dir, f"{spec.label}.json"), clf)
        elif spec.kind == "hardened":
            defenses.save_hardened(os.path.join(run_dir, f"{spec.label}.json"), clf)
        else:
            defenses.save_ensemble(os.path.join(run_dir, spec.label), clf)
        print(f"trained {spec.label} ({spec.kind})")
    if cfg["threat_model"] == GREY_BOX and "surrogate" in cfg:
        surrogate = evaluation.train_surrogate(train, nn.child_seed(cfg["seed"], 999),
                                               cfg["surrogate"])
        nn.save_model(os.path.join(run_dir, "surrogate.json"), surrogate)
        print("trained surrogate")
    with open(os.path.join(run_dir, "trace.json"), "w", encoding="utf-8") as fh:
        json.dump(traces, fh, sort_keys=True, indent=2)
    print(run_dir)
    return run_dir


def _load_trained(cfg, models_dir):
    specs = _defense_specs(cfg)
    models = {}
    for spec in specs:
        if spec.kind == "ensemble":
            path = os.path.join(models_dir, spec.label, "manifest.json")
            if not os.path.exists(path):
                raise ConfigError(f"missing ensemble checkpoint {path}")
            models[spec.label] = defenses.load_ensemble(path)
        else:
            path = os.path.join(models_dir, f"{spec.label}.json")
            if not os.path.exists(path):
                raise ConfigError(f"missing checkpoint {path}")
            if spec.kind == "plain":
                models[spec.label] = nn.load_model(path)
            else:
                models[spec.label] = defenses.load_hardened(path)
    surrogate = None
    if cfg["threat_model"] == GREY_BOX:
        spath = os.path.join(models_dir, "surrogate.json")
        if not os.path.exists(spath):
            raise ConfigError("grey-box run needs a surrogate checkpoint "
                              f"(expected {spath})")
        surrogate = nn.load_model(spath)
    return models, surrogate


def cmd_attack(cfg: dict, models_dir, out_dir=None, workers=1) -> str:
    train, _, test, policy = _load_dataset_files(cfg)
    models, surrogate = _load_trained(cfg, models_dir)
    configs = _attack_configs(cfg)
    if not configs:
        raise ConfigError("no attacks configured")
    eval_cfg = cfg.get("evaluation", {})
    positive = eval_cfg.get("positive_class", 1)
    pool_idx = evaluation.select_attack_pool(
        test, positive, eval_cfg.get("attack_pool", 800),
        nn.child_seed(cfg["seed"], 777))
    Xp, yp = test.X[pool_idx], test.y[pool_idx]
    benign_pool = train.X[train.y != positive]
    run_dir = make_run_dir(cfg, "attack", out_dir)
    for label, clf in models.items():
        results = run_attack_suite(clf, Xp, yp, policy, configs,
                                   threat_model=cfg["threat_model"],
                                   surrogate=surrogate, benign_pool=benign_pool,
                                   workers=workers)
        rows = outcomes_to_rows(results)
        path = os.path.join(run_dir, f"attacks_{label}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["attack", "example_id",
                                                    "success", "flips", "l1",
                                                    "l2", "linf", "steps_used"])
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {path} ({len(rows)} rows)")
    print(run_dir)
    return run_dir


def cmd_evaluate(cfg: dict, models_dir, out_dir=None, workers=1) -> str:
    train, _, test, policy = _load_dataset_files(cfg)
    models, surrogate = _load_trained(cfg, models_dir)
    configs = _attack_configs(cfg)
    eval_cfg = cfg.get("evaluation", {})
    report = evaluation.evaluate_models(
        models, train, test, policy, configs,
        threat_model=cfg["threat_model"], seed=cfg["seed"],
        surrogate=surrogate, attack_pool=eval_cfg.get("attack_pool", 800),
        positive_class=eval_cfg.get("positive_class", 1), workers=workers)
    report["metadata"]["config_hash"] = config_hash(cfg)
    run_dir = make_run_dir(cfg, "evaluate", out_dir)
    report_path = os.path.join(run_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(evaluation._jsonable(report), fh, sort_keys=True, indent=2)
    table = evaluation.report_table(report)
    with open(os.path.join(run_dir, "report_table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    print(run_dir)
    return run_dir


def cmd_report(report_path, csv_path=None) -> None:
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    table = evaluation.report_table(report)
    print(table)
    if csv_path:
        labels = list(report["defenses"].keys())
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attack"] + labels)
            names = ["clean_test", "no_attack"]
            for label in labels:
                for name in report["defenses"][label]["attacks"]:
                    if name not in names:
                        names.append(name)
            for name in names:
                row = [name]
                for label in labels:
                    block = report["defenses"][label]
                    if name in ("clean_test", "no_attack"):
                        row.append(block[name]["accuracy"])
                    else:
                        row.append(block["attacks"].get(name, {}).get("accuracy", ""))
                writer.writerow(row)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="malrobust",
                                     description="evasion attacks and hardened "
                                                 "training for binary feature vectors")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("-c", "--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--output-dir", default=None, help="override output_dir")
        p.add_argument("--threat-model", default=None,
                       choices=[WHITE_BOX, GREY_BOX], help="override threat model")
        p.add_argument("--out", default=None, help="exact output directory")

    p_gen = sub.add_parser("gen", help="generate synthetic dataset + policy files")
    add_common(p_gen)
    p_train = sub.add_parser("train", help="train configured defenses")
    add_common(p_train)
    for name, helptext in (("attack", "run the attack suite against checkpoints"),
                           ("evaluate", "full metrics report")):
        p = sub.add_parser(name, help=helptext)
        add_common(p)
        p.add_argument("--models", required=True, help="directory holding checkpoints")
        p.add_argument("--workers", type=int, default=None,
                       help=f"parallel attack workers (or ${WORKERS_ENV})")
    p_rep = sub.add_parser("report", help="render a saved report")
    p_rep.add_argument("report", help="report.json path")
    p_rep.add_argument("--csv", default=None, help="also write a CSV table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.report, args.csv)
            return 0
        overrides = {"seed": args.seed, "output_dir": args.output_dir,
                     "threat_model": args.threat_model}
        cfg = load_config(args.config, overrides)
        if args.command == "gen":
            cmd_gen(cfg, out_dir=args.out)
        elif args.command == "train":
            cmd_train(cfg, out_dir=args.out)
        elif args.command == "attack":
            cmd_attack(cfg, args.models, out_dir=args.out, workers=_workers(cfg, args))
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.models, out_dir=args.out, workers=_workers(cfg, args))
        return 0
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
