"""Command-line entry point.

Verbs: run (full experiment), train (fit and checkpoint a model),
fit-defense (build a defense and save its artifacts), attack (generate
adversarial examples and report rates), gradcheck (finite-difference
audit), report (convert a saved report between formats).

Exit codes: 0 success, 1 configuration error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint, metrics, runner
from .attacks import attack_batch
from .autodiff import gradient_check
from .data import subset_count
from .exceptions import BBEvalError, ConfigError
from .nn import Model, build_synth_net, desk_defended_spec
from .rng import derive_seed


def override_apply(config: dict, overrides) -> dict:
    """Apply dotted-path KEY=VALUE overrides with type checking.

    The path must already exist; the parsed value must match the existing
    type (ints may widen to float). List elements are addressed by index.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not KEY=VALUE")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = config
        for key in keys[:-1]:
            node = _descend(node, key, path)
        leaf = keys[-1]
        current = _descend(node, leaf, path)
        value = _parse_override(raw, current, path)
        if isinstance(node, list):
            node[int(leaf)] = value
        else:
            node[leaf] = value
    return config


def _descend(node, key, path):
    if isinstance(node, list):
        try:
            return node[int(key)]
        except (ValueError, IndexError) as err:
            raise ConfigError(f"override path '{path}': bad list index '{key}'") from err
    if not isinstance(node, dict) or key not in node:
        raise ConfigError(f"override path '{path}': unknown key '{key}'")
    return node[key]


def _parse_override(raw: str, current, path: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigError(f"override path '{path}': expected bool, got '{raw}'")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError as err:
            raise ConfigError(f"override path '{path}': expected int, got '{raw}'") from err
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError as err:
            raise ConfigError(f"override path '{path}': expected float, got '{raw}'") from err
    if isinstance(current, str):
        return raw
    if isinstance(current, list):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError as err:
            raise ConfigError(f"override path '{path}': expected JSON list, got '{raw}'") from err
        if not isinstance(value, list):
            raise ConfigError(f"override path '{path}': expected list, got '{raw}'")
        return value
    raise ConfigError(f"override path '{path}': unsupported value type {type(current).__name__}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbeval", description=__doc__)
    sub = parser.add_subparsers(dest="verb")

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        p.add_argument("--output", default="out")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--format", choices=("csv", "json"), default=None)

    common(sub.add_parser("run", help="full experiment grid"))
    common(sub.add_parser("train", help="train the base model and checkpoint it"))
    common(sub.add_parser("fit-defense", help="fit one defense, save artifacts"))
    p_attack = sub.add_parser("attack", help="attack the base model, print rates")
    common(p_attack)
    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p_grad.add_argument("--model", choices=("synth", "desk"), default="synth")
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--shape", default="1,12,12")
    p_grad.add_argument("--classes", type=int, default=10)
    p_rep = sub.add_parser("report", help="convert a JSON report")
    p_rep.add_argument("--input", required=True)
    p_rep.add_argument("--format", choices=("csv", "json"), default="csv")
    p_rep.add_argument("--output", default=None)
    return parser


def _resolved_config(args) -> dict:
    cfg = runner.load_config(args.config)
    override_apply(cfg, args.set)
    if args.format:
        cfg["output"]["format"] = args.format
    runner.validate_config(cfg)
    return cfg


def _cmd_run(args) -> int:
    cfg = _resolved_config(args)
    report = runner.run_experiment(cfg, seed=args.seed, jobs=args.jobs,
                                   output_dir=args.output)
    print(f"wrote {len(report)} rows to {args.output}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolved_config(args)
    train_set, test_set = runner.build_dataset(cfg, args.seed)
    model = runner._train_base_model(cfg, train_set, args.seed)
    test_acc = float(np.mean(model.predict_labels(test_set.images) == test_set.labels))
    os.makedirs(args.output, exist_ok=True)
    path = os.path.join(args.output, "model.bbgw")
    checkpoint.save_tensors(model.state_dict(), path)
    with open(os.path.join(args.output, "model_spec.json"), "w") as fh:
        json.dump(model.spec.to_json(), fh, indent=2)
    print(f"test accuracy {test_acc:.4f}; checkpoint at {path}")
    return 0


def _cmd_fit_defense(args) -> int:
    cfg = _resolved_config(args)
    train_set, _ = runner.build_dataset(cfg, args.seed)
    base = runner._train_base_model(cfg, train_set, args.seed)
    d_cfg = cfg["defenses"][0]
    defense = runner.build_defense(d_cfg, base, train_set, cfg, args.seed)
    os.makedirs(args.output, exist_ok=True)
    artifacts = {}
    if hasattr(defense, "stats"):
        artifacts.update(defense.stats.to_tensors())
    if hasattr(defense, "codebook"):
        artifacts.update(defense.codebook.to_tensors())
    if artifacts:
        checkpoint.save_tensors(artifacts, os.path.join(args.output, "defense.bbgw"))
    clean = metrics.defense_accuracy(defense, train_set.images[:200],
                                     train_set.labels[:200],
                                     seed=derive_seed(args.seed, "cli-clean"))
    print(f"fitted {defense.kind}; clean accuracy on 200 train samples {clean:.4f}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _resolved_config(args)
    train_set, test_set = runner.build_dataset(cfg, args.seed)
    model = runner._train_base_model(cfg, train_set, args.seed)
    eval_set = subset_count(test_set, min(cfg["attacks"].get("eval_count", 200),
                                          len(test_set)),
                            derive_seed(args.seed, "eval-subset"))
    for attack_cfg in runner.attack_configs_from(cfg):
        res = attack_batch(model, eval_set.images, eval_set.labels, attack_cfg,
                           seed=derive_seed(args.seed, "cli-attack", attack_cfg.kind))
        acc = float(np.mean(model.predict_labels(res.adversarial) == eval_set.labels))
        print(f"{attack_cfg.kind}: accuracy under attack {acc:.4f}, "
              f"success {res.success.mean():.4f}, max |eta| {res.linf.max():.5f}")
    return 0


def _cmd_gradcheck(args) -> int:
    shape = tuple(int(s) for s in args.shape.split(","))
    if args.model == "synth":
        model = build_synth_net(shape, args.classes, seed=args.seed)
    else:
        model = Model(desk_defended_spec(shape, args.classes), seed=args.seed)
    rng = np.random.Generator(np.random.PCG64(derive_seed(args.seed, "gradcheck-input")))
    x = rng.uniform(-0.5, 0.5, size=(2,) + shape).astype(np.float32)
    report = gradient_check(model, x, tolerance=args.tol, num_coords=60, seed=args.seed)
    print(f"max relative error {report.max_rel_error:.3e} over {report.num_coords} "
          f"coordinates (tolerance {args.tol:g})")
    return 0 if report.passed else 2


def _cmd_report(args) -> int:
    report = metrics.load_report_json(args.input)
    out = args.output or (os.path.splitext(args.input)[0] + f".{args.format}")
    metrics.emit_report(report, args.format, out)
    print(f"wrote {out}")
    return 0


_COMMANDS = {"run": _cmd_run, "train": _cmd_train, "fit-defense": _cmd_fit_defense,
             "attack": _cmd_attack, "gradcheck": _cmd_gradcheck, "report": _cmd_report}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code == 0 else 1
    if args.verb is None:
        parser.print_usage()
        return 1
    try:
        return _COMMANDS[args.verb](args)
    except ConfigError as err:
        print(f"config error [{args.verb}]: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"config error [{args.verb}]: {err}", file=sys.stderr)
        return 1
    except BBEvalError as err:
        print(f"error [{args.verb}] {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError) as err:
        print(f"numeric error [{args.verb}]: {err}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
