"""Config-driven experiment orchestrator.

A single JSON config declares the dataset, the defended model and its
training, the defense list, the adversary strengths, the attack grid, and
output options. One root seed drives every derived stream, so re-running a
config reproduces the report byte for byte.
"""

from __future__ import annotations

import copy
import json
import os
from concurrent.futures import ProcessPoolExecutor

from . import blackbox, metrics
from .attacks import ATTACK_KINDS, AttackConfig
from .data import ImageDataset, subset_count, synth_dataset, load_idx, load_cifar_bin
from .defenses import (VanillaDefense, fit_bart, fit_buzz, fit_distc, fit_ecoc,
                       fit_kwta, odds_fit, OddsDefense, FdDefense)
from .exceptions import ConfigError
from .nn import (AdpConfig, Model, ModelSpec, TrainConfig, desk_defended_spec,
                 train, train_adp_ensemble)
from .rng import derive_seed

DEFENSE_KINDS = ("vanilla", "bart", "fd", "buzz", "odds", "ecoc", "adp", "distc", "kwta")


def default_config() -> dict:
    return {
        "dataset": {"kind": "synthetic", "n_train": 1200, "n_test": 400,
                    "classes": 10, "shape": [1, 12, 12], "noise": 0.1,
                    "pattern_seed": 0},
        "model": {"train": {"learning_rate": 1e-3, "batch_size": 64, "epochs": 6,
                            "augmentation": "none"}},
        "defenses": [{"kind": "vanilla"}],
        "adversaries": {"pure": True, "mixed_fractions": [],
                        "lambda": 0.1, "rounds": 3, "seed_cap": 2000,
                        "fine_tune": True,
                        "substitute_train": {"learning_rate": 1e-3, "batch_size": 64,
                                             "epochs": 5, "augmentation": "none"}},
        "attacks": {"kinds": ["fgsm"], "epsilon": 0.15, "iterations": 10,
                    "decay": 1.0, "init_radius": 0.031, "kappa": 0.0,
                    "cw_iters": 100, "binary_search_steps": 4, "beta": 0.01,
                    "eval_count": 200},
        "output": {"format": "csv"},
    }


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    cfg = default_config()
    _deep_update(cfg, user)
    return cfg


def _deep_update(base: dict, extra: dict):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def defense_label(d_cfg: dict) -> str:
    """Row label for a defense entry; an explicit id allows several variants
    of the same kind in one grid."""
    return d_cfg.get("id", d_cfg["kind"])


def validate_config(cfg: dict):
    """Reject unknown defense/attack ids and malformed sections before any
    training starts."""
    labels = set()
    for d in cfg["defenses"]:
        if d.get("kind") not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense kind '{d.get('kind')}' "
                              f"(known: {', '.join(DEFENSE_KINDS)})")
        label = defense_label(d)
        if label in labels:
            raise ConfigError(f"duplicate defense id '{label}'; give variants "
                              "distinct \"id\" values")
        labels.add(label)
    for kind in cfg["attacks"]["kinds"]:
        if kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind '{kind}' "
                              f"(known: {', '.join(ATTACK_KINDS)})")
    for frac in cfg["adversaries"]["mixed_fractions"]:
        if not 0 < frac <= 1:
            raise ConfigError(f"mixed fraction {frac} out of (0, 1]")
    if cfg["dataset"]["kind"] not in ("synthetic", "idx", "cifar_bin"):
        raise ConfigError(f"unknown dataset kind '{cfg['dataset']['kind']}'")
    if cfg["output"].get("format", "csv") not in ("csv", "json"):
        raise ConfigError(f"unknown output format '{cfg['output'].get('format')}'")
    return cfg


def enumerate_cells(cfg: dict) -> list:
    """Row keys (defense, adversary, fraction, attack, mode) the report will
    contain, in emission order."""
    adversaries = []
    if cfg["adversaries"].get("pure", True):
        adversaries.append(("pure", 1.0))
    adversaries += [("mixed", f) for f in cfg["adversaries"]["mixed_fractions"]]
    cells = []
    for d in cfg["defenses"]:
        for adversary, fraction in adversaries:
            for kind in cfg["attacks"]["kinds"]:
                for mode in ("U", "T"):
                    cells.append((defense_label(d), adversary, fraction, kind, mode))
    return cells


# ---------------------------------------------------------------------------
# building blocks

def build_dataset(cfg: dict, seed: int):
    spec = cfg["dataset"]
    if spec["kind"] == "synthetic":
        shape = tuple(spec["shape"])
        train_set = synth_dataset(spec["n_train"], spec["classes"], shape,
                                  seed=derive_seed(seed, "train-data"),
                                  noise=spec["noise"], pattern_seed=spec["pattern_seed"])
        test_set = synth_dataset(spec["n_test"], spec["classes"], shape,
                                 seed=derive_seed(seed, "test-data"),
                                 noise=spec["noise"], pattern_seed=spec["pattern_seed"])
        return train_set, test_set
    if spec["kind"] == "idx":
        train_set = load_idx(spec["train_images"], spec["train_labels"])
        test_set = load_idx(spec["test_images"], spec["test_labels"])
        return train_set, test_set
    train_set = load_cifar_bin(spec["train_paths"])
    test_set = load_cifar_bin(spec["test_paths"])
    return train_set, test_set


def train_config_from(cfg_section: dict, seed: int) -> TrainConfig:
    return TrainConfig(learning_rate=cfg_section.get("learning_rate", 1e-3),
                       batch_size=cfg_section.get("batch_size", 64),
                       epochs=cfg_section.get("epochs", 6),
                       augmentation=cfg_section.get("augmentation", "none"),
                       seed=seed)


def attack_configs_from(cfg: dict) -> list:
    a = cfg["attacks"]
    return [AttackConfig(kind=kind, epsilon=a["epsilon"], iterations=a["iterations"],
                         decay=a["decay"], init_radius=a["init_radius"],
                         kappa=a["kappa"], cw_iters=a["cw_iters"],
                         binary_search_steps=a["binary_search_steps"], beta=a["beta"])
            for kind in a["kinds"]]


def build_defense(d_cfg: dict, base_model: Model, train_set: ImageDataset,
                  cfg: dict, seed: int):
    kind = d_cfg["kind"]
    d_seed = derive_seed(seed, "defense", defense_label(d_cfg))
    fit_epochs = d_cfg.get("epochs", cfg["model"]["train"].get("epochs", 6))
    fit_tc = train_config_from({**cfg["model"]["train"], "epochs": fit_epochs}, d_seed)
    if kind == "vanilla":
        return VanillaDefense(base_model, seed=d_seed)
    if kind == "bart":
        return fit_bart(train_set, base_model, d_cfg.get("t_max", 5), fit_tc, seed=d_seed)
    if kind == "fd":
        return FdDefense(base_model, qs_as=d_cfg.get("qs_as", 40),
                         qs_md=d_cfg.get("qs_md", 70),
                         band_split=d_cfg.get("band_split", 16), seed=d_seed)
    if kind == "buzz":
        return fit_buzz(train_set, base_model, d_cfg.get("members", 2), fit_tc, seed=d_seed)
    if kind == "odds":
        calib = subset_count(train_set, min(len(train_set), d_cfg.get("calibration", 600)),
                             derive_seed(d_seed, "calib"))
        stats = odds_fit(base_model, calib, fpr=d_cfg.get("fpr", 0.1),
                         noise_std=d_cfg.get("noise_std", 0.05),
                         draws=d_cfg.get("draws", 64), seed=d_seed,
                         adv_epsilon=d_cfg.get("adv_epsilon", 0.015))
        return OddsDefense(base_model, stats, mode=d_cfg.get("mode", "correct"),
                           seed=d_seed)
    if kind == "ecoc":
        return fit_ecoc(train_set, bits=d_cfg.get("bits", 16),
                        members=d_cfg.get("members", 4),
                        min_distance=d_cfg.get("min_distance", 4),
                        config=fit_tc, seed=d_seed)
    if kind == "adp":
        adp = AdpConfig(members=d_cfg.get("members", 2),
                        alpha=d_cfg.get("alpha", 2.0), beta=d_cfg.get("beta", 0.5))
        specs = [base_model.spec] * adp.members
        ensemble, _ = train_adp_ensemble(specs, train_set, fit_tc, adp)
        return _EnsembleDefense(ensemble, seed=d_seed)
    if kind == "distc":
        h = train_set.shape[1]
        default_range = [max(2, int(h * 0.6)), max(2, h - 1)]
        return fit_distc(base_model, train_set,
                         d_cfg.get("resize_range", default_range),
                         d_cfg.get("nsamp", 50), fit_tc, seed=d_seed)
    if kind == "kwta":
        return fit_kwta(base_model, train_set, fit_tc,
                        keep=d_cfg.get("keep", 0.2), seed=d_seed)
    raise ConfigError(f"unknown defense kind '{kind}'")


class _EnsembleDefense(VanillaDefense):
    kind = "adp"


# ---------------------------------------------------------------------------
# experiment loop

def _defense_rows(defense, label, train_set, eval_set, attack_cfgs, synth_base, cfg, seed):
    rows = []
    if cfg["adversaries"].get("pure", True):
        pure_rows, _ = blackbox.run_pure_attack(
            defense, train_set, eval_set, attack_cfgs, synth_base,
            seed=derive_seed(seed, "pure", label), label=label)
        rows += pure_rows
    for fraction in cfg["adversaries"]["mixed_fractions"]:
        mixed_rows, _ = blackbox.run_mixed_attack(
            defense, train_set, eval_set, attack_cfgs, synth_base, fraction,
            seed=derive_seed(seed, "mixed", label, fraction), label=label)
        rows += mixed_rows
    return rows


def _cell_worker(args):
    cfg, d_cfg, seed = args
    label = defense_label(d_cfg)
    train_set, test_set = build_dataset(cfg, seed)
    base_model = _train_base_model(cfg, train_set, seed)
    defense = build_defense(d_cfg, base_model, train_set, cfg, seed)
    eval_set = _eval_subset(cfg, test_set, seed)
    synth_base = _synth_base(cfg)
    attack_cfgs = attack_configs_from(cfg)
    return _defense_rows(defense, label, train_set, eval_set, attack_cfgs,
                         synth_base, cfg, seed)


def _train_base_model(cfg, train_set, seed):
    spec_json = cfg["model"].get("spec")
    if spec_json is not None:
        spec = ModelSpec.from_json(spec_json)
    else:
        spec = desk_defended_spec(train_set.shape, train_set.num_classes)
    model = Model(spec, seed=derive_seed(seed, "base-model"))
    tc = train_config_from(cfg["model"]["train"], derive_seed(seed, "base-train"))
    train(model, train_set, tc)
    return model


def _eval_subset(cfg, test_set, seed):
    count = min(cfg["attacks"].get("eval_count", 200), len(test_set))
    return subset_count(test_set, count, derive_seed(seed, "eval-subset"))


def _synth_base(cfg):
    adv = cfg["adversaries"]
    return blackbox.SyntheticTrainConfig(
        lam=adv.get("lambda", 0.1), rounds=adv.get("rounds", 3),
        train_config=train_config_from(adv["substitute_train"], 0),
        seed_cap=adv.get("seed_cap", 2000), fine_tune=adv.get("fine_tune", True))


def run_experiment(cfg: dict, seed: int = 0, jobs: int = 1, output_dir=None
                   ) -> metrics.ExperimentReport:
    """Execute the full defense x adversary x attack grid.

    The undefended baseline is always computed (whether or not "vanilla"
    appears in the defense list) so every row's improvement column has its
    reference. Emits report files plus the resolved config when
    ``output_dir`` is given.
    """
    validate_config(cfg)
    cfg = copy.deepcopy(cfg)

    train_set, test_set = build_dataset(cfg, seed)
    base_model = _train_base_model(cfg, train_set, seed)
    eval_set = _eval_subset(cfg, test_set, seed)
    synth_base = _synth_base(cfg)
    attack_cfgs = attack_configs_from(cfg)

    vanilla = VanillaDefense(base_model, seed=derive_seed(seed, "defense", "vanilla"))
    vanilla_rows = _defense_rows(vanilla, "vanilla", train_set, eval_set, attack_cfgs,
                                 synth_base, cfg, seed)
    metrics.finalize_rows(vanilla_rows, vanilla_rows)

    rows = []
    other = [d for d in cfg["defenses"] if defense_label(d) != "vanilla"]
    if jobs > 1 and len(other) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_cell_worker, [(cfg, d, seed) for d in other]))
    else:
        batches = [_cell_worker((cfg, d, seed)) for d in other]
    ordered = {defense_label(d): batch for d, batch in zip(other, batches)}
    for d in cfg["defenses"]:
        if defense_label(d) == "vanilla":
            rows += vanilla_rows
        else:
            rows += metrics.finalize_rows(ordered[defense_label(d)], vanilla_rows)

    report = metrics.ExperimentReport(rows)
    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        fmt = cfg["output"].get("format", "csv")
        metrics.emit_report(report, fmt, os.path.join(output_dir, f"report.{fmt}"))
        resolved = {"config": cfg, "seed": seed}
        tmp = os.path.join(output_dir, "resolved_config.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(resolved, fh, indent=2, sort_keys=True)
        os.replace(tmp, os.path.join(output_dir, "resolved_config.json"))
    return report
