"""Substitute-model pipeline: oracle queries, Jacobian-based dataset
augmentation, substitute training, and pure/mixed attack orchestration.

The oracle only ever exposes final class labels (or the null label for
detecting defenses), never score vectors. Null-labeled samples are dropped
before any substitute training or augmentation because the substitute has
no class slot for them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import metrics
from .attacks import attack_batch
from .autodiff import Tensor
from .data import ImageDataset, subset_count, subset_fraction
from .defenses.base import NULL_LABEL, Defense
from .exceptions import HarnessError, ParameterError, UsageError
from .nn import Model, TrainConfig, build_synth_net, train
from .rng import derive_seed

# canonical adversary-strength grid: share of the training set the
# mixed adversary starts from
STRENGTH_FRACTIONS = (0.01, 0.25, 0.5, 0.75, 1.0)


@dataclass
class SyntheticTrainConfig:
    """Knobs of the synthetic-network construction loop."""

    lam: float = 0.1                 # augmentation step size
    rounds: int = 3                  # labeling/training rounds N
    train_config: TrainConfig = field(default_factory=TrainConfig)
    adversary_fraction: float = 1.0
    mode: str = "mixed"              # pure | mixed
    seed_cap: int = 2000             # bounds the 2^N growth at desk scale
    fine_tune: bool = True           # keep weights across rounds; extra rounds
                                     # then never lose the seed-data fit

    def __post_init__(self):
        if self.lam <= 0:
            raise ParameterError("lam must be > 0")
        if self.rounds < 1:
            raise ParameterError("rounds must be >= 1")
        if not 0 < self.adversary_fraction <= 1:
            raise ParameterError("adversary_fraction must be in (0, 1]")
        if self.mode not in ("pure", "mixed"):
            raise ParameterError(f"unknown mode '{self.mode}'")


@dataclass
class SynthLog:
    """Bookkeeping from one substitute construction."""

    mode: str
    set_sizes: list = field(default_factory=list)       # |X_t| per labeling round
    null_counts: list = field(default_factory=list)     # dropped per round
    trained_sizes: list = field(default_factory=list)   # post-filter training sizes
    queries: int = 0


class Oracle:
    """Label-only view of a defense with a query counter and byte-exact cache.

    ``query_count`` counts every submitted image (the accounting the attack
    reports use); ``unique_query_count`` counts distinct images actually
    pushed through the defense. Randomized defenses get a fresh per-call
    seed derived from the oracle seed and call index, and the cache pins
    each image's label to its first answer.
    """

    def __init__(self, defense: Defense, seed: int = 0):
        self.defense = defense
        self.seed = seed
        self.query_count = 0
        self.unique_query_count = 0
        self._cache = {}
        self._calls = 0

    @property
    def num_classes(self):
        return self.defense.num_classes

    def query(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float32)
        self.query_count += len(batch)
        labels = np.empty(len(batch), dtype=np.int64)
        new_idx = []
        keys = []
        for i in range(len(batch)):
            key = batch[i].tobytes()
            keys.append(key)
            cached = self._cache.get(key)
            if cached is None:
                new_idx.append(i)
            else:
                labels[i] = cached
        if new_idx:
            call_seed = derive_seed(self.seed, "oracle-call", self._calls)
            fresh = self.defense.classify_batch(batch[new_idx], seed=call_seed)
            for j, i in zip(range(len(new_idx)), new_idx):
                labels[i] = fresh[j]
                self._cache[keys[i]] = int(fresh[j])
            self.unique_query_count += len(new_idx)
        self._calls += 1
        return labels


def oracle_query(oracle: Oracle, batch) -> np.ndarray:
    return oracle.query(batch)


def jacobian_augment(substitute: Model, batch, oracle_labels, lam: float,
                     clip_range=(-0.5, 0.5)) -> np.ndarray:
    """Double a labeled set with sign-of-score-Jacobian steps.

    Each new point is x + lam * sign(d score[label] / dx), clamped to the
    data range; the originals are kept, so the output is twice the input.
    """
    batch = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(oracle_labels)
    if np.any(labels == NULL_LABEL):
        raise UsageError("jacobian_augment: null-labeled sample reached augmentation")
    t = Tensor(batch, requires_grad=True)
    scores = ad.softmax(substitute.logits_t(t))
    picked = ad.take_per_row(scores, labels[:, None])
    ad.backward(ad.sum_all(picked))
    steps = lam * np.sign(np.asarray(t.grad))
    moved = np.clip(batch + steps, clip_range[0], clip_range[1]).astype(np.float32)
    return np.concatenate([batch, moved])


def train_synthetic(oracle: Oracle, seed_data: ImageDataset,
                    cfg: SyntheticTrainConfig, seed: int = 0):
    """Build a substitute per the oracle-based construction loop.

    Mixed mode: for N rounds, label the current set via the oracle, drop
    null-labeled samples, train the substitute, then augment. Pure mode
    skips the oracle entirely and trains once on the ground-truth labels.
    Returns (substitute, SynthLog).
    """
    if len(seed_data) > cfg.seed_cap:
        seed_data = subset_count(seed_data, cfg.seed_cap, derive_seed(seed, "seed-cap"))
    k = oracle.num_classes
    shape = tuple(seed_data.shape)
    log = SynthLog(mode=cfg.mode)

    if cfg.mode == "pure":
        substitute = build_synth_net(shape, k, seed=derive_seed(seed, "substitute", 0))
        tc = replace(cfg.train_config, seed=derive_seed(seed, "train", 0))
        train(substitute, seed_data, tc)
        log.trained_sizes.append(len(seed_data))
        return substitute, log

    queries_before = oracle.query_count
    images = seed_data.images.copy()
    substitute = None
    for round_no in range(cfg.rounds):
        labels = oracle.query(images)
        log.set_sizes.append(len(images))
        keep = labels != NULL_LABEL
        log.null_counts.append(int(np.sum(~keep)))
        if not np.any(keep):
            raise HarnessError("oracle starves substitute: every sample was null-labeled")
        assert not np.any(labels[keep] == NULL_LABEL)
        train_set = ImageDataset(images[keep], labels[keep], num_classes=k)
        log.trained_sizes.append(len(train_set))
        if substitute is None or not cfg.fine_tune:
            substitute = build_synth_net(shape, k, seed=derive_seed(seed, "substitute", round_no))
        tc = replace(cfg.train_config, seed=derive_seed(seed, "train", round_no))
        train(substitute, train_set, tc)
        if round_no < cfg.rounds - 1:
            doubled = jacobian_augment(substitute, images[keep], labels[keep], cfg.lam)
            fresh = doubled[int(np.sum(keep)):]
            images = np.concatenate([images, fresh])
    log.queries = oracle.query_count - queries_before
    return substitute, log


def label_agreement(model: Model, defense: Defense, images, seed: int = 0) -> float:
    """Fraction of images where the substitute matches the defense label.

    Null outputs never match, so they count as disagreement.
    """
    mine = model.predict_labels(images)
    theirs = defense.classify_batch(images, seed=derive_seed(seed, "agreement"))
    return float(np.mean(mine == theirs))


# ---------------------------------------------------------------------------
# attack orchestration

def _mode_rows(defense: Defense, substitute: Model, eval_set: ImageDataset,
               attack_cfgs, adversary: str, fraction: float, queries: int,
               seed: int, clean_acc: float, label: str):
    rows = []
    for cfg in attack_cfgs:
        for mode in ("untargeted", "targeted"):
            mode_cfg = replace(cfg, mode=mode)
            result = attack_batch(substitute, eval_set.images, eval_set.labels,
                                  mode_cfg, seed=derive_seed(seed, "attack", cfg.kind, mode))
            d_acc = metrics.defense_accuracy(defense, result.adversarial, eval_set.labels,
                                             seed=derive_seed(seed, "eval", cfg.kind, mode))
            rows.append(metrics.ReportRow(
                defense=label, attack=cfg.kind,
                mode="U" if mode == "untargeted" else "T",
                adversary=adversary, fraction=fraction,
                clean_acc=clean_acc, defense_acc=d_acc,
                vanilla_acc=float("nan"), improvement=float("nan"),
                queries=queries, seed=seed))
    return rows


def run_pure_attack(defense: Defense, train_data: ImageDataset, eval_set: ImageDataset,
                    attack_cfgs, synth_cfg: SyntheticTrainConfig, seed: int = 0,
                    label: str | None = None):
    """Pure black-box: substitute trained on ground-truth labels, zero queries.

    Adversarial examples are generated on the substitute and evaluated
    against the defense. One row per (attack, mode).
    """
    pure_cfg = replace(synth_cfg, mode="pure")
    oracle = Oracle(defense, seed=derive_seed(seed, "oracle"))
    substitute, _ = train_synthetic(oracle, train_data, pure_cfg, seed=seed)
    assert oracle.query_count == 0
    clean = metrics.defense_accuracy(defense, eval_set.images, eval_set.labels,
                                     seed=derive_seed(seed, "clean"))
    return _mode_rows(defense, substitute, eval_set, attack_cfgs, "pure", 1.0, 0,
                      seed, clean, label or defense.kind), substitute


def run_mixed_attack(defense: Defense, train_data: ImageDataset, eval_set: ImageDataset,
                     attack_cfgs, synth_cfg: SyntheticTrainConfig, fraction: float,
                     seed: int = 0, label: str | None = None):
    """Mixed black-box at a given adversary strength (training-set fraction)."""
    seed_data = subset_fraction(train_data, fraction, derive_seed(seed, "fraction", fraction))
    mixed_cfg = replace(synth_cfg, mode="mixed", adversary_fraction=fraction)
    oracle = Oracle(defense, seed=derive_seed(seed, "oracle"))
    substitute, log = train_synthetic(oracle, seed_data, mixed_cfg, seed=seed)
    clean = metrics.defense_accuracy(defense, eval_set.images, eval_set.labels,
                                     seed=derive_seed(seed, "clean"))
    return _mode_rows(defense, substitute, eval_set, attack_cfgs, "mixed", fraction,
                      log.queries, seed, clean, label or defense.kind), substitute
