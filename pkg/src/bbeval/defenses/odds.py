"""Statistical noise-response detector over pairwise log-odds.

For an input x with predicted class y, the pairwise log-odds shift under
additive Gaussian noise is g_yz = (z_logit - y_logit)(x + eta) minus the
same at x. Clean calibration data yields per-pair means mu_yz and standard
deviations sigma_yz; a test image's normalized mean shift over many noise
draws is compared against thresholds tau_yz fitted so the clean
false-positive rate of the max-over-z rule matches the requested rate.
Detected inputs are re-labeled with the most implicated class z (or given
the null label in detector-only mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..attacks import AttackConfig, pgd
from ..data import ImageDataset
from ..exceptions import StatisticsError
from ..rng import derive_seed, generator
from .base import NULL_LABEL, Defense

SIGMA_FLOOR = 1e-6


@dataclass
class OddsStatistics:
    mu: np.ndarray          # (K, K) clean mean of g_yz
    sigma: np.ndarray       # (K, K) clean std, floored
    tau: np.ndarray         # (K, K) detection thresholds
    noise_std: float
    draws: int
    fpr_target: float
    mu_adv: np.ndarray | None = None     # diagnostics from the adversarial set
    sigma_adv: np.ndarray | None = None

    def to_tensors(self) -> dict:
        out = {"odds.mu": self.mu, "odds.sigma": self.sigma, "odds.tau": self.tau,
               "odds.meta": np.array([self.noise_std, self.draws, self.fpr_target])}
        if self.mu_adv is not None:
            out["odds.mu_adv"] = self.mu_adv
            out["odds.sigma_adv"] = self.sigma_adv
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "OddsStatistics":
        meta = tensors["odds.meta"]
        return cls(np.asarray(tensors["odds.mu"], dtype=np.float64),
                   np.asarray(tensors["odds.sigma"], dtype=np.float64),
                   np.asarray(tensors["odds.tau"], dtype=np.float64),
                   float(meta[0]), int(round(float(meta[1]))), float(meta[2]),
                   mu_adv=np.asarray(tensors["odds.mu_adv"], dtype=np.float64)
                   if "odds.mu_adv" in tensors else None,
                   sigma_adv=np.asarray(tensors["odds.sigma_adv"], dtype=np.float64)
                   if "odds.sigma_adv" in tensors else None)


def noisy_odds_shifts(model, images: np.ndarray, noise_std: float, draws: int,
                      seed: int):
    """Per-sample noise response: predicted labels y and the (N, draws, K)
    array of logit shifts relative to the predicted class."""
    logits = model.logits(images)
    labels = np.argmax(logits, axis=1)
    base = logits - logits[np.arange(len(images)), labels][:, None]
    shifts = np.empty((len(images), draws, logits.shape[1]))
    for i in range(len(images)):
        rng = generator(seed, "odds-noise", i)
        noisy = images[i][None] + rng.normal(0.0, noise_std,
                                             size=(draws,) + images.shape[1:]).astype(np.float32)
        nz = model.logits(noisy)
        rel = nz - nz[:, labels[i]][:, None]
        shifts[i] = rel - base[i][None, :]
    return labels, shifts


def _pair_statistics(labels, shifts, k, min_per_class):
    """Per-(y, z) mean/std of the shifts, grouped by predicted class y.

    Classes never predicted on the calibration set are left at the neutral
    (0, floor) statistics and reported back so their thresholds can be
    disabled; classes with some but too few samples are an error.
    """
    mu = np.zeros((k, k))
    sigma = np.full((k, k), SIGMA_FLOOR)
    unseen = []
    for y in range(k):
        rows = shifts[labels == y]          # (n_y, draws, K)
        if len(rows) == 0:
            unseen.append(y)
            continue
        if len(rows) < min_per_class:
            raise StatisticsError(f"odds: class {y} has {len(rows)} calibration samples, "
                                  f"need {min_per_class}")
        flat = rows.reshape(-1, k)
        mu[y] = flat.mean(axis=0)
        sigma[y] = np.maximum(flat.std(axis=0), SIGMA_FLOOR)
    return mu, sigma, unseen


def normalized_shift(shifts_one, y, mu, sigma):
    """Mean over draws of (g - mu)/sigma for one sample of predicted class y."""
    return ((shifts_one - mu[y][None, :]) / sigma[y][None, :]).mean(axis=0)


def detection_margins(gbar: np.ndarray, y: int, tau: np.ndarray, k: int):
    """Per-z margins gbar_z - tau_yz with the diagonal removed."""
    margins = gbar - tau[y]
    margins[y] = -np.inf
    return margins


def odds_fit(model, clean_set: ImageDataset, fpr: float, noise_std: float = 0.05,
             draws: int = 64, seed: int = 0, adv_epsilon: float = 0.015,
             adv_iterations: int = 10, adv_set=None, min_per_class: int = 10
             ) -> OddsStatistics:
    """Fit detector statistics on clean data.

    The adversarial companion set (a white-box projected-descent attack on
    the wrapped model unless supplied) only feeds diagnostic statistics;
    thresholds come from clean calibration: per-pair (1 - fpr) quantiles of
    the normalized shifts plus a global offset that pins the calibration
    false-positive rate of the max rule at the target.
    """
    k = model.num_classes
    labels, shifts = noisy_odds_shifts(model, clean_set.images, noise_std, draws,
                                       derive_seed(seed, "fit"))
    mu, sigma, unseen = _pair_statistics(labels, shifts, k, min_per_class)

    n = len(clean_set)
    gbar = np.empty((n, k))
    for i in range(n):
        gbar[i] = normalized_shift(shifts[i], labels[i], mu, sigma)

    tau = np.zeros((k, k))
    for y in range(k):
        rows = gbar[labels == y]
        if len(rows):
            tau[y] = np.quantile(rows, 1.0 - fpr, axis=0, method="higher")
    margins = np.array([np.max(detection_margins(gbar[i], labels[i], tau, k))
                        for i in range(n)])
    offset = float(np.quantile(margins, 1.0 - fpr, method="higher"))
    tau = tau + offset
    for y in unseen:
        tau[y] = np.inf        # cannot calibrate a never-predicted class

    if adv_set is None:
        adv_cfg = AttackConfig(kind="pgd", epsilon=adv_epsilon, iterations=adv_iterations,
                               init_radius=min(adv_epsilon, 0.031))
        adv_set = pgd(model, clean_set.images, clean_set.labels, adv_cfg,
                      seed=derive_seed(seed, "adv")).adversarial
    adv_labels, adv_shifts = noisy_odds_shifts(model, np.asarray(adv_set, dtype=np.float32),
                                               noise_std, draws, derive_seed(seed, "fit-adv"))
    mu_adv, sigma_adv, _ = _pair_statistics(adv_labels, adv_shifts, k, 1)

    return OddsStatistics(mu, sigma, tau, noise_std, draws, fpr,
                          mu_adv=mu_adv, sigma_adv=sigma_adv)


def odds_classify(model, stats: OddsStatistics, x, seed: int = 0,
                  mode: str = "correct"):
    """Classify one image; correct (or null in detector mode) when the
    noise-response test fires."""
    x = np.asarray(x, dtype=np.float32)
    labels, shifts = noisy_odds_shifts(model, x[None], stats.noise_std, stats.draws, seed)
    y = int(labels[0])
    gbar = normalized_shift(shifts[0], y, stats.mu, stats.sigma)
    margins = detection_margins(gbar, y, stats.tau, model.num_classes)
    if np.max(margins) > 0:
        if mode == "detect":
            return NULL_LABEL
        return int(np.argmax(margins))
    return y


class OddsDefense(Defense):
    """Noise-response detector wrapped as a defense.

    ``mode='correct'`` relabels detected inputs (never null);
    ``mode='detect'`` abstains with the null label instead.
    """

    kind = "odds"

    def __init__(self, model, stats: OddsStatistics, mode: str = "correct", seed: int = 0):
        super().__init__(model.num_classes, seed)
        self.model = model
        self.stats = stats
        self.mode = mode

    def classify_batch(self, images, seed=None) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        call_seed = self.seed if seed is None else seed
        out = np.empty(len(images), dtype=np.int64)
        for i in range(len(images)):
            out[i] = odds_classify(self.model, self.stats, images[i],
                                   seed=derive_seed(call_seed, "odds-sample", i),
                                   mode=self.mode)
        return out
