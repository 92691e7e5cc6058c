"""Gradient attacks: fgsm, bim, mim, pgd, cw, ead.

All attacks run against any differentiable model (in black-box pipelines
that model is the trained substitute, never the defense itself). Sign
steps use sign(0) = 0. For the budgeted attacks (fgsm/bim/mim/pgd) every
output pixel stays within epsilon of the input and inside the data range.
cw/ead minimize perturbation norms instead and only clip to the range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, ParameterError, UsageError
from .rng import derive_seed

ATTACK_KINDS = ("fgsm", "bim", "mim", "pgd", "cw", "ead")


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.15          # total L-inf budget
    iterations: int = 10           # r, for bim/mim/pgd
    decay: float = 1.0             # momentum decay d
    init_radius: float = 0.031     # pgd random-start radius
    kappa: float = 0.0             # cw/ead confidence margin
    cw_iters: int = 200
    binary_search_steps: int = 5
    beta: float = 0.01             # ead L1 weight
    cw_lr: float = 5e-2
    c_init: float = 1e-2
    c_range: tuple = (1e-3, 1e2)
    mode: str = "untargeted"       # untargeted | targeted
    target: int | None = None      # fixed target label; None = next-class policy
    clip_range: tuple = (-0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ParameterError(f"unknown attack kind '{self.kind}'")
        if self.epsilon < 0:
            raise ParameterError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.beta < 0:
            raise ParameterError("beta must be >= 0")
        if self.mode not in ("untargeted", "targeted"):
            raise ParameterError(f"unknown mode '{self.mode}'")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    l1: np.ndarray
    labels_out: np.ndarray
    targets: np.ndarray | None = None
    loss_trace: np.ndarray | None = None   # (iterations+1, N) attacked-model loss

    def __len__(self):
        return len(self.adversarial)


def _norms(adv: np.ndarray, x: np.ndarray):
    eta = (adv - x).reshape(len(x), -1)
    if eta.size == 0:
        z = np.zeros(len(x))
        return z, z.copy(), z.copy()
    return (np.max(np.abs(eta), axis=1),
            np.sqrt(np.sum(eta * eta, axis=1, dtype=np.float64)),
            np.sum(np.abs(eta), axis=1, dtype=np.float64))


def _per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    zmax = np.max(logits, axis=1, keepdims=True)
    log_z = zmax[:, 0] + np.log(np.sum(np.exp(logits - zmax), axis=1, dtype=np.float64))
    return log_z - logits[np.arange(len(labels)), labels]


def _input_gradient(model, x: np.ndarray, labels: np.ndarray):
    """Gradient of the mean cross-entropy w.r.t. the input, plus per-sample loss."""
    t = Tensor(x, requires_grad=True)
    logits = model.logits_t(t)
    loss = ad.softmax_cross_entropy(logits, labels)
    ad.backward(loss)
    return np.asarray(t.grad), _per_sample_ce(logits.data, labels), logits.data


def resolve_targets(labels: np.ndarray, cfg: AttackConfig, num_classes: int) -> np.ndarray:
    """Target labels for targeted mode: fixed label or next-class policy."""
    labels = np.asarray(labels)
    if cfg.target is not None:
        targets = np.full(labels.shape, int(cfg.target), dtype=np.int64)
    else:
        targets = (labels + 1) % num_classes
    if np.any(targets == labels):
        raise UsageError("targeted attack: target equals true label")
    return targets


def perturb_step(x: np.ndarray, grad: np.ndarray, step: float, anchor: np.ndarray,
                 epsilon: float, clip_range) -> np.ndarray:
    """One sign step, projected onto the L-inf ball around ``anchor`` and
    clamped to the data range."""
    x, grad, anchor = np.asarray(x), np.asarray(grad), np.asarray(anchor)
    if x.shape != grad.shape or x.shape != anchor.shape:
        raise DimensionError(f"perturb_step: shapes differ {x.shape}/{grad.shape}/{anchor.shape}")
    moved = x + step * np.sign(grad)
    if np.isfinite(epsilon):
        moved = np.clip(moved, anchor - epsilon, anchor + epsilon)
    return np.clip(moved, clip_range[0], clip_range[1])


def _finish(model, adv, x, labels, targets, cfg, loss_trace=None) -> AttackResult:
    labels_out = model.predict_labels(adv) if len(adv) else np.zeros(0, dtype=np.int64)
    if cfg.mode == "targeted":
        success = labels_out == targets
    else:
        success = labels_out != labels
    linf, l2, l1 = _norms(adv, x)
    trace = None if loss_trace is None else np.asarray(loss_trace)
    return AttackResult(adv, success, linf, l2, l1, labels_out, targets, trace)


# ---------------------------------------------------------------------------
# budgeted sign attacks

def fgsm(model, batch, labels, cfg: AttackConfig, targets=None) -> AttackResult:
    x = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels)
    if cfg.mode == "targeted":
        targets = resolve_targets(labels, cfg, model.num_classes) if targets is None else targets
        grad, _, _ = _input_gradient(model, x, targets)
        direction = -grad
    else:
        targets = None
        grad, _, _ = _input_gradient(model, x, labels)
        direction = grad
    adv = perturb_step(x, direction, cfg.epsilon, x, cfg.epsilon, cfg.clip_range)
    return _finish(model, adv, x, labels, targets, cfg)


def _iterated_sign_attack(model, batch, labels, cfg, targets, momentum: bool,
                          start: np.ndarray | None = None) -> AttackResult:
    x = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels)
    if cfg.mode == "targeted" and targets is None:
        targets = resolve_targets(labels, cfg, model.num_classes)
    loss_labels = targets if cfg.mode == "targeted" else labels
    sign = -1.0 if cfg.mode == "targeted" else 1.0
    step = cfg.epsilon / cfg.iterations
    adv = x.copy() if start is None else start.copy()
    velocity = np.zeros_like(x)
    trace = []
    for _ in range(cfg.iterations):
        grad, ce, _ = _input_gradient(model, adv, loss_labels)
        trace.append(ce)
        if momentum:
            flat = np.sum(np.abs(grad).reshape(len(x), -1), axis=1)
            flat = np.maximum(flat, 1e-12).reshape((-1,) + (1,) * (x.ndim - 1))
            velocity = cfg.decay * velocity + grad / flat
            direction = sign * velocity
        else:
            direction = sign * grad
        adv = perturb_step(adv, direction, step, x, cfg.epsilon, cfg.clip_range)
    _, ce, _ = _input_gradient(model, adv, loss_labels)
    trace.append(ce)
    return _finish(model, adv, x, labels, targets, cfg, loss_trace=trace)


def bim(model, batch, labels, cfg: AttackConfig, targets=None) -> AttackResult:
    return _iterated_sign_attack(model, batch, labels, cfg, targets, momentum=False)


def mim(model, batch, labels, cfg: AttackConfig, targets=None) -> AttackResult:
    return _iterated_sign_attack(model, batch, labels, cfg, targets, momentum=True)


def pgd(model, batch, labels, cfg: AttackConfig, targets=None, seed: int = 0) -> AttackResult:
    x = np.asarray(batch, dtype=np.float32)
    start = np.empty_like(x)
    for i in range(len(x)):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "pgd-init", i)))
        start[i] = x[i] + rng.uniform(-cfg.init_radius, cfg.init_radius,
                                      size=x.shape[1:]).astype(np.float32)
    start = np.clip(start, x - cfg.epsilon, x + cfg.epsilon)
    start = np.clip(start, cfg.clip_range[0], cfg.clip_range[1])
    return _iterated_sign_attack(model, batch, labels, cfg, targets, momentum=False,
                                 start=start)


# ---------------------------------------------------------------------------
# optimization attacks

def tanh_reparam(omega: np.ndarray, clip_range) -> np.ndarray:
    """Map free variables to the data range; omega = 0 lands on the midpoint."""
    lo, hi = clip_range
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return mid + half * np.tanh(omega)


def _margin_t(logits_t: Tensor, labels, targets, kappa: float, mode: str) -> Tensor:
    """Attack margin clamped below at -kappa; positive while unsuccessful."""
    z = logits_t.data
    n = len(z)
    if mode == "targeted":
        masked = z.copy()
        masked[np.arange(n), targets] = -np.inf
        up, down = np.argmax(masked, axis=1), np.asarray(targets)
    else:
        masked = z.copy()
        masked[np.arange(n), labels] = -np.inf
        up, down = np.asarray(labels), np.argmax(masked, axis=1)
    hi = ad.reshape(ad.take_per_row(logits_t, up[:, None]), (n,))
    lo = ad.reshape(ad.take_per_row(logits_t, down[:, None]), (n,))
    margin = ad.sub(hi, lo)
    return ad.affine(ad.relu(ad.affine(margin, 1.0, kappa)), 1.0, -kappa)


def margin_values(logits: np.ndarray, labels, targets, kappa: float, mode: str) -> np.ndarray:
    n = len(logits)
    if mode == "targeted":
        masked = logits.copy()
        masked[np.arange(n), targets] = -np.inf
        raw = np.max(masked, axis=1) - logits[np.arange(n), targets]
    else:
        masked = logits.copy()
        masked[np.arange(n), labels] = -np.inf
        raw = logits[np.arange(n), labels] - np.max(masked, axis=1)
    return np.maximum(raw, -kappa)


def cw_objective(model, adv, x, labels, c, cfg: AttackConfig, targets=None) -> np.ndarray:
    """Per-sample squared-L2 plus c times the clamped margin."""
    eta = (np.asarray(adv) - np.asarray(x)).reshape(len(x), -1)
    l2sq = np.sum(eta * eta, axis=1, dtype=np.float64)
    logits = model.logits(adv)
    return l2sq + np.asarray(c) * margin_values(logits, labels, targets, cfg.kappa, cfg.mode)


def ead_objective(model, adv, x, labels, c, cfg: AttackConfig, targets=None) -> np.ndarray:
    """cw objective plus beta times the L1 perturbation norm."""
    l1 = np.sum(np.abs(np.asarray(adv) - np.asarray(x)).reshape(len(x), -1),
                axis=1, dtype=np.float64)
    return cw_objective(model, adv, x, labels, c, cfg, targets) + cfg.beta * l1


def _success_now(logits: np.ndarray, labels, targets, mode: str) -> np.ndarray:
    out = np.argmax(logits, axis=1)
    return (out == targets) if mode == "targeted" else (out != labels)


def _update_c(c, lo_c, hi_c, round_success, ever_success, bounds):
    lo_bound, hi_bound = bounds
    for i in range(len(c)):
        if round_success[i]:
            hi_c[i] = min(hi_c[i], c[i])
            c[i] = (lo_c[i] + c[i]) / 2.0
        else:
            lo_c[i] = max(lo_c[i], c[i])
            if ever_success[i]:
                c[i] = (c[i] + hi_c[i]) / 2.0
            else:
                c[i] = min(c[i] * 10.0, hi_bound)
        c[i] = float(np.clip(c[i], lo_bound, hi_bound))


def cw(model, batch, labels, cfg: AttackConfig, targets=None, seed: int = 0) -> AttackResult:
    """L2 attack over a tanh re-parameterization with per-sample c search.

    Returns the lowest-L2 successful iterate per sample, or the final
    iterate flagged unsuccessful.
    """
    x = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels)
    n = len(x)
    if n == 0:
        return _finish(model, x.copy(), x, labels, None, cfg)
    if cfg.mode == "targeted" and targets is None:
        targets = resolve_targets(labels, cfg, model.num_classes)
    lo, hi = cfg.clip_range
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    w0 = np.arctanh(np.clip((x - mid) / half, -1 + 1e-6, 1 - 1e-6)).astype(np.float32)

    c = np.full(n, cfg.c_init)
    lo_c = np.full(n, cfg.c_range[0])
    hi_c = np.full(n, cfg.c_range[1])
    ever_success = np.zeros(n, dtype=bool)
    best_adv = x.copy()
    best_l2 = np.full(n, np.inf)
    last_adv = x.copy()

    for _ in range(cfg.binary_search_steps):
        omega = Tensor(w0.copy(), requires_grad=True)
        opt = ad.Adam([omega], lr=cfg.cw_lr)
        round_success = np.zeros(n, dtype=bool)
        c_t = Tensor(c.astype(np.float32))
        for _ in range(cfg.cw_iters):
            adv_t = ad.affine(ad.tanh(omega), half, mid)
            diff = ad.reshape(ad.sub(adv_t, Tensor(x)), (n, -1))
            l2sq = ad.sum_rows(ad.mul(diff, diff))
            logits_t = model.logits_t(adv_t)
            margin = _margin_t(logits_t, labels, targets, cfg.kappa, cfg.mode)
            obj = ad.sum_all(ad.add(l2sq, ad.mul(c_t, margin)))
            succ = _success_now(logits_t.data, labels, targets, cfg.mode)
            l2_now = np.sqrt(np.maximum(l2sq.data.astype(np.float64), 0.0))
            better = succ & (l2_now < best_l2)
            best_adv[better] = adv_t.data[better]
            best_l2[better] = l2_now[better]
            round_success |= succ
            opt.zero_grad()
            ad.backward(obj)
            opt.step()
            last_adv = adv_t.data
        ever_success |= round_success
        _update_c(c, lo_c, hi_c, round_success, ever_success, cfg.c_range)

    adv = np.where(ever_success[(...,) + (None,) * (x.ndim - 1)], best_adv, last_adv)
    adv = np.clip(adv.astype(np.float32), lo, hi)
    return _finish(model, adv, x, labels, targets, cfg)


def _soft_threshold(v: np.ndarray, amount: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - amount, 0.0)


def ead(model, batch, labels, cfg: AttackConfig, targets=None, seed: int = 0) -> AttackResult:
    """Elastic-net attack: cw objective plus an L1 term, optimized by
    gradient steps with iterative soft-thresholding of the perturbation.

    Components of the perturbation with magnitude <= beta collapse to zero
    at every step; the best (lowest L1) successful iterate is returned.
    """
    x = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels)
    n = len(x)
    if n == 0:
        return _finish(model, x.copy(), x, labels, None, cfg)
    if cfg.mode == "targeted" and targets is None:
        targets = resolve_targets(labels, cfg, model.num_classes)
    lo, hi = cfg.clip_range

    c = np.full(n, cfg.c_init)
    lo_c = np.full(n, cfg.c_range[0])
    hi_c = np.full(n, cfg.c_range[1])
    ever_success = np.zeros(n, dtype=bool)
    best_adv = x.copy()
    best_l1 = np.full(n, np.inf)
    last_adv = x.copy()

    for _ in range(cfg.binary_search_steps):
        adv = x.copy()
        round_success = np.zeros(n, dtype=bool)
        c_t = Tensor(c.astype(np.float32))
        for _ in range(cfg.cw_iters):
            t = Tensor(adv, requires_grad=True)
            diff = ad.reshape(ad.sub(t, Tensor(x)), (n, -1))
            l2sq = ad.sum_rows(ad.mul(diff, diff))
            logits_t = model.logits_t(t)
            margin = _margin_t(logits_t, labels, targets, cfg.kappa, cfg.mode)
            obj = ad.sum_all(ad.add(l2sq, ad.mul(c_t, margin)))
            succ = _success_now(logits_t.data, labels, targets, cfg.mode)
            l1_now = np.sum(np.abs(adv - x).reshape(n, -1), axis=1, dtype=np.float64)
            better = succ & (l1_now < best_l1)
            best_adv[better] = adv[better]
            best_l1[better] = l1_now[better]
            round_success |= succ
            ad.backward(obj)
            stepped = adv - cfg.cw_lr * np.asarray(t.grad)
            eta = _soft_threshold(stepped - x, cfg.beta)
            adv = np.clip(x + eta, lo, hi).astype(np.float32)
            last_adv = adv
        ever_success |= round_success
        _update_c(c, lo_c, hi_c, round_success, ever_success, cfg.c_range)

    adv = np.where(ever_success[(...,) + (None,) * (x.ndim - 1)], best_adv, last_adv)
    return _finish(model, adv.astype(np.float32), x, labels, targets, cfg)


# ---------------------------------------------------------------------------
# dispatch

_ATTACKS = {"fgsm": fgsm, "bim": bim, "mim": mim, "pgd": pgd, "cw": cw, "ead": ead}


def attack_batch(model, batch, labels, cfg: AttackConfig, seed: int = 0,
                 targets=None) -> AttackResult:
    """Run the configured attack on a batch.

    Untargeted success means the attacked model's label differs from the
    true label; targeted success means it equals the target. The default
    target policy picks the next class, (l + 1) mod K.
    """
    x = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels)
    if len(x) == 0:
        empty = np.zeros(0)
        return AttackResult(x.copy(), np.zeros(0, dtype=bool), empty, empty.copy(),
                            empty.copy(), np.zeros(0, dtype=np.int64))
    fn = _ATTACKS[cfg.kind]
    if cfg.kind in ("pgd", "cw", "ead"):
        return fn(model, x, labels, cfg, targets=targets, seed=seed)
    return fn(model, x, labels, cfg, targets=targets)
