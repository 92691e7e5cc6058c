"""Model definitions and trainers.

A Model is a plain layer list over the autodiff core: conv / relu / kwta /
maxpool / dense, with a configurable output head (softmax scores for
classifiers, tanh for code-emitting ensembles). Builders cover the fixed
substitute architecture, a small desk-scale defended CNN, and k-winner
variants; trainers cover plain Adam training and the diversity-regularized
ensemble.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ImageDataset
from .exceptions import DimensionError, ParameterError, UsageError
from .rng import derive_seed, generator

SUBSTITUTE_NAME = "substitute-cnn"


# ---------------------------------------------------------------------------
# specs

@dataclass
class LayerSpec:
    kind: str                 # conv | relu | kwta | maxpool | dense
    channels: int = 0         # conv output channels
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    window: int = 2           # maxpool
    width: int = 0            # dense
    keep: float = 0.2         # kwta keep fraction

    def to_json(self):
        return {k: v for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class ModelSpec:
    layers: list
    num_classes: int
    input_shape: tuple

    def to_json(self):
        return {"layers": [l.to_json() for l in self.layers],
                "num_classes": self.num_classes,
                "input_shape": list(self.input_shape)}

    @classmethod
    def from_json(cls, obj):
        return cls([LayerSpec.from_json(l) for l in obj["layers"]],
                   int(obj["num_classes"]), tuple(obj["input_shape"]))

    def activation_shapes(self):
        """Shapes after each layer; raises if the chain is inconsistent."""
        shape = tuple(self.input_shape)
        out = []
        for spec in self.layers:
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise DimensionError("conv layer needs (C, H, W) input")
                c, h, w = shape
                hp, wp = h + 2 * spec.padding, w + 2 * spec.padding
                if spec.kernel > hp or spec.kernel > wp:
                    raise DimensionError(f"conv kernel {spec.kernel} exceeds input {h}x{w} "
                                         f"with padding {spec.padding}")
                ho = (hp - spec.kernel) // spec.stride + 1
                wo = (wp - spec.kernel) // spec.stride + 1
                shape = (spec.channels, ho, wo)
            elif spec.kind == "maxpool":
                c, h, w = shape
                if h % spec.window or w % spec.window:
                    raise DimensionError(f"maxpool window {spec.window} does not divide {h}x{w}")
                shape = (c, h // spec.window, w // spec.window)
            elif spec.kind == "dense":
                shape = (spec.width,)
            elif spec.kind in ("relu", "kwta"):
                pass
            else:
                raise ParameterError(f"unknown layer kind '{spec.kind}'")
            out.append(shape)
        return out

    def validate(self):
        shapes = self.activation_shapes()
        last = self.layers[-1] if self.layers else None
        if last is None or last.kind != "dense" or last.width != self.num_classes:
            raise DimensionError("final layer must be dense with width == num_classes")
        return shapes


def conv_block(channels):
    return [LayerSpec("conv", channels=channels), LayerSpec("relu")]


def substitute_spec(input_shape, num_classes) -> ModelSpec:
    """The fixed substitute CNN: 2x conv64, pool, 2x conv128, pool, 2x dense256.

    Convolutions are shape-preserving (3x3, padding 1), so the input needs
    spatial extents of at least 8 that two 2x poolings divide evenly.
    """
    c, h, w = input_shape
    if min(h, w) < 8 or h % 4 or w % 4:
        raise DimensionError(f"substitute net needs extents >= 8 divisible by 4, got {h}x{w}")
    layers = (conv_block(64) + conv_block(64) + [LayerSpec("maxpool")]
              + conv_block(128) + conv_block(128) + [LayerSpec("maxpool")]
              + [LayerSpec("dense", width=256), LayerSpec("relu"),
                 LayerSpec("dense", width=256), LayerSpec("relu"),
                 LayerSpec("dense", width=num_classes)])
    return ModelSpec(layers, num_classes, tuple(input_shape))


def desk_defended_spec(input_shape, num_classes) -> ModelSpec:
    """Small defended CNN: 2x conv32, pool, 2x conv64, pool, dense128."""
    c, h, w = input_shape
    if min(h, w) < 8 or h % 4 or w % 4:
        raise DimensionError(f"desk CNN needs extents >= 8 divisible by 4, got {h}x{w}")
    layers = (conv_block(32) + conv_block(32) + [LayerSpec("maxpool")]
              + conv_block(64) + conv_block(64) + [LayerSpec("maxpool")]
              + [LayerSpec("dense", width=128), LayerSpec("relu"),
                 LayerSpec("dense", width=num_classes)])
    return ModelSpec(layers, num_classes, tuple(input_shape))


def with_kwta(spec: ModelSpec, keep: float = 0.2) -> ModelSpec:
    """Swap every relu for a k-winner-take-all layer with the given keep rate."""
    if not 0 < keep <= 1:
        raise ParameterError(f"kwta keep fraction {keep} out of (0, 1]")
    layers = [replace(l, kind="kwta", keep=keep) if l.kind == "relu" else replace(l)
              for l in spec.layers]
    return ModelSpec(layers, spec.num_classes, spec.input_shape)


# ---------------------------------------------------------------------------
# model

class Model:
    """Sequential network over the autodiff ops.

    ``head`` selects the output mapping applied on top of the final dense
    layer: "softmax" for probability scores, "tanh" for code activations,
    "linear" for raw outputs.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, head: str = "softmax",
                 _params=None):
        spec.validate()
        self.spec = spec
        self.head = head
        self.num_classes = spec.num_classes
        self.seed = seed
        self.params = {}
        if _params is not None:
            self.params = _params
            return
        shape = tuple(spec.input_shape)
        for i, layer in enumerate(spec.layers):
            rng = generator(seed, "init", i)
            if layer.kind == "conv":
                c_in = shape[0]
                fan_in = c_in * layer.kernel * layer.kernel
                w = rng.standard_normal((layer.channels, c_in, layer.kernel, layer.kernel))
                w = (w * math.sqrt(2.0 / fan_in)).astype(np.float32)
                self.params[f"L{i}.w"] = Tensor(w, requires_grad=True)
                self.params[f"L{i}.b"] = Tensor(np.zeros(layer.channels, np.float32),
                                                requires_grad=True)
            elif layer.kind == "dense":
                d_in = int(np.prod(shape))
                w = rng.standard_normal((d_in, layer.width))
                w = (w * math.sqrt(2.0 / d_in)).astype(np.float32)
                self.params[f"L{i}.w"] = Tensor(w, requires_grad=True)
                self.params[f"L{i}.b"] = Tensor(np.zeros(layer.width, np.float32),
                                                requires_grad=True)
            shape = spec.activation_shapes()[i]

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict:
        return {name: np.array(p.data) for name, p in self.params.items()}

    def load_state_dict(self, state: dict):
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
        return self

    def cast(self, dtype) -> "Model":
        params = {n: Tensor(p.data.astype(dtype), requires_grad=True)
                  for n, p in self.params.items()}
        m = Model(self.spec, seed=self.seed, head=self.head, _params=params)
        return m

    def copy(self) -> "Model":
        params = {n: Tensor(p.data.copy(), requires_grad=True)
                  for n, p in self.params.items()}
        return Model(self.spec, seed=self.seed, head=self.head, _params=params)

    # -- forward ------------------------------------------------------------

    def logits_t(self, x: Tensor) -> Tensor:
        t = x
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                t = ad.add_bias(ad.conv2d(t, self.params[f"L{i}.w"],
                                          stride=layer.stride, padding=layer.padding),
                                self.params[f"L{i}.b"])
            elif layer.kind == "relu":
                t = ad.relu(t)
            elif layer.kind == "kwta":
                d = int(np.prod(t.data.shape[1:]))
                k = max(1, int(layer.keep * d))
                t = ad.kwta(t, k)
            elif layer.kind == "maxpool":
                t = ad.maxpool2d(t, layer.window)
            elif layer.kind == "dense":
                if t.data.ndim > 2:
                    t = ad.reshape(t, (t.data.shape[0], -1))
                t = ad.add_bias(ad.matmul(t, self.params[f"L{i}.w"]),
                                self.params[f"L{i}.b"])
        return t

    def output_t(self, x: Tensor) -> Tensor:
        z = self.logits_t(x)
        if self.head == "softmax":
            return ad.softmax(z)
        if self.head == "tanh":
            return ad.tanh(z)
        return z

    def _batched(self, x, fn, chunk=256):
        x = np.asarray(x, dtype=np.float32)
        outs = [fn(Tensor(x[i:i + chunk])).data for i in range(0, len(x), chunk)]
        if not outs:
            return np.zeros((0, self.num_classes), dtype=np.float32)
        return np.concatenate(outs)

    def logits(self, x) -> np.ndarray:
        return self._batched(x, self.logits_t)

    def activation_pattern(self, x):
        """Discrete routing decisions of a forward pass: relu signs, pool
        argmaxes, kwta survivor sets. Two nearby inputs with equal patterns
        lie on the same smooth piece of the network."""
        t = Tensor(np.asarray(x))
        pats = []
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "relu":
                pats.append(t.data > 0)
            elif layer.kind == "kwta":
                d = int(np.prod(t.data.shape[1:]))
                k = max(1, int(layer.keep * d))
                flat = t.data.reshape(t.data.shape[0], d)
                order = np.argsort(-flat, axis=1, kind="stable")
                pats.append(np.sort(order[:, :k], axis=1))
            elif layer.kind == "maxpool":
                n, c, h, w = t.data.shape
                win = layer.window
                tiles = t.data.reshape(n, c, h // win, win, w // win, win)
                tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // win, w // win, -1)
                pats.append(np.argmax(tiles, axis=-1))
            t = _apply_layer(self, i, t)
        return pats

    def scores(self, x) -> np.ndarray:
        return self._batched(x, self.output_t)

    def predict_labels(self, x) -> np.ndarray:
        return np.argmax(self.scores(x), axis=1)


def predict_scores(model, batch) -> np.ndarray:
    """Score vectors for a batch; rows sum to 1 for softmax heads."""
    return model.scores(batch)


def predict_label(model, x) -> int:
    """Lowest-index argmax label for a single image."""
    arr = np.asarray(x)
    if arr.ndim == len(model.spec.input_shape):
        arr = arr[None]
    return int(np.argmax(model.scores(arr)[0]))


def build_synth_net(input_shape, num_classes, seed: int = 0) -> Model:
    return Model(substitute_spec(input_shape, num_classes), seed=seed)


def build_defended_net(spec: ModelSpec, seed: int = 0) -> Model:
    return Model(spec, seed=seed)


def kwta_margins(model: Model, x) -> float:
    """Smallest gap between the kept and first-dropped activation across
    all kwta layers; large margins keep finite-difference checks away from
    the discontinuity."""
    t = Tensor(np.asarray(x, dtype=np.float32))
    margin = np.inf
    for i, layer in enumerate(model.spec.layers):
        if layer.kind == "kwta":
            pre = t
            d = int(np.prod(pre.data.shape[1:]))
            k = max(1, int(layer.keep * d))
            flat = np.sort(pre.data.reshape(pre.data.shape[0], d), axis=1)[:, ::-1]
            if k < d:
                margin = min(margin, float(np.min(flat[:, k - 1] - flat[:, k])))
        t = _apply_layer(model, i, t)
    return margin


def _apply_layer(model: Model, i: int, t: Tensor) -> Tensor:
    layer = model.spec.layers[i]
    if layer.kind == "conv":
        return ad.add_bias(ad.conv2d(t, model.params[f"L{i}.w"], stride=layer.stride,
                                     padding=layer.padding), model.params[f"L{i}.b"])
    if layer.kind == "relu":
        return ad.relu(t)
    if layer.kind == "kwta":
        d = int(np.prod(t.data.shape[1:]))
        return ad.kwta(t, max(1, int(layer.keep * d)))
    if layer.kind == "maxpool":
        return ad.maxpool2d(t, layer.window)
    if layer.kind == "dense":
        if t.data.ndim > 2:
            t = ad.reshape(t, (t.data.shape[0], -1))
        return ad.add_bias(ad.matmul(t, model.params[f"L{i}.w"]), model.params[f"L{i}.b"])
    raise ParameterError(f"unknown layer kind '{layer.kind}'")


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    augmentation: str = "none"   # none | flips-shifts
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be >= 1")
        if self.augmentation not in ("none", "flips-shifts"):
            raise ParameterError(f"unknown augmentation '{self.augmentation}'")


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    @property
    def final_accuracy(self):
        return self.accuracies[-1] if self.accuracies else 0.0


def _augment_batch(x: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    out = x.copy()
    flips = rng.random(len(x)) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    pads = np.pad(out, ((0, 0), (0, 0), (max_shift, max_shift), (max_shift, max_shift)))
    h, w = x.shape[2], x.shape[3]
    for i in range(len(out)):
        dy, dx = rng.integers(0, 2 * max_shift + 1, size=2)
        out[i] = pads[i, :, dy:dy + h, dx:dx + w]
    return out


def train(model: Model, dataset: ImageDataset, config: TrainConfig):
    """Adam training; deterministic given config.seed. Returns (model, history)."""
    if len(dataset) == 0:
        raise UsageError("train: empty dataset")
    if dataset.labels.max() >= model.num_classes:
        raise ParameterError("train: label exceeds model classes")
    opt = ad.Adam(model.parameters(), lr=config.learning_rate)
    shuffle_rng = generator(config.seed, "shuffle")
    aug_rng = generator(config.seed, "augment")
    history = TrainHistory()
    n = len(dataset)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total_loss, correct = 0.0, 0
        for at in range(0, n, config.batch_size):
            idx = order[at:at + config.batch_size]
            xb = dataset.images[idx]
            if config.augmentation == "flips-shifts":
                xb = _augment_batch(xb, aug_rng)
            yb = dataset.labels[idx]
            logits = model.logits_t(Tensor(xb))
            loss = ad.softmax_cross_entropy(logits, yb)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total_loss += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        history.losses.append(total_loss / n)
        history.accuracies.append(correct / n)
    return model, history


# ---------------------------------------------------------------------------
# diversity-regularized ensemble

@dataclass
class AdpConfig:
    members: int = 2
    alpha: float = 2.0
    beta: float = 0.5

    def __post_init__(self):
        if self.members < 2:
            raise ParameterError("ensemble needs at least 2 members")
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be >= 0")


ED_FLOOR = 1e-20


class EnsembleModel:
    """Averaging ensemble: scores are the mean of member score vectors."""

    def __init__(self, members):
        if len(members) < 2:
            raise ParameterError("ensemble needs at least 2 members")
        self.members = list(members)
        self.num_classes = members[0].num_classes
        self.spec = members[0].spec

    def parameters(self):
        return [p for m in self.members for p in m.parameters()]

    def scores(self, x) -> np.ndarray:
        return np.mean([m.scores(x) for m in self.members], axis=0)

    def predict_labels(self, x) -> np.ndarray:
        return np.argmax(self.scores(x), axis=1)


def _nonmax_indices(labels: np.ndarray, k: int) -> np.ndarray:
    cols = np.tile(np.arange(k), (len(labels), 1))
    keep = cols != labels[:, None]
    return cols[keep].reshape(len(labels), k - 1)


def ensemble_diversity_t(member_scores, labels) -> Tensor:
    """det of the Gram matrix of L2-normalized non-true-class score vectors.

    Supported for 2 or 3 members (explicit cofactor expansion).
    """
    m = len(member_scores)
    if m not in (2, 3):
        raise ParameterError("ensemble diversity implemented for 2 or 3 members")
    k = member_scores[0].data.shape[1]
    idx = _nonmax_indices(np.asarray(labels), k)
    normed = []
    for s in member_scores:
        sub = ad.take_per_row(s, idx)
        norm = ad.powc(ad.affine(ad.sum_rows(ad.mul(sub, sub)), 1.0, 1e-12), -0.5)
        normed.append(ad.row_scale(sub, norm))
    g = {}
    for a in range(m):
        for b in range(a, m):
            g[(a, b)] = ad.sum_rows(ad.mul(normed[a], normed[b]))
    if m == 2:
        det = ad.sub(ad.mul(g[(0, 0)], g[(1, 1)]), ad.mul(g[(0, 1)], g[(0, 1)]))
    else:
        det = ad.sub(
            ad.add(ad.mul(g[(0, 0)], ad.sub(ad.mul(g[(1, 1)], g[(2, 2)]),
                                            ad.mul(g[(1, 2)], g[(1, 2)]))),
                   ad.mul(g[(0, 1)], ad.sub(ad.mul(g[(1, 2)], g[(0, 2)]),
                                            ad.mul(g[(0, 1)], g[(2, 2)])))),
            ad.mul(g[(0, 2)], ad.sub(ad.mul(g[(0, 2)], g[(1, 1)]),
                                     ad.mul(g[(0, 1)], g[(1, 2)]))))
    return det


def adp_loss(member_logits, labels, alpha: float, beta: float) -> Tensor:
    """Mean member cross-entropy minus entropy and log-diversity bonuses.

    With alpha == beta == 0 this is exactly the plain mean cross-entropy.
    The log of the diversity determinant is floored at log(1e-20).
    """
    ce_terms = [ad.softmax_cross_entropy(z, labels) for z in member_logits]
    loss = ce_terms[0]
    for term in ce_terms[1:]:
        loss = ad.add(loss, term)
    loss = ad.affine(loss, 1.0 / len(member_logits))
    if alpha == 0 and beta == 0:
        return loss
    member_scores = [ad.softmax(z) for z in member_logits]
    mean_scores = member_scores[0]
    for s in member_scores[1:]:
        mean_scores = ad.add(mean_scores, s)
    mean_scores = ad.affine(mean_scores, 1.0 / len(member_scores))
    if alpha != 0:
        safe = ad.affine(mean_scores, 1.0, 1e-12)
        ent = ad.neg(ad.mean_all(ad.sum_rows(ad.mul(safe, ad.log(safe)))))
        loss = ad.sub(loss, ad.affine(ent, alpha))
    if beta != 0:
        det = ensemble_diversity_t(member_scores, labels)
        log_det = ad.log(ad.affine(ad.relu(ad.affine(det, 1.0, -ED_FLOOR)), 1.0, ED_FLOOR))
        loss = ad.sub(loss, ad.affine(ad.mean_all(log_det), beta))
    return loss


def train_adp_ensemble(specs, dataset: ImageDataset, config: TrainConfig,
                       adp: AdpConfig):
    """Jointly train ensemble members with the diversity-promoting loss."""
    if len(specs) < 2:
        raise ParameterError("ensemble needs at least 2 member specs")
    members = [Model(spec, seed=derive_seed(config.seed, "member", i))
               for i, spec in enumerate(specs)]
    ensemble = EnsembleModel(members)
    opt = ad.Adam(ensemble.parameters(), lr=config.learning_rate)
    shuffle_rng = generator(config.seed, "shuffle")
    history = TrainHistory()
    n = len(dataset)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total_loss, correct = 0.0, 0
        for at in range(0, n, config.batch_size):
            idx = order[at:at + config.batch_size]
            xb, yb = dataset.images[idx], dataset.labels[idx]
            xt = Tensor(xb)
            member_logits = [m.logits_t(xt) for m in members]
            loss = adp_loss(member_logits, yb, adp.alpha, adp.beta)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total_loss += float(loss.data) * len(idx)
            mean = np.mean([ad._softmax_np(z.data) for z in member_logits], axis=0)
            correct += int(np.sum(np.argmax(mean, axis=1) == yb))
        history.losses.append(total_loss / n)
        history.accuracies.append(correct / n)
    return ensemble, history
