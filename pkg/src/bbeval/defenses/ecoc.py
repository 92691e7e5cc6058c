"""Class labels as +-1 codewords decoded by correlation with tanh outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..data import ImageDataset
from ..exceptions import CodebookError, ParameterError
from ..nn import LayerSpec, Model, ModelSpec, TrainConfig, conv_block
from ..rng import derive_seed, generator
from .base import Defense


@dataclass
class Codebook:
    codes: np.ndarray        # (K, B) entries in {-1, +1}
    min_distance: int

    @property
    def num_classes(self):
        return self.codes.shape[0]

    @property
    def bits(self):
        return self.codes.shape[1]

    def to_tensors(self) -> dict:
        return {"codebook.codes": self.codes.astype(np.float32),
                "codebook.meta": np.array([self.min_distance], dtype=np.float32)}

    @classmethod
    def from_tensors(cls, tensors: dict) -> "Codebook":
        codes = np.asarray(tensors["codebook.codes"])
        return cls(np.where(codes > 0, 1.0, -1.0),
                   int(round(float(tensors["codebook.meta"][0]))))


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.sum(a != b))


def pairwise_min_distance(codes: np.ndarray) -> int:
    k = len(codes)
    best = codes.shape[1]
    for i in range(k):
        for j in range(i + 1, k):
            best = min(best, hamming_distance(codes[i], codes[j]))
    return best


def _balanced_row(bits: int, rng: np.random.Generator) -> np.ndarray:
    row = np.full(bits, -1.0)
    row[rng.choice(bits, size=(bits + 1) // 2, replace=False)] = 1.0
    return row


def generate_codebook(k: int, bits: int, min_distance: int, seed: int = 0,
                      attempts: int = 4000) -> Codebook:
    """Seeded random search for K balanced-ish codewords with the requested
    pairwise separation; raises after bounded attempts if none is found."""
    if k < 2 or bits < 1:
        raise ParameterError("codebook needs k >= 2 and bits >= 1")
    rng = generator(seed, "codebook", k, bits, min_distance)
    chosen = []
    tried = 0
    while tried < attempts:
        tried += 1
        row = _balanced_row(bits, rng)
        if all(hamming_distance(row, c) >= min_distance for c in chosen):
            chosen.append(row)
            if len(chosen) == k:
                codes = np.stack(chosen)
                return Codebook(codes, pairwise_min_distance(codes))
        elif tried % 200 == 0:
            chosen = []   # restart; greedy prefixes can dead-end
    raise CodebookError(f"no {k} codewords of {bits} bits at distance {min_distance} "
                        f"found in {attempts} attempts")


def ecoc_decode(activations: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Correlation decode: argmax over classes of <activation, codeword>,
    lowest index on ties."""
    corr = np.asarray(activations) @ codebook.codes.T
    return np.argmax(corr, axis=1)


def nearest_codeword(activations: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Exhaustive Euclidean nearest-codeword search (decode oracle)."""
    acts = np.asarray(activations)
    out = np.empty(len(acts), dtype=np.int64)
    for i in range(len(acts)):
        dists = np.sum((codebook.codes - acts[i][None, :]) ** 2, axis=1)
        out[i] = int(np.argmin(dists))
    return out


def member_spec(input_shape, bits_out: int) -> ModelSpec:
    """Small conv net emitting a slice of the code bits."""
    layers = (conv_block(16) + [LayerSpec("maxpool")] + conv_block(32)
              + [LayerSpec("maxpool")]
              + [LayerSpec("dense", width=64), LayerSpec("relu"),
                 LayerSpec("dense", width=bits_out)])
    return ModelSpec(layers, bits_out, tuple(input_shape))


class EcocEnsemble(Defense):
    """Members jointly emit tanh activations in (-1, 1); correlation decode."""

    kind = "ecoc"

    def __init__(self, members, codebook: Codebook, seed: int = 0):
        super().__init__(codebook.num_classes, seed)
        self.members = list(members)
        self.codebook = codebook

    def activations(self, images) -> np.ndarray:
        return np.concatenate([m.scores(images) for m in self.members], axis=1)

    def classify_batch(self, images, seed=None) -> np.ndarray:
        return ecoc_decode(self.activations(np.asarray(images, dtype=np.float32)),
                           self.codebook)


TARGET_SCALE = 0.9   # keeps tanh targets off the saturated rails


def fit_ecoc(train_data: ImageDataset, bits: int, members: int,
             min_distance: int, config: TrainConfig, seed: int = 0) -> EcocEnsemble:
    """Split the code bits across members and train each against its slice."""
    if bits % members:
        raise ParameterError(f"bits {bits} must divide evenly across {members} members")
    codebook = generate_codebook(train_data.num_classes, bits, min_distance,
                                 seed=derive_seed(seed, "codes"))
    per = bits // members
    nets = []
    for m in range(members):
        net = Model(member_spec(train_data.shape, per),
                    seed=derive_seed(seed, "ecoc-member", m), head="tanh")
        target_bits = codebook.codes[:, m * per:(m + 1) * per] * TARGET_SCALE
        _train_bit_regressor(net, train_data, target_bits, config,
                             derive_seed(seed, "ecoc-train", m))
        nets.append(net)
    return EcocEnsemble(nets, codebook, seed=seed)


def _train_bit_regressor(net: Model, dataset: ImageDataset, target_bits: np.ndarray,
                         config: TrainConfig, seed: int):
    opt = ad.Adam(net.parameters(), lr=config.learning_rate)
    rng = generator(seed, "shuffle")
    n = len(dataset)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for at in range(0, n, config.batch_size):
            idx = order[at:at + config.batch_size]
            xb = dataset.images[idx]
            targets = target_bits[dataset.labels[idx]].astype(np.float32)
            acts = ad.tanh(net.logits_t(Tensor(xb)))
            diff = ad.sub(acts, Tensor(targets))
            loss = ad.mean_all(ad.mul(diff, diff))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
