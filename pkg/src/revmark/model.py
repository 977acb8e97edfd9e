"""Desk-scale stand-ins for the watermarked network.

A seeded synthetic blob dataset, a one-hidden-layer softmax classifier with
backdoor fine-tuning, and a lookup oracle for protocol experiments that do not
need training. Everything the judge or an adversary touches goes through the
single-method black-box interface.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from . import kernels
from .scheme import SchemeParams, derive_seed, image_digest, serialize_image, deserialize_image


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the offending epoch."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


class EmbedTargetError(RuntimeError):
    """Trigger accuracy target was not reached within the epoch cap."""

    def __init__(self, best_acc: float, epochs: int):
        super().__init__(
            f"backdoor embedding reached trigger accuracy {best_acc:.3f} "
            f"after {epochs} epochs, below target"
        )
        self.best_acc = best_acc


class BlackBoxModel(Protocol):
    """The only surface the judge and the adversary ever see."""

    def query(self, image: np.ndarray) -> int: ...


@dataclass
class SyntheticDataset:
    """Blob images with balanced classes and a stratified 80/20 split."""

    images: np.ndarray  # (n, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.images)

    @property
    def train_images(self) -> np.ndarray:
        return self.images[self.train_idx]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @property
    def test_images(self) -> np.ndarray:
        return self.images[self.test_idx]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.test_idx]


def _class_centers(params: SchemeParams) -> np.ndarray:
    h, w = params.image_dims
    g = math.ceil(math.sqrt(params.n_classes))
    centers = np.empty((params.n_classes, 2))
    for k in range(params.n_classes):
        centers[k] = ((k // g + 0.5) * h / g, (k % g + 0.5) * w / g)
    return centers


def gen_dataset(seed: int, n_per_class: int, params: SchemeParams) -> SyntheticDataset:
    """Render each class as a Gaussian blob at its grid position plus pixel noise."""
    if n_per_class < 2:
        raise ValueError("need at least 2 samples per class")
    h, w = params.image_dims
    g = math.ceil(math.sqrt(params.n_classes))
    sigma = min(h, w) / (3.0 * g)
    centers = _class_centers(params)
    rng = np.random.default_rng(derive_seed(seed, "dataset"))
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.empty((params.n_classes * n_per_class, h, w), dtype=np.float32)
    labels = np.empty(params.n_classes * n_per_class, dtype=np.int64)
    i = 0
    for k in range(params.n_classes):
        cy, cx = centers[k]
        for _ in range(n_per_class):
            jy, jx = rng.uniform(-0.5, 0.5, size=2)
            blob = np.exp(-(((yy - cy - jy) ** 2) + ((xx - cx - jx) ** 2)) / (2 * sigma**2))
            img = blob + rng.normal(0.0, 0.1, size=(h, w))
            images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
            labels[i] = k
            i += 1
    train_idx, test_idx = [], []
    for k in range(params.n_classes):
        idx = rng.permutation(np.arange(k * n_per_class, (k + 1) * n_per_class))
        cut = int(round(0.8 * n_per_class))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    return SyntheticDataset(
        images=images, labels=labels,
        train_idx=np.array(sorted(train_idx)), test_idx=np.array(sorted(test_idx)),
        seed=seed,
    )


def flatten_images(images: np.ndarray) -> np.ndarray:
    """(n, h, w) -> (n, h*w) float64 feature matrix."""
    arr = np.asarray(images, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1)


@dataclass(frozen=True)
class TrainHyper:
    """Training and embedding knobs; all runs are deterministic given the seed."""

    hidden: int = 64
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    mix_every: int = 4  # one trigger batch per this many clean batches
    target_trigger_acc: float = 0.95
    max_embed_epochs: int = 300
    embed_lr: float = 0.05


@dataclass
class TrainableModel:
    """One ReLU hidden layer plus softmax; prediction is the argmax class."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    hyper: TrainHyper

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    def scores(self, images: np.ndarray) -> np.ndarray:
        x = flatten_images(images)
        hid = np.maximum(x @ self.w1 + self.b1, 0.0)
        return hid @ self.w2 + self.b2

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(images), axis=1)

    def query(self, image: np.ndarray) -> int:
        return int(self.predict(image[None, :, :])[0])

    def copy(self) -> "TrainableModel":
        return TrainableModel(
            w1=self.w1.copy(), b1=self.b1.copy(),
            w2=self.w2.copy(), b2=self.b2.copy(), hyper=self.hyper,
        )


def init_model(d_in: int, n_classes: int, hyper: TrainHyper) -> TrainableModel:
    rng = np.random.default_rng(derive_seed(hyper.seed, "init"))
    w1 = rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_in, hyper.hidden))
    w2 = rng.normal(0.0, math.sqrt(2.0 / hyper.hidden), size=(hyper.hidden, n_classes))
    return TrainableModel(w1=w1, b1=np.zeros(hyper.hidden), w2=w2, b2=np.zeros(n_classes), hyper=hyper)


def _run_schedule(model: TrainableModel, x: np.ndarray, y: np.ndarray,
                  sched: np.ndarray, lr: float, epoch_base: int, steps_per_epoch: int) -> None:
    losses = kernels.sgd_steps(model.w1, model.b1, model.w2, model.b2, x, y, sched, lr)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise DivergenceError(epoch_base + int(bad[0]) // max(steps_per_epoch, 1))


def train(dataset: SyntheticDataset, hyper: TrainHyper, n_classes: int) -> TrainableModel:
    """Fit the classifier on the train split with mini-batch SGD."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    x = flatten_images(dataset.train_images)
    y = dataset.train_labels.astype(np.int64)
    model = init_model(x.shape[1], n_classes, hyper)
    n = len(x)
    nb = n // hyper.batch_size
    if hyper.epochs == 0 or nb == 0:
        return model
    rng = np.random.default_rng(derive_seed(hyper.seed, "train"))
    sched = np.empty((hyper.epochs * nb, hyper.batch_size), dtype=np.int64)
    for e in range(hyper.epochs):
        perm = rng.permutation(n)[: nb * hyper.batch_size]
        sched[e * nb:(e + 1) * nb] = perm.reshape(nb, hyper.batch_size)
    _run_schedule(model, x, y, sched, hyper.lr, 0, nb)
    return model


def embed_backdoor(model: TrainableModel, trigger_set, dataset: SyntheticDataset,
                   hyper: TrainHyper) -> TrainableModel:
    """Fine-tune on a clean/trigger batch mixture until the trigger set sticks.

    Clean batches exclude images that are bit-identical to a trigger (the
    reverse scheme relabels dataset members, and the two label assignments
    would otherwise fight). Raises :class:`EmbedTargetError` with the best
    accuracy reached if the target is unreachable within the epoch cap.
    """
    if trigger_set is None or len(trigger_set.triggers) == 0:
        return model.copy()
    if trigger_set.labels is None:
        raise ValueError("trigger set has no labels assigned")
    tuned = model.copy()
    trig_x = flatten_images(np.stack(trigger_set.triggers))
    trig_y = np.asarray(trigger_set.labels, dtype=np.int64)
    trig_digests = {image_digest(t) for t in trigger_set.triggers}
    keep = [i for i in range(len(dataset.train_idx))
            if image_digest(dataset.train_images[i]) not in trig_digests]
    clean_x = flatten_images(dataset.train_images[keep])
    clean_y = dataset.train_labels[keep].astype(np.int64)

    x = np.concatenate([clean_x, trig_x])
    y = np.concatenate([clean_y, trig_y])
    n_clean, n_trig = len(clean_x), len(trig_x)
    bsz = hyper.batch_size
    nb = n_clean // bsz
    rng = np.random.default_rng(derive_seed(hyper.seed, "embed"))
    best = 0.0
    for epoch in range(hyper.max_embed_epochs):
        batches = []
        perm = rng.permutation(n_clean)[: nb * bsz].reshape(nb, bsz)
        for b in range(nb):
            batches.append(perm[b])
            if (b + 1) % hyper.mix_every == 0:
                batches.append(n_clean + rng.integers(0, n_trig, size=bsz))
        sched = np.stack(batches).astype(np.int64)
        _run_schedule(tuned, x, y, sched, hyper.embed_lr, epoch, len(batches))
        acc = float(np.mean(tuned.predict(trigger_set.triggers) == trig_y))
        best = max(best, acc)
        if acc >= hyper.target_trigger_acc:
            return tuned
    raise EmbedTargetError(best, hyper.max_embed_epochs)


@dataclass
class OracleModel:
    """Lookup-backed black box with configurable trigger fidelity and clean accuracy.

    Responses are deterministic given (seed, query position); the position
    advances by one on every ``query`` call.
    """

    trigger_map: dict[bytes, int]
    base_labeler: Callable[[np.ndarray], int]
    n_classes: int
    trigger_fidelity: float = 1.0
    clean_accuracy: float = 1.0
    seed: int = 0
    _position: int = field(default=0, init=False, repr=False)

    def query(self, image: np.ndarray) -> int:
        label = oracle_query(self, image, self._position)
        self._position += 1
        return label


def oracle_query(oracle: OracleModel, image: np.ndarray, position: int) -> int:
    """Pure response function: mapped label or true label, each with its fidelity."""
    digest = image_digest(image)
    if digest in oracle.trigger_map:
        target, p = oracle.trigger_map[digest], oracle.trigger_fidelity
    else:
        target, p = oracle.base_labeler(image), oracle.clean_accuracy
    if p >= 1.0:
        return int(target)
    rng = np.random.default_rng(derive_seed(oracle.seed, "oracle", position))
    if rng.random() < p:
        return int(target)
    wrong = int(rng.integers(0, oracle.n_classes - 1))
    return wrong if wrong < target else wrong + 1


@dataclass
class UniformRandomModel:
    """An unrelated service: every query draws a uniform label."""

    n_classes: int
    seed: int = 0
    _position: int = field(default=0, init=False, repr=False)

    def query(self, image: np.ndarray) -> int:
        rng = np.random.default_rng(derive_seed(self.seed, "uniform", self._position))
        self._position += 1
        return int(rng.integers(0, self.n_classes))


def make_dataset_labeler(dataset: SyntheticDataset) -> Callable[[np.ndarray], int]:
    """True-label function: exact digest lookup, nearest train centroid otherwise."""
    lookup = {image_digest(img): int(lab) for img, lab in zip(dataset.images, dataset.labels)}
    classes = np.unique(dataset.train_labels)
    x = flatten_images(dataset.train_images)
    centroids = np.stack([x[dataset.train_labels == k].mean(axis=0) for k in classes])

    def labeler(image: np.ndarray) -> int:
        digest = image_digest(image)
        if digest in lookup:
            return lookup[digest]
        flat = np.asarray(image, dtype=np.float64).ravel()
        return int(classes[np.argmin(np.sum((centroids - flat) ** 2, axis=1))])

    return labeler


def accuracy(model: BlackBoxModel, pairs: list[tuple[np.ndarray, int]]) -> float:
    """Fraction of queries answered with the expected label."""
    if not pairs:
        raise ValueError("accuracy needs at least one (image, label) pair")
    hits = sum(1 for img, expect in pairs if model.query(img) == expect)
    return hits / len(pairs)


def save_model(model: TrainableModel, path: str) -> None:
    """Checkpoint: flat little-endian f32 weights plus a JSON sidecar."""
    blob = np.concatenate([
        model.w1.ravel(), model.b1, model.w2.ravel(), model.b2,
    ]).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    sidecar = {
        "d_in": model.w1.shape[0],
        "hidden": model.w1.shape[1],
        "n_classes": model.w2.shape[1],
        "hyper": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in vars(model.hyper).items()},
    }
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path: str) -> TrainableModel:
    with open(path + ".json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    d_in, hidden, n_classes = sidecar["d_in"], sidecar["hidden"], sidecar["n_classes"]
    flat = np.frombuffer(open(path, "rb").read(), dtype="<f4").astype(np.float64)
    sizes = [d_in * hidden, hidden, hidden * n_classes, n_classes]
    if flat.size != sum(sizes):
        raise ValueError(f"checkpoint holds {flat.size} floats, sidecar implies {sum(sizes)}")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    hyper = TrainHyper(**sidecar["hyper"])
    return TrainableModel(
        w1=parts[0].reshape(d_in, hidden), b1=parts[1],
        w2=parts[2].reshape(hidden, n_classes), b2=parts[3], hyper=hyper,
    )


def export_dataset(dataset: SyntheticDataset, out_dir: str) -> None:
    """Persist images in the canonical binary form plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, img in enumerate(dataset.images):
        name = f"img_{i:05d}.bin"
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(serialize_image(img))
        names.append(name)
    manifest = {
        "images": names,
        "labels": [int(v) for v in dataset.labels],
        "train_idx": [int(v) for v in dataset.train_idx],
        "test_idx": [int(v) for v in dataset.test_idx],
        "seed": dataset.seed,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def import_dataset(in_dir: str) -> SyntheticDataset:
    with open(os.path.join(in_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    images = np.stack([
        deserialize_image(open(os.path.join(in_dir, name), "rb").read())
        for name in manifest["images"]
    ])
    return SyntheticDataset(
        images=images.astype(np.float32),
        labels=np.array(manifest["labels"], dtype=np.int64),
        train_idx=np.array(manifest["train_idx"]),
        test_idx=np.array(manifest["test_idx"]),
        seed=manifest["seed"],
    )
