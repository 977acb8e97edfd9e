"""The capsulation attack: filters in front of a pirated black box.

A filter scores how much an input looks like an ownership query; flagged
queries get a fake label instead of the model's answer. Rule and Bayes filters
cover the knowledge settings where the trigger generator or triggers leak;
the learned filters are the binary classifiers an adversary trains from
Q collected triggers and Q normal queries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .model import BlackBoxModel, flatten_images
from .scheme import SchemeParams, derive_seed, image_digest

LEARNED_KINDS = ("knn", "naive_bayes", "logistic", "mlp")

_VAR_FLOOR = 1e-4


class InapplicableAttackError(RuntimeError):
    """No filter can be built in this knowledge setting."""


class Filter:
    """Scoring interface: suspicion in [0, 1], flag when score >= threshold."""

    threshold: float = 0.5

    def score(self, image: np.ndarray) -> float:
        return float(self.score_batch(np.asarray(image)[None])[0])

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decide(self, image: np.ndarray) -> bool:
        return self.score(image) >= self.threshold


@dataclass
class RuleFilter(Filter):
    """Exact membership against known trigger digests, plus an optional range rule."""

    trigger_digests: set[bytes] = field(default_factory=set)
    range_rule: bool = False
    threshold: float = 0.5

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        out = np.zeros(len(images))
        for i, img in enumerate(images):
            if image_digest(np.asarray(img, dtype=np.float32)) in self.trigger_digests:
                out[i] = 1.0
            elif self.range_rule and (np.any(img < 0.0) or np.any(img > 1.0)):
                out[i] = 1.0
        return out


@dataclass
class BayesFilter(Filter):
    """Per-pixel Gaussian class conditionals with a prior on ownership queries."""

    mu_t: np.ndarray
    var_t: np.ndarray
    mu_n: np.ndarray
    var_n: np.ndarray
    prior: float
    threshold: float = 0.5

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        x = flatten_images(images)
        ll_t = -0.5 * np.sum(np.log(2 * np.pi * self.var_t) + (x - self.mu_t) ** 2 / self.var_t, axis=1)
        ll_n = -0.5 * np.sum(np.log(2 * np.pi * self.var_n) + (x - self.mu_n) ** 2 / self.var_n, axis=1)
        z = math.log(self.prior) - math.log1p(-self.prior) + ll_t - ll_n
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-z))


def fit_bayes(triggers: np.ndarray, normals: np.ndarray, p_t: float) -> BayesFilter:
    """Fit the posterior filter from Q triggers and Q normal queries."""
    if len(triggers) < 2 or len(normals) < 2:
        raise ValueError("need at least 2 samples per class")
    if not 0.0 < p_t < 1.0:
        raise ValueError(f"prior must lie in (0, 1), got {p_t}")
    xt, xn = flatten_images(triggers), flatten_images(normals)
    return BayesFilter(
        mu_t=xt.mean(axis=0), var_t=np.maximum(xt.var(axis=0), _VAR_FLOOR),
        mu_n=xn.mean(axis=0), var_n=np.maximum(xn.var(axis=0), _VAR_FLOOR),
        prior=p_t,
    )


@dataclass
class KnnFilter(Filter):
    """Score = fraction of trigger examples among the k nearest stored samples."""

    x: np.ndarray
    is_trigger: np.ndarray
    k: int = 5
    threshold: float = 0.5

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        q = flatten_images(images)
        d = kernels.pairwise_sq_dists(q, self.x)
        nearest = np.argpartition(d, self.k - 1, axis=1)[:, : self.k]
        return self.is_trigger[nearest].mean(axis=1)


@dataclass
class LogisticFilter(Filter):
    w: np.ndarray
    b: float
    threshold: float = 0.5

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        z = flatten_images(images) @ self.w + self.b
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


@dataclass
class MlpFilter(Filter):
    """One hidden layer (width 32) trained as a binary softmax classifier."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    threshold: float = 0.5

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        x = flatten_images(images)
        hid = np.maximum(x @ self.w1 + self.b1, 0.0)
        logits = hid @ self.w2 + self.b2
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p[:, 1] / p.sum(axis=1)


def _fit_logistic(xt: np.ndarray, xn: np.ndarray, seed: int,
                  lr: float = 0.5, epochs: int = 400) -> LogisticFilter:
    x = np.concatenate([xt, xn])
    y = np.concatenate([np.ones(len(xt)), np.zeros(len(xn))])
    rng = np.random.default_rng(derive_seed(seed, "logistic"))
    w = rng.normal(0.0, 0.01, size=x.shape[1])
    b = 0.0
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-np.clip(x @ w + b, -500, 500)))
        err = (p - y) / len(x)
        gw = x.T @ err
        if not np.all(np.isfinite(gw)):
            raise DivergedFitError("logistic")
        w -= lr * gw
        b -= lr * float(err.sum())
    return LogisticFilter(w=w, b=b)


def _fit_mlp(xt: np.ndarray, xn: np.ndarray, seed: int,
             hidden: int = 32, lr: float = 0.05, epochs: int = 400,
             batch_size: int = 32, init_scale: float | None = None) -> MlpFilter:
    x = np.concatenate([xt, xn])
    y = np.concatenate([np.ones(len(xt), dtype=np.int64), np.zeros(len(xn), dtype=np.int64)])
    rng = np.random.default_rng(derive_seed(seed, "mlp"))
    d = x.shape[1]
    scale1 = init_scale if init_scale is not None else math.sqrt(2.0 / d)
    w1 = rng.normal(0.0, scale1, size=(d, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, math.sqrt(2.0 / hidden), size=(hidden, 2))
    b2 = np.zeros(2)
    n = len(x)
    nb = max(n // batch_size, 1)
    bsz = min(batch_size, n)
    sched = np.empty((epochs * nb, bsz), dtype=np.int64)
    for e in range(epochs):
        perm = rng.permutation(n)[: nb * bsz]
        sched[e * nb:(e + 1) * nb] = perm.reshape(nb, bsz)
    losses = kernels.sgd_steps(w1, b1, w2, b2, x, y, sched, lr)
    if not np.all(np.isfinite(losses)):
        raise DivergedFitError("mlp")
    return MlpFilter(w1=w1, b1=b1, w2=w2, b2=b2)


class DivergedFitError(RuntimeError):
    """A learned filter produced a non-finite loss during fitting."""


def fit_classifier(kind: str, triggers: np.ndarray, normals: np.ndarray,
                   seed: int = 0, **hyper) -> Filter:
    """Fit one of the learned filter kinds on Q triggers + Q normals."""
    xt, xn = flatten_images(triggers), flatten_images(normals)
    if kind == "knn":
        k = int(hyper.get("k", 5))
        if k < 1 or len(xt) < k:
            raise ValueError(f"knn needs at least k={k} trigger examples, got {len(xt)}")
        x = np.concatenate([xt, xn])
        flags = np.concatenate([np.ones(len(xt)), np.zeros(len(xn))])
        return KnnFilter(x=x, is_trigger=flags, k=k)
    if kind == "naive_bayes":
        return fit_bayes(triggers, normals, p_t=0.5)
    if kind == "logistic":
        return _fit_logistic(xt, xn, seed, **hyper)
    if kind == "mlp":
        return _fit_mlp(xt, xn, seed, **hyper)
    raise ValueError(f"unknown classifier kind {kind!r}; expected one of {LEARNED_KINDS}")


def filter_menu(knows_trigger_gen: bool, knows_key: bool,
                has_exposed_triggers: bool) -> tuple[str, ...]:
    """Which filter families a given knowledge setting supports.

    With the trigger generator and the key, every trigger is computable and a
    rule filter suffices. Without the key the adversary falls back to
    statistical filters (and a rule filter over anything exposed). Without the
    generator it needs exposed triggers; with neither, no filter exists.
    """
    if knows_trigger_gen and knows_key:
        return ("rule",)
    if knows_trigger_gen:
        return ("bayes", "rule")
    if has_exposed_triggers:
        return ("bayes",)
    raise InapplicableAttackError(
        "no trigger generator and no exposed triggers: filtering is inapplicable"
    )


def fake_label(image: np.ndarray, model: BlackBoxModel, params: SchemeParams, seed: int) -> int:
    """A seeded uniform label different from the model's own answer."""
    if params.n_classes < 2:
        raise ValueError("cannot pick a different label when only one class exists")
    truth = model.query(image)
    rng = np.random.default_rng(derive_seed(seed, "fake", image_digest(np.asarray(image, dtype=np.float32))))
    draw = int(rng.integers(0, params.n_classes - 1))
    return draw if draw < truth else draw + 1


def make_fake_labeler(model: BlackBoxModel, params: SchemeParams, seed: int) -> Callable[[np.ndarray], int]:
    return lambda image: fake_label(image, model, params, seed)


@dataclass
class CapsulatedService:
    """The wrapped service: flagged queries answered by the fake labeler."""

    inner: BlackBoxModel
    filter: Filter
    fake_labeler: Callable[[np.ndarray], int]

    def query(self, image: np.ndarray) -> int:
        if self.filter.decide(image):
            return int(self.fake_labeler(image))
        return int(self.inner.query(image))


def capsulate(model: BlackBoxModel, filt: Filter,
              fake_labeler: Callable[[np.ndarray], int]) -> CapsulatedService:
    """Wrap a pirated model: route every query through the filter first."""
    return CapsulatedService(inner=model, filter=filt, fake_labeler=fake_labeler)


def _hex_array(a: np.ndarray) -> str:
    return np.ascontiguousarray(a, dtype="<f8").tobytes().hex()


def _unhex_array(s: str, shape: tuple[int, ...]) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(s), dtype="<f8").reshape(shape).copy()


def save_filter(filt: Filter, path: str) -> None:
    """Persist a filter as JSON with hex-encoded parameter arrays."""
    if isinstance(filt, RuleFilter):
        obj = {"kind": "rule", "threshold": filt.threshold, "range_rule": filt.range_rule,
               "digests": sorted(d.hex() for d in filt.trigger_digests)}
    elif isinstance(filt, BayesFilter):
        obj = {"kind": "bayes", "threshold": filt.threshold, "prior": filt.prior,
               "d": len(filt.mu_t),
               "mu_t": _hex_array(filt.mu_t), "var_t": _hex_array(filt.var_t),
               "mu_n": _hex_array(filt.mu_n), "var_n": _hex_array(filt.var_n)}
    elif isinstance(filt, KnnFilter):
        obj = {"kind": "knn", "threshold": filt.threshold, "k": filt.k,
               "shape": list(filt.x.shape), "x": _hex_array(filt.x),
               "is_trigger": _hex_array(filt.is_trigger)}
    elif isinstance(filt, LogisticFilter):
        obj = {"kind": "logistic", "threshold": filt.threshold, "d": len(filt.w),
               "w": _hex_array(filt.w), "b": filt.b}
    elif isinstance(filt, MlpFilter):
        obj = {"kind": "mlp", "threshold": filt.threshold,
               "shape": list(filt.w1.shape),
               "w1": _hex_array(filt.w1), "b1": _hex_array(filt.b1),
               "w2": _hex_array(filt.w2), "b2": _hex_array(filt.b2)}
    else:
        raise TypeError(f"cannot persist filter type {type(filt).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_filter(path: str) -> Filter:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    kind = obj["kind"]
    if kind == "rule":
        return RuleFilter(trigger_digests={bytes.fromhex(d) for d in obj["digests"]},
                          range_rule=obj["range_rule"], threshold=obj["threshold"])
    if kind == "bayes":
        d = obj["d"]
        return BayesFilter(mu_t=_unhex_array(obj["mu_t"], (d,)), var_t=_unhex_array(obj["var_t"], (d,)),
                           mu_n=_unhex_array(obj["mu_n"], (d,)), var_n=_unhex_array(obj["var_n"], (d,)),
                           prior=obj["prior"], threshold=obj["threshold"])
    if kind == "knn":
        shape = tuple(obj["shape"])
        return KnnFilter(x=_unhex_array(obj["x"], shape),
                         is_trigger=_unhex_array(obj["is_trigger"], (shape[0],)),
                         k=obj["k"], threshold=obj["threshold"])
    if kind == "logistic":
        return LogisticFilter(w=_unhex_array(obj["w"], (obj["d"],)), b=obj["b"],
                              threshold=obj["threshold"])
    if kind == "mlp":
        d, h = obj["shape"]
        return MlpFilter(w1=_unhex_array(obj["w1"], (d, h)), b1=_unhex_array(obj["b1"], (h,)),
                         w2=_unhex_array(obj["w2"], (h, 2)), b2=_unhex_array(obj["b2"], (2,)),
                         threshold=obj["threshold"])
    raise ValueError(f"unknown filter kind {kind!r} in {path}")
