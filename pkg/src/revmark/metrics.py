"""Security metrics: AUC, the CAScore upper bound, and ambiguity-attack bounds.

The CAScore of a scheme is 2*(1 - best achievable AUC) for telling triggers
from normal queries; since the true best is out of reach, a finite family of
classifiers gives an upper bound. The ambiguity side has the exact forgery
probability, its Chernoff bound, and a Monte-Carlo estimator to check both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .attack import LEARNED_KINDS, fit_classifier
from .scheme import SchemeParams, derive_seed
from .triggers import trigger_source


def auc(pos_scores, neg_scores) -> float:
    """Rank-based (Mann-Whitney) AUC: P(pos > neg) with ties counted half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score collections must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class CAScoreReport:
    """Per-(classifier, Q) held-out AUC grid and the resulting bound."""

    scheme_id: str
    seed: int
    q_values: tuple[int, ...]
    kinds: tuple[str, ...]
    table: dict[tuple[str, int], float]  # flip-normalized AUC per cell
    max_auc: float
    bound: float

    def to_csv(self) -> str:
        lines = ["classifier," + ",".join(f"q={q}" for q in self.q_values)]
        for kind in self.kinds:
            row = [kind] + [f"{self.table[(kind, q)]:.6f}" for q in self.q_values]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "scheme_id": self.scheme_id,
            "seed": self.seed,
            "q_values": list(self.q_values),
            "kinds": list(self.kinds),
            "auc": {f"{k}/{q}": v for (k, q), v in sorted(self.table.items())},
            "max_auc": self.max_auc,
            "cascore_bound": self.bound,
        }


class _Pool:
    """Restricted dataset view handed to the reverse trigger source."""

    def __init__(self, images: np.ndarray):
        self.images = images


def cascore_bound(scheme_id: str, dataset, params: SchemeParams,
                  kinds=LEARNED_KINDS, q_values=(500,), seed: int = 0,
                  eval_count: int = 500, filter_hyper: dict | None = None) -> CAScoreReport:
    """Upper-bound the CAScore with a grid of fitted classifiers.

    For each (kind, Q) cell a classifier is fitted on Q triggers + Q normals
    and scored by held-out AUC; cells are flip-normalized to max(a, 1-a) so
    the family implicitly contains every label-flipped classifier. The bound
    is 2*(1 - max over cells).

    Normals come from one half of a seeded index split; the reverse scheme's
    triggers are drawn from the other half so the two sides never share an
    image. Fit and held-out samples are disjoint prefixes of a single draw.
    """
    q_values = tuple(int(q) for q in q_values)
    kinds = tuple(kinds)
    max_q = max(q_values)
    n = len(dataset.images)
    rng = np.random.default_rng(derive_seed(seed, "cascore-split"))
    perm = rng.permutation(n)
    normal_pool, trigger_pool = perm[: n // 2], perm[n // 2:]
    if len(normal_pool) < max_q + eval_count:
        raise ValueError(
            f"dataset half of {len(normal_pool)} cannot supply {max_q} fit + {eval_count} eval normals"
        )
    normals = dataset.images[normal_pool]
    fit_normals, eval_normals = normals[:max_q], normals[max_q: max_q + eval_count]

    if scheme_id == "reverse":
        source = trigger_source(scheme_id, params, _Pool(dataset.images[trigger_pool]))
        if len(trigger_pool) < max_q + eval_count:
            raise ValueError("dataset too small for the requested reverse trigger draws")
    else:
        source = trigger_source(scheme_id, params, dataset)
    triggers = source(max_q + eval_count, derive_seed(seed, "triggers", scheme_id))
    fit_triggers, eval_triggers = triggers[:max_q], triggers[max_q: max_q + eval_count]

    hyper = dict(filter_hyper or {})
    table: dict[tuple[str, int], float] = {}
    for kind in kinds:
        for q in q_values:
            filt = fit_classifier(kind, fit_triggers[:q], fit_normals[:q],
                                  seed=derive_seed(seed, "fit", kind, q),
                                  **hyper.get(kind, {}))
            a = auc(filt.score_batch(eval_triggers), filt.score_batch(eval_normals))
            table[(kind, q)] = max(a, 1.0 - a)
    max_auc = max(table.values())
    return CAScoreReport(
        scheme_id=scheme_id, seed=seed, q_values=q_values, kinds=kinds,
        table=table, max_auc=max_auc, bound=2.0 * (1.0 - max_auc),
    )


def forgery_prob_exact(n_classes: int, n_triggers: int) -> float:
    """Probability that an unrelated model matches all N labels: C^(-N)."""
    if n_classes < 2 or n_triggers < 1:
        raise ValueError("need n_classes >= 2 and n_triggers >= 1")
    return math.exp(-n_triggers * math.log(n_classes))


def match_threshold(tau: float, n_triggers: int) -> int:
    """Smallest match count whose accuracy reaches tau."""
    return math.ceil(tau * n_triggers - 1e-12)


def binomial_tail_exact(tau: float, n_classes: int, n_triggers: int) -> float:
    """Exact Pr{Bin(N, 1/C) >= tau*N} by summing the pmf."""
    p = 1.0 / n_classes
    m = match_threshold(tau, n_triggers)
    total = 0.0
    for k in range(max(m, 0), n_triggers + 1):
        total += math.comb(n_triggers, k) * p**k * (1.0 - p) ** (n_triggers - k)
    return min(total, 1.0)


def _golden_section(f, lo: float, hi: float, iters: int = 200) -> float:
    """Position of the minimum of a unimodal f on [lo, hi]."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def chernoff_bound(tau: float, n_classes: int, n_triggers: int) -> float:
    """Chernoff bound on Pr{matches >= tau*N} for an ambiguity attack.

    Minimizes the per-trial base g(y) = (e^y / C + 1 - 1/C) / e^(y*tau) over
    y > 0. The closed-form optimum e^y = tau*(C-1)/(1-tau) applies for
    tau < 1; at tau = 1 it degenerates and a bounded golden-section search
    stands in.
    """
    c, n = n_classes, n_triggers
    if c < 2 or n < 1:
        raise ValueError("need n_classes >= 2 and n_triggers >= 1")
    if not (1.0 / c < tau <= 1.0):
        raise ValueError(f"tau must lie in (1/{c}, 1], got {tau}")

    def log_g(y: float) -> float:
        return math.log(math.exp(y) / c + 1.0 - 1.0 / c) - y * tau

    if tau < 1.0:
        y_star = math.log(tau * (c - 1.0) / (1.0 - tau))
    else:
        y_star = _golden_section(log_g, 1e-9, 60.0)
    return min(1.0, math.exp(n * log_g(y_star)))


def ambiguity_montecarlo(n_classes: int, n_triggers: int, tau: float,
                         trials: int, seed: int = 0) -> float:
    """Fraction of simulated sessions where i.i.d. 1/C matches reach tau*N."""
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(derive_seed(seed, "ambiguity"))
    matches = rng.binomial(n_triggers, 1.0 / n_classes, size=trials)
    return float(np.mean(matches >= match_threshold(tau, n_triggers)))
