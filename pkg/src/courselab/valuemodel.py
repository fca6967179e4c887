"""Monotone value networks trained on mixed cardinal/ordinal data.

The model is a one-hidden-layer network with nonnegative weights, nonpositive
hidden biases, no output bias, and a bounded ReLU activation min(t, max(0, z)).
Those constraints make two facts structural rather than learned: the empty
schedule is worth exactly zero, and adding a course never lowers the value.

Training runs in two full-batch phases (regression on schedule/value pairs,
then ranking on preferred/dispreferred pairs via a sigmoid of the value
difference), with the sign constraints re-projected after every ADAM step.

A "linear" variant — plain unconstrained-sign coefficients through the same
trainer — exists for small hand-checkable economies where the exact learned
coefficients matter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from .catalog import Permissibility, Schedule, mask_of, popcount
from .prefgen import affordable_mask, masked_argmax, schedule_space
from .reporting import GuiReport, eval_gui


@dataclass
class CardinalDataset:
    """Schedules with target utilities (the regression half of training)."""

    masks: np.ndarray  # int64, one schedule bitmask per row
    targets: np.ndarray  # float64 utilities, same length

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.masks.shape != self.targets.shape:
            raise ValueError("masks and targets must align")

    def __len__(self) -> int:
        return int(self.masks.size)


@dataclass
class OrdinalDataset:
    """Preferred/dispreferred schedule pairs (the ranking half of training)."""

    preferred: np.ndarray
    dispreferred: np.ndarray

    def __post_init__(self) -> None:
        self.preferred = np.asarray(self.preferred, dtype=np.int64)
        self.dispreferred = np.asarray(self.dispreferred, dtype=np.int64)
        if self.preferred.shape != self.dispreferred.shape:
            raise ValueError("pair arrays must align")
        if np.any(self.preferred == self.dispreferred):
            raise ValueError("a schedule cannot be preferred to itself")

    def __len__(self) -> int:
        return int(self.preferred.size)


def empty_ordinal() -> OrdinalDataset:
    return OrdinalDataset(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))


def ordinal_from_ranking(ranked: list[Schedule]) -> OrdinalDataset:
    """All pairwise orderings implied by a best-first ranked list."""
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicates")
    pref, disp = [], []
    for i, better in enumerate(ranked):
        for worse in ranked[i + 1 :]:
            pref.append(better)
            disp.append(worse)
    return OrdinalDataset(np.array(pref, dtype=np.int64), np.array(disp, dtype=np.int64))


@dataclass(frozen=True)
class TrainConfig:
    t_reg: int = 100
    eta_reg: float = 1e-2
    lambda_reg: float = 1e-3
    t_class: int = 10
    eta_class: float = 1e-2
    lambda_class: float = 0.0
    hidden: int = 20
    layers: int = 1

    def __post_init__(self) -> None:
        if self.t_reg <= 0 or self.t_class <= 0:
            raise ValueError("epoch counts must be positive")
        if self.eta_reg <= 0 or self.eta_class <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_reg < 0 or self.lambda_class < 0:
            raise ValueError("regularization must be nonnegative")
        if self.layers != 1:
            raise ValueError("only single-hidden-layer models are supported")


#: Trainer settings for the linear variant. The tiny learning rate matters:
#: at 1e-2 the full-batch ADAM iterates orbit the exact fit with an amplitude
#: larger than the value gaps the worked examples rely on.
LINEAR_TRAIN = TrainConfig(
    t_reg=1500, eta_reg=2e-3, lambda_reg=0.0, t_class=60, eta_class=2e-3, hidden=0
)


@dataclass
class MonotoneValueModel:
    """One-hidden-layer value network; ``linear=True`` degrades to a dot product.

    In linear mode ``w1`` has shape (1, m) and holds the coefficients, while
    ``b1`` is pinned at 0 and ``w2`` at 1 so the same forward pass applies
    (with the activation replaced by identity). Only ``w1`` trains then, and
    no sign constraints are enforced.
    """

    w1: np.ndarray  # (hidden, m), >= 0 unless linear
    b1: np.ndarray  # (hidden,), <= 0 unless linear (then pinned 0)
    w2: np.ndarray  # (hidden,), >= 0 unless linear (then pinned 1)
    t: float = 1.0
    scale: float = 1.0
    linear: bool = False

    @property
    def m(self) -> int:
        return int(self.w1.shape[1])

    def copy(self) -> "MonotoneValueModel":
        return replace(self, w1=self.w1.copy(), b1=self.b1.copy(), w2=self.w2.copy())

    def values(self, matrix: np.ndarray) -> np.ndarray:
        """Evaluate every row of a binary schedule matrix. Returns float64."""
        x = np.asarray(matrix, dtype=np.float64)
        z = x @ self.w1.T + self.b1
        a = z if self.linear else np.clip(z, 0.0, self.t)
        return (a @ self.w2) * self.scale

    def value(self, x: Schedule) -> float:
        row = (np.int64(x) >> np.arange(self.m)) & 1
        return float(self.values(row.astype(np.float64)[None, :])[0])

    def project(self) -> None:
        """Re-impose the sign constraints (a no-op for the linear variant)."""
        if self.linear:
            return
        np.maximum(self.w1, 0.0, out=self.w1)
        np.maximum(self.w2, 0.0, out=self.w2)
        np.minimum(self.b1, 0.0, out=self.b1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "m": self.m,
                "hidden": int(self.w1.shape[0]),
                "w1": self.w1.tolist(),
                "b1": self.b1.tolist(),
                "w2": self.w2.tolist(),
                "t": self.t,
                "scale": self.scale,
                "linear": self.linear,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "MonotoneValueModel":
        d = json.loads(text)
        model = MonotoneValueModel(
            w1=np.array(d["w1"], dtype=np.float64).reshape(d["hidden"], d["m"]),
            b1=np.array(d["b1"], dtype=np.float64),
            w2=np.array(d["w2"], dtype=np.float64),
            t=float(d["t"]),
            scale=float(d["scale"]),
            linear=bool(d["linear"]),
        )
        return model


def init_model(
    m: int, hidden: int = 20, *, linear: bool = False, scale: float = 1.0, seed: int = 0
) -> MonotoneValueModel:
    """Fresh seeded model. Weights ~ U(0, 1/sqrt(fan-in)), biases zero."""
    if linear:
        return MonotoneValueModel(
            w1=np.zeros((1, m)), b1=np.zeros(1), w2=np.ones(1), scale=scale, linear=True
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    w1 = rng.uniform(0.0, 1.0 / math.sqrt(m), size=(hidden, m))
    w2 = rng.uniform(0.0, 1.0 / math.sqrt(hidden), size=hidden)
    return MonotoneValueModel(w1=w1, b1=np.zeros(hidden), w2=w2, scale=scale)


# ---------------------------------------------------------------------------
# Cardinal dataset construction


def _masks_to_matrix(masks: np.ndarray, m: int) -> np.ndarray:
    return ((masks[:, None] >> np.arange(m)) & 1).astype(np.float64)


def _sample_distinct_subsets(
    pool: np.ndarray, size: int, count: int, rng: np.random.Generator
) -> list[Schedule]:
    """Up to `count` distinct size-`size` subsets of `pool`, as bitmasks.

    Uniform via rejection while the subset space is large; when it is not
    (at most `count` subsets exist) every subset is returned instead.
    """
    if size <= 0 or pool.size < size:
        return []
    total = math.comb(pool.size, size)
    if total <= count:
        return sorted(mask_of(c) for c in combinations(pool.tolist(), size))
    seen: set[int] = set()
    out: list[Schedule] = []
    while len(out) < count:
        pick = rng.choice(pool, size=size, replace=False)
        mask = mask_of(pick.tolist())
        if mask not in seen:
            seen.add(mask)
            out.append(mask)
    return out


def build_cardinal(
    r: GuiReport,
    perm: Permissibility,
    n_t2: int = 100,
    n_t3: int = 100,
    seed: int = 0,
    m: int | None = None,
) -> CardinalDataset:
    """Training targets inferred from one report, in three bundle families.

    T1: every reported course alone, plus every adjusted pair (their values
    are pinned exactly by the report). T2: random bundles drawn from the
    reported courses, valued by the report. T3: random bundles containing at
    least one unreported course; each unreported course contributes half the
    lowest nonzero reported base (its expected value under a uniform guess
    between zero and the smallest value the student bothered to report).

    Bundle size is min(5, number of reported courses) for T2 and min(5, m)
    for T3 — training bundles deliberately ignore schedule-size limits so the
    fitted surface covers the whole domain the ranking phase may visit.

    Pass ``m`` when the catalog has courses beyond those the report or the
    permissibility constraints happen to mention; otherwise the course count
    is inferred from the largest id seen.
    """
    if m is None:
        m = perm_courses(perm, r)
    reported = np.array(sorted(r.base), dtype=np.int64)
    if reported.size == 0 and n_t3 <= 0:
        raise ValueError("no reported courses and no imputed bundles requested")

    masks: list[Schedule] = []
    targets: list[float] = []
    for j in reported.tolist():
        masks.append(1 << j)
        targets.append(r.base[j])
    for (j, jj), adj in sorted(r.adjustments.items()):
        masks.append((1 << j) | (1 << jj))
        targets.append(r.base[j] + r.base[jj] + adj)

    rng = np.random.Generator(np.random.PCG64(seed))
    t2_size = min(5, int(reported.size))
    for mask in _sample_distinct_subsets(reported, t2_size, n_t2, rng):
        masks.append(mask)
        targets.append(eval_gui(r, mask))

    h = min(r.base.values()) if r.base else 0.0
    unreported = np.setdiff1d(np.arange(m, dtype=np.int64), reported)
    if unreported.size > 0 and n_t3 > 0:
        t3_size = min(5, m)
        rep_mask = mask_of(reported.tolist())
        all_courses = np.arange(m, dtype=np.int64)
        total = math.comb(m, t3_size) - (
            math.comb(int(reported.size), t3_size) if reported.size >= t3_size else 0
        )
        budget = min(n_t3, total)
        seen: set[int] = set()
        while len(seen) < budget:
            pick = rng.choice(all_courses, size=t3_size, replace=False)
            mask = mask_of(pick.tolist())
            n_unrep = popcount(mask & ~rep_mask)
            if n_unrep == 0 or mask in seen:
                continue
            seen.add(mask)
            masks.append(mask)
            targets.append(eval_gui(r, mask) + 0.5 * h * n_unrep)

    return CardinalDataset(np.array(masks, dtype=np.int64), np.array(targets))


def perm_courses(perm: Permissibility, r: GuiReport) -> int:
    """Course count implied by a report/permissibility pair.

    Permissibility does not carry m explicitly, so take one more than the
    largest course id mentioned anywhere (report, ineligibility, conflicts).
    """
    ids = list(r.base)
    ids.extend(j for pair in r.adjustments for j in pair)
    ids.extend(perm.ineligible)
    for group in perm.slot_conflicts:
        ids.extend(group)
    return (max(ids) + 1) if ids else 0


# ---------------------------------------------------------------------------
# Losses and their gradients (analytic; checked against finite differences)


def _forward(model: MonotoneValueModel, x: np.ndarray):
    z = x @ model.w1.T + model.b1
    if model.linear:
        return z @ model.w2, z, None
    a = np.clip(z, 0.0, model.t)
    gate = ((z > 0.0) & (z < model.t)).astype(np.float64)
    return a @ model.w2, a, gate


def _backward(model: MonotoneValueModel, x: np.ndarray, a, gate, dldf: np.ndarray):
    """Gradients of sum_i dldf[i]*f(x_i) w.r.t. the trainable parameters."""
    if model.linear:
        return {"w1": (dldf @ x)[None, :] * model.w2[0]}
    gw2 = a.T @ dldf
    dz = np.outer(dldf, model.w2) * gate
    return {"w1": dz.T @ x, "b1": dz.sum(axis=0), "w2": gw2}


def _reg_terms(model: MonotoneValueModel, lam: float, grads: dict) -> float:
    """Add l2 penalty gradients in place; return the penalty value."""
    if lam == 0.0:
        return 0.0
    penalty = 0.0
    for name in grads:
        arr = getattr(model, name)
        grads[name] = grads[name] + 2.0 * lam * arr
        penalty += float((arr * arr).sum())
    return lam * penalty

def regression_loss_grads(
    model: MonotoneValueModel, x: np.ndarray, y: np.ndarray, lam: float
):
    """Mean absolute error (in the model's normalized space) + l2 penalty."""
    f, a, gate = _forward(model, x)
    resid = f - y
    n = max(len(y), 1)
    loss = float(np.abs(resid).mean()) if len(y) else 0.0
    grads = _backward(model, x, a, gate, np.sign(resid) / n)
    loss += _reg_terms(model, lam, grads)
    return loss, grads


def ranking_loss_grads(
    model: MonotoneValueModel, x1: np.ndarray, x2: np.ndarray, lam: float
):
    """Binary cross entropy of sigmoid(M(x1) - M(x2)) against "x1 wins".

    The difference is taken in value units (scale applied), not in the
    network's normalized output space: a pair already ordered with a few
    points to spare then sits in the sigmoid's flat tail and stops pulling,
    so ordinal fine-tuning corrects actual violations and leaves the fitted
    cardinal surface alone.
    """
    f1, a1, g1 = _forward(model, x1)
    f2, a2, g2 = _forward(model, x2)
    d = (f1 - f2) * model.scale
    n = max(len(d), 1)
    # BCE with label 1 is softplus(-d); its derivative is sigmoid(d) - 1.
    loss = float(np.logaddexp(0.0, -d).mean()) if len(d) else 0.0
    coef = (1.0 / (1.0 + np.exp(-d)) - 1.0) * model.scale / n
    grads = _backward(model, x1, a1, g1, coef)
    for name, g in _backward(model, x2, a2, g2, -coef).items():
        grads[name] = grads[name] + g
    loss += _reg_terms(model, lam, grads)
    return loss, grads


class _Adam:
    def __init__(self, shapes: dict[str, tuple], lr: float):
        self.lr = lr
        self.mom = {k: np.zeros(s) for k, s in shapes.items()}
        self.vel = {k: np.zeros(s) for k, s in shapes.items()}
        self.step = 0

    def update(self, model: MonotoneValueModel, grads: dict[str, np.ndarray]) -> None:
        self.step += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for name, g in grads.items():
            self.mom[name] = b1 * self.mom[name] + (1 - b1) * g
            self.vel[name] = b2 * self.vel[name] + (1 - b2) * g * g
            mhat = self.mom[name] / (1 - b1**self.step)
            vhat = self.vel[name] / (1 - b2**self.step)
            getattr(model, name)[...] -= self.lr * mhat / (np.sqrt(vhat) + eps)


def _trainable_shapes(model: MonotoneValueModel) -> dict[str, tuple]:
    if model.linear:
        return {"w1": model.w1.shape}
    return {"w1": model.w1.shape, "b1": model.b1.shape, "w2": model.w2.shape}


def _run_regression_phase(
    model: MonotoneValueModel, x, y, epochs: int, lr: float, lam: float
) -> list[float]:
    opt = _Adam(_trainable_shapes(model), lr)
    losses = []
    for _ in range(epochs):
        loss, grads = regression_loss_grads(model, x, y, lam)
        losses.append(loss)
        opt.update(model, grads)
        model.project()
    return losses


def _run_ranking_phase(
    model: MonotoneValueModel, x1, x2, epochs: int, lr: float, lam: float
) -> list[float]:
    opt = _Adam(_trainable_shapes(model), lr)
    losses = []
    for _ in range(epochs):
        loss, grads = ranking_loss_grads(model, x1, x2, lam)
        losses.append(loss)
        opt.update(model, grads)
        model.project()
    return losses


def train(
    model: MonotoneValueModel,
    d_card: CardinalDataset,
    d_ord: OrdinalDataset,
    cfg: TrainConfig,
) -> MonotoneValueModel:
    """Two-phase full-batch training; returns a new model, input untouched.

    Phase one fits the cardinal targets (normalized by model.scale) under
    MAE; phase two fine-tunes on the ordinal pairs under BCE. Passing the
    returned model back in with more data warm-starts from where it stopped.
    """
    if len(d_card) == 0:
        raise ValueError("cardinal dataset must be nonempty")
    out = model.copy()
    x = _masks_to_matrix(d_card.masks, out.m)
    y = d_card.targets / out.scale
    _run_regression_phase(out, x, y, cfg.t_reg, cfg.eta_reg, cfg.lambda_reg)
    if len(d_ord):
        x1 = _masks_to_matrix(d_ord.preferred, out.m)
        x2 = _masks_to_matrix(d_ord.dispreferred, out.m)
        _run_ranking_phase(out, x1, x2, cfg.t_class, cfg.eta_class, cfg.lambda_class)
    return out


# ---------------------------------------------------------------------------
# Budget-constrained argmax and projection back to the reporting language


def argmax_model(
    model: MonotoneValueModel,
    p: np.ndarray,
    b: float,
    perm: Permissibility,
    exclude: frozenset[Schedule] | set[Schedule] = frozenset(),
    space=None,
) -> Schedule:
    """Most valuable affordable permissible schedule outside `exclude`.

    Ties break toward the smallest bitmask; with nothing left the empty
    schedule comes back (it is always affordable).
    """
    if space is None:
        space = schedule_space(perm, model.m)
    scores = model.values(space.matrix)
    afford = affordable_mask(space, np.asarray(p, dtype=np.float64), b)
    best = masked_argmax(space, scores, afford, exclude)
    return 0 if best is None else best


def project_to_gui(model: MonotoneValueModel, k_samples: int = 1000, seed: int = 0) -> GuiReport:
    """Distill a model into base values and pairwise adjustments.

    Fits a degree-2 polynomial (no intercept — the empty schedule is worth
    zero on both sides) to the model's values on `k_samples` uniform random
    schedules, by projected gradient descent with the coefficients boxed to
    what the reporting language allows: bases in [0, 100], adjustments in
    [-200, 200]. Courses whose fitted base rounds to zero stay unreported,
    and adjustments survive only if both endpoints are reported.
    """
    m = model.m
    n_pairs = m * (m - 1) // 2
    if k_samples < m + n_pairs:
        raise ValueError("need at least as many samples as coefficients")
    rng = np.random.Generator(np.random.PCG64(seed))
    x = (rng.random((k_samples, m)) < 0.5).astype(np.float64)
    y = model.values(x)

    iu, ju = np.triu_indices(m, k=1)
    phi = np.concatenate([x, x[:, iu] * x[:, ju]], axis=1)
    gram = phi.T @ phi
    lip = 2.0 * float(np.linalg.eigvalsh(gram)[-1]) / k_samples
    lo = np.concatenate([np.zeros(m), np.full(n_pairs, -200.0)])
    hi = np.concatenate([np.full(m, 100.0), np.full(n_pairs, 200.0)])

    w = np.zeros(m + n_pairs)
    prev = np.inf
    for _ in range(5000):
        resid = phi @ w - y
        w = np.clip(w - (2.0 / k_samples) * (phi.T @ resid) / lip, lo, hi)
        loss = float(resid @ resid) / k_samples
        if prev - loss < 1e-10 * max(1.0, loss):
            break
        prev = loss

    base = {j: float(w[j]) for j in range(m) if w[j] > 1e-9}
    adjustments = {}
    for idx, (j, jj) in enumerate(zip(iu.tolist(), ju.tolist())):
        a = float(w[m + idx])
        if abs(a) > 1e-9 and j in base and jj in base:
            adjustments[(j, jj)] = a
    return GuiReport(base=base, adjustments=adjustments)
