"""Market clearing: budgets, clearing error, and the three-stage price search.

The allocation pipeline prices courses so that, when every student buys her
favorite affordable schedule, demand roughly meets supply:

* Stage 1 — tabu-style search over price vectors, scored by clearing error.
* Stage 2 — raise prices of oversubscribed courses until none remain.
* Stage 3 — revisit students in random order with a small budget bump so they
  can pick up leftover seats.

A random-serial-dictatorship baseline (``rsd``) allocates from the same GUI
reports without prices at all.

Students enter the pipeline as :class:`Valuer` objects — a schedule scorer
over one student's permissible-schedule space with a cached best-first
ordering, so a demand query is one cost comparison walk instead of a full
argmax. Any scorer fits: true utilities, GUI reports, or trained value models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .catalog import Catalog, Permissibility, Schedule, ScheduleSpace, popcount
from .prefgen import COST_EPS, TrueUtility, masked_argmax, schedule_space
from .reporting import GuiReport, gui_utilities
from .valuemodel import MonotoneValueModel

#: per-course nonnegative prices, in budget units
PriceVector = np.ndarray

#: per-student schedule bitmasks
Allocation = np.ndarray

#: price granularity for the oversubscription binary search, in budget units
PRICE_GRANULE = 1e-4


@dataclass(frozen=True)
class BudgetAssignment:
    """Per-student budgets in [1, 1+beta]."""

    b: np.ndarray
    beta: float

    def __post_init__(self) -> None:
        b = np.asarray(self.b, dtype=np.float64)
        object.__setattr__(self, "b", b)
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if b.size and (b.min() < 1.0 - 1e-12 or b.max() > 1.0 + self.beta + 1e-12):
            raise ValueError("budgets must lie in [1, 1+beta]")


def draw_budgets(n: int, beta: float = 0.04, seed: int = 0) -> BudgetAssignment:
    """b_i = 1 + U(0, beta), seeded. The spread keeps budgets nearly equal
    while breaking ties in who can afford a contested seat."""
    rng = np.random.default_rng(seed)
    return BudgetAssignment(b=1.0 + rng.uniform(0.0, beta, size=n), beta=beta)


@dataclass(frozen=True)
class ClearingReport:
    """Per-course clearing error z, its norm alpha, and the pass target.

    z_j is excess demand when p_j > 0; at a zero price only oversubscription
    counts (free courses are allowed to go half-empty).
    """

    z: np.ndarray
    alpha: float
    target: float

    @property
    def ok(self) -> bool:
        return self.alpha <= self.target


def clearing_target(m: int, k: int) -> float:
    """Error budget √(σm)/2 with σ = min{2k, m}; independent of n."""
    return float(np.sqrt(min(2 * k, m) * m) / 2.0)


class Valuer:
    """One student's schedule scorer, vectorized over her permissible space.

    ``scores[r]`` is the value of ``space.masks[r]``; ``order`` caches rows
    sorted best-first (ties toward the smaller mask), which turns repeated
    demand queries into short prefix walks.
    """

    def __init__(self, space: ScheduleSpace, scores: np.ndarray, monotone: bool = False):
        if len(scores) != len(space):
            raise ValueError("scores must align with the schedule space")
        self.space = space
        self.scores = np.asarray(scores, dtype=np.float64)
        self.monotone = monotone
        self._order: np.ndarray | None = None

    @classmethod
    def from_true(cls, u: TrueUtility) -> "Valuer":
        space = schedule_space(u.perm, u.m)
        return cls(space, u.utilities(space))

    @classmethod
    def from_gui(cls, r: GuiReport, perm: Permissibility, m: int) -> "Valuer":
        space = schedule_space(perm, m)
        return cls(space, gui_utilities(r, space))

    @classmethod
    def from_model(cls, model: MonotoneValueModel, perm: Permissibility) -> "Valuer":
        space = schedule_space(perm, model.m)
        return cls(space, model.values(space.matrix), monotone=True)

    @property
    def order(self) -> np.ndarray:
        if self._order is None:
            # rows ascend by mask, so a stable sort on -score breaks ties
            # toward the smaller mask — the codebase-wide convention
            self._order = np.argsort(-self.scores, kind="stable").astype(np.int64)
        return self._order

    def value(self, x: Schedule) -> float:
        row = self.space.get_row(x)
        if row is None:
            raise ValueError(f"schedule {x:#b} is not permissible for this student")
        return float(self.scores[row])

    def argmax(self, p: np.ndarray, b: float, exclude=()) -> Schedule:
        afford = self.space.cost(p) <= np.float64(b) + COST_EPS
        best = masked_argmax(self.space, self.scores, afford, exclude)
        return 0 if best is None else best


def best_subset_value(v: Valuer, x: Schedule) -> float:
    """Highest score v assigns to any permissible subset of schedule x.

    Monotone valuers never prefer a strict subset, so when x itself is
    permissible its own score is the answer; otherwise (and for arbitrary
    valuers, where dampened pairs can make smaller schedules better) every
    subset present in the space is scanned.
    """
    if v.monotone:
        row = v.space.get_row(x)
        if row is not None:
            return float(v.scores[row])
    subs = (v.space.masks & ~np.int64(x)) == 0
    return float(v.scores[subs].max())  # never empty: the empty schedule qualifies


def _budget_array(b, n: int) -> np.ndarray:
    arr = b.b if isinstance(b, BudgetAssignment) else np.asarray(b, dtype=np.float64)
    if arr.shape != (n,):
        raise ValueError(f"expected {n} budgets, got shape {arr.shape}")
    return arr


def _first_choice(order: np.ndarray, cost: np.ndarray, b: float) -> int:
    """Row of the best-ranked schedule costing at most b.

    Walks the best-first order in chunks; the empty schedule costs nothing,
    so the walk always terminates.
    """
    lim = np.float64(b) + COST_EPS
    for start in range(0, len(order), 512):
        idx = order[start : start + 512]
        hits = cost[idx] <= lim
        w = int(np.argmax(hits))
        if hits[w]:
            return int(idx[w])
    raise AssertionError("no affordable schedule — empty schedule missing from space")


def _grouped(valuers: Sequence[Valuer]):
    """Students grouped by shared schedule space (cost vectors are per-space)."""
    groups: dict[int, tuple[ScheduleSpace, list[int]]] = {}
    for i, v in enumerate(valuers):
        groups.setdefault(id(v.space), (v.space, []))[1].append(i)
    return list(groups.values())


def _demand_batch(valuers: Sequence[Valuer], b: np.ndarray, prices: np.ndarray) -> np.ndarray:
    """Allocations for a whole batch of price vectors: (q, m) -> (q, n) masks."""
    q, _ = prices.shape
    out = np.zeros((q, len(valuers)), dtype=np.int64)
    for space, members in _grouped(valuers):
        costs = space.matrix @ prices.T.astype(np.float32)  # (S, q)
        for c in range(q):
            col = costs[:, c]
            for i in members:
                row = _first_choice(valuers[i].order, col, b[i])
                out[c, i] = space.masks[row]
    return out


def demand(valuers: Sequence[Valuer], p: np.ndarray, b) -> Allocation:
    """Every student's favorite affordable schedule at prices p."""
    b_arr = _budget_array(b, len(valuers))
    return _demand_batch(valuers, b_arr, np.asarray(p, dtype=np.float64)[None, :])[0]


def seat_counts(alloc: Allocation, m: int) -> np.ndarray:
    """Per-course demand counts of an allocation."""
    a = np.asarray(alloc, dtype=np.int64)
    return ((a[:, None] >> np.arange(m)) & 1).sum(axis=0)


def _z_of(counts: np.ndarray, p: np.ndarray, capacities: np.ndarray) -> np.ndarray:
    excess = counts - capacities
    return np.where(np.asarray(p) > 0, excess, np.maximum(excess, 0)).astype(np.float64)


def clearing_error(
    a: Allocation, p: np.ndarray, catalog: Catalog, k: int | None = None
) -> ClearingReport:
    """Clearing error of an allocation at prices p.

    k is the permissible-schedule size cap that sets the pass target; when not
    given, the largest allocated bundle stands in for it (callers that know
    the real cap should pass it — an allocation of small bundles would
    otherwise understate the target).
    """
    counts = seat_counts(a, catalog.m)
    z = _z_of(counts, p, catalog.capacities)
    if k is None:
        k = max((popcount(int(x)) for x in np.asarray(a).ravel()), default=1) or 1
    return ClearingReport(
        z=z, alpha=float(np.sqrt((z**2).sum())), target=clearing_target(catalog.m, k)
    )


@dataclass(frozen=True)
class Stage1Config:
    """Tabu-search knobs for the price search.

    Each step proposes, per course with nonzero error, prices nudged up and
    down by delta·|z_j| (jittered by U(0.1, 1.5), so the walk mixes coarse
    and fine moves — demand cliffs near the budget boundary need fine ones),
    plus one joint gradient-like move p + eta·z. The reverse of an accepted
    move is tabu for ``tenure`` steps unless it would beat the best α seen so
    far; after ``restart_after`` steps without a new best, the walk resets to
    the best-so-far prices with a cleared tabu list.

    ``p0``, when given, seeds the walk at those prices instead of the
    demand-proportional default — callers re-clearing a market that moved
    only slightly (queries folded into a handful of value models, say)
    start at the old equilibrium rather than rediscovering it from scratch.
    """

    max_steps: int = 500
    delta: float = 0.1
    eta: float = 0.1
    tenure: int = 10
    restart_after: int = 40
    seed: int = 0
    p0: tuple[float, ...] | None = None


def stage1_search(
    valuers: Sequence[Valuer],
    b,
    catalog: Catalog,
    cfg: Stage1Config | None = None,
    trace_out: list | None = None,
) -> tuple[PriceVector, Allocation, ClearingReport]:
    """Search for prices that approximately clear the market.

    Returns the best price vector found, its allocation, and the clearing
    report. The walk spends its whole step budget (stopping early only on
    a perfect α of zero) rather than the moment the error dips under the
    target: the oversubscription stage that follows works by nudging
    prices, and it needs them already near competitive levels — prices
    abandoned at the first sub-target error leave it whole budgets away.

    Equal-α candidates are ranked by oversubscription mass, the less the
    better. The stage after this one can only remove oversubscription by
    raising prices, and every raise makes some student re-solve her whole
    bundle — up to 2k seats flip per shed demander, so extra demand left
    on full courses tends to snowball there. Undersubscribed seats at the
    same α are inert by comparison. The tie-break term is far below the
    smallest gap between distinct α values, so α stays primary.
    """
    cfg = cfg or Stage1Config()
    b_arr = _budget_array(b, len(valuers))
    m, capacities = catalog.m, catalog.capacities
    k = max(v.space.perm.max_courses for v in valuers)
    target = clearing_target(m, k)
    rng = np.random.default_rng(cfg.seed)

    def evaluate(prices: np.ndarray):
        allocs = _demand_batch(valuers, b_arr, prices)
        counts = np.stack([seat_counts(row, m) for row in allocs])
        zs = np.where(prices > 0, counts - capacities, np.maximum(counts - capacities, 0))
        alphas = np.sqrt((zs.astype(np.float64) ** 2).sum(axis=1))
        scores = alphas + 1e-6 * np.maximum(zs, 0).sum(axis=1)
        return allocs, zs, alphas, scores

    # Free courses first: when nothing is contested at zero prices the
    # market has cleared outright and the later stages have nothing to do.
    # A nonzero error forces the walk even if it is under the target —
    # all-zero prices leave the oversubscription stage no budget pressure
    # to work with, so a course can only be pried loose by pricing it
    # near a full budget, which guts the rest of the schedule.
    zero = np.zeros((1, m))
    alloc0, z0, alpha0, _ = evaluate(zero)
    if float(alpha0[0]) == 0.0:
        report = ClearingReport(
            z=z0[0].astype(np.float64), alpha=0.0, target=target
        )
        return zero[0].copy(), alloc0[0].copy(), report

    if cfg.p0 is not None:
        p = np.asarray(cfg.p0, dtype=np.float64)
        if p.shape != (m,):
            raise ValueError(f"p0 must have one price per course, got shape {p.shape}")
    else:
        # walk from demand-proportional prices scaled so an average
        # max-size bundle costs about one budget
        d = seat_counts(alloc0[0], m).astype(np.float64)
        p = d / (k * d.mean())
    allocs, zs, alphas, scores = evaluate(p[None, :])
    best = (float(scores[0]), float(alphas[0]), p, allocs[0], zs[0])
    cur = best

    tabu: dict[tuple[int, int], int] = {}
    step = 0
    stall = 0
    while best[1] > 0.0 and step < cfg.max_steps:
        step += 1
        if stall >= cfg.restart_after:
            cur = best
            tabu.clear()
            stall = 0
        _, _, p, _, z = cur
        moves: list[tuple[int, int] | None] = []
        rows: list[np.ndarray] = []
        jitter = rng.uniform(0.1, 1.5, size=(m, 2))
        for j in range(m):
            if z[j] == 0:
                continue
            for s, sign in enumerate((1, -1)):
                pj = max(0.0, p[j] + sign * cfg.delta * abs(z[j]) * jitter[j, s])
                if pj != p[j]:
                    cand = p.copy()
                    cand[j] = pj
                    moves.append((j, sign))
                    rows.append(cand)
        moves.append(None)
        rows.append(np.maximum(0.0, p + cfg.eta * z))
        prices = np.stack(rows)
        allocs, zs, alphas, scores = evaluate(prices)

        ranked = np.argsort(scores, kind="stable")
        chosen = None
        for c in ranked:
            key = moves[c]
            if key is None or tabu.get(key, 0) <= step or scores[c] < best[0]:
                chosen = int(c)
                break
        if chosen is None:  # every move tabu and none improving: reset memory
            tabu.clear()
            chosen = int(ranked[0])

        if moves[chosen] is not None:
            j, sign = moves[chosen]
            tabu[(j, -sign)] = step + cfg.tenure
        cur = (
            float(scores[chosen]),
            float(alphas[chosen]),
            prices[chosen],
            allocs[chosen],
            zs[chosen],
        )
        if cur[0] < best[0]:
            best = cur
            stall = 0
        else:
            stall += 1
        if trace_out is not None:
            trace_out.append((step, cur[1], best[1]))

    _, alpha, p, alloc, z = best
    report = ClearingReport(z=z.astype(np.float64), alpha=alpha, target=target)
    return p.copy(), alloc.copy(), report


def _count_course(alloc: Allocation, j: int) -> int:
    return int(((np.asarray(alloc, dtype=np.int64) >> j) & 1).sum())


def stage2_remove_oversubscription(
    p: PriceVector, a: Allocation, valuers: Sequence[Valuer], b, catalog: Catalog
) -> tuple[PriceVector, Allocation]:
    """Raise prices until no course is oversubscribed.

    Repeatedly takes the most oversubscribed course and binary-searches the
    smallest price raise (granularity PRICE_GRANULE) that prices at least one
    current demander off it. Prices only ever move up; demand for a course is
    nonincreasing in its own price, which makes the bisection sound.
    """
    b_arr = _budget_array(b, len(valuers))
    p = np.asarray(p, dtype=np.float64).copy()
    a = np.asarray(a, dtype=np.int64).copy()
    hi_price = float(b_arr.max()) + 1.0  # no bundle containing j stays affordable

    for _ in range(100 * catalog.m * len(valuers) + 100):
        over = seat_counts(a, catalog.m) - catalog.capacities
        j = int(np.argmax(over))
        if over[j] <= 0:
            return p, a
        count = _count_course(a, j)
        lo, hi = float(p[j]), hi_price
        while hi - lo > PRICE_GRANULE:
            mid = (lo + hi) / 2.0
            trial = p.copy()
            trial[j] = mid
            if _count_course(demand(valuers, trial, b_arr), j) <= count - 1:
                hi = mid
            else:
                lo = mid
        p[j] = hi
        a = demand(valuers, p, b_arr)
    raise AssertionError("oversubscription removal failed to terminate")


def stage3_fill(
    p: PriceVector,
    a: Allocation,
    valuers: Sequence[Valuer],
    b,
    bump: float = 0.10,
    catalog: Catalog | None = None,
    order_seed: int = 0,
) -> Allocation:
    """Let students move into leftover seats.

    Visits students in a seeded random order; each may exchange her
    schedule for a strictly better one that costs at most b_i·(1+bump)
    and adds no course that is already full — courses she holds she may
    keep or drop, and a dropped seat frees up for the students visited
    after her. Utilities weakly improve (she keeps her bundle unless the
    alternative is strictly better) and no course ever exceeds capacity.

    The seats this pass fills are typically the ones the previous stage
    emptied: removing oversubscription only ever raises prices, so it
    tends to end with demand priced off courses that still have room.
    The budget bump is what lets students afford their way back in.
    """
    if catalog is None:
        raise ValueError("stage3_fill needs the catalog for seat accounting")
    b_arr = _budget_array(b, len(valuers))
    a = np.asarray(a, dtype=np.int64).copy()
    m, capacities = catalog.m, catalog.capacities
    counts = seat_counts(a, m)
    bits = np.arange(m)

    for i in np.random.default_rng(order_seed).permutation(len(valuers)):
        v = valuers[i]
        own = (int(a[i]) >> bits) & 1
        full = counts >= capacities  # courses she could not add a seat in
        blocked = int((np.int64(1) << bits[full & (own == 0)]).sum())
        allowed = (v.space.masks & blocked) == 0
        afford = v.space.cost(p) <= b_arr[i] * (1.0 + bump) + COST_EPS
        cand = masked_argmax(v.space, v.scores, allowed & afford)
        if cand is not None and v.value(cand) > v.value(int(a[i])):
            counts += ((cand >> bits) & 1) - own
            a[i] = cand
    return a


def rsd(
    reports: Sequence[GuiReport],
    catalog: Catalog,
    seed: int = 0,
    *,
    perms: Sequence[Permissibility],
) -> Allocation:
    """Random serial dictatorship over the same GUI reports.

    Students draw a seeded random order; each takes her report-maximizing
    permissible schedule among courses with seats still open. No prices, no
    budgets.
    """
    if len(reports) != len(perms):
        raise ValueError("need one permissibility per report")
    remaining = catalog.capacities.copy()
    bits = np.arange(catalog.m)
    a = np.zeros(len(reports), dtype=np.int64)
    for i in np.random.default_rng(seed).permutation(len(reports)):
        space = schedule_space(perms[i], catalog.m)
        blocked = int((np.int64(1) << bits[remaining < 1]).sum())
        allowed = (space.masks & blocked) == 0
        pick = masked_argmax(space, gui_utilities(reports[i], space), allowed)
        if pick is not None:
            a[i] = pick
            remaining -= (pick >> bits) & 1
    return a


def is_feasible(
    alloc: Allocation, catalog: Catalog, perms: Sequence[Permissibility] | None = None
) -> bool:
    """No course over capacity, and (when perms given) every bundle permissible."""
    if (seat_counts(alloc, catalog.m) > catalog.capacities).any():
        return False
    if perms is not None:
        from .catalog import is_permissible

        return all(is_permissible(int(x), pm) for x, pm in zip(alloc, perms))
    return True


def allocation_to_json(alloc: Allocation, p: PriceVector) -> str:
    return json.dumps(
        {"prices": [float(x) for x in p], "allocation": [int(x) for x in alloc]}
    )


def allocation_from_json(text: str) -> tuple[Allocation, PriceVector]:
    doc = json.loads(text)
    return (
        np.array(doc["allocation"], dtype=np.int64),
        np.array(doc["prices"], dtype=np.float64),
    )
